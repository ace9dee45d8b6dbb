//! A tiny GPT-style causal language model with frozen base weights and
//! trainable low-rank adapters.
//!
//! Every adapted projection `y = x·W + b` becomes
//! `y = x·W + b + (α/r)·(drop(x)·A)·B` with `A: m×r` and `B: r×n`. Only
//! `A` and `B` receive gradients during fine-tuning; the base is shared by
//! reference between clients and never mutated after pretraining.

mod params;
pub mod tensor;
mod train;
mod transformer;

pub use params::{BaseParams, BlockParams, DeltaTheta, LoraAdapterSet, LoraPair, LoraParams, TinyLM};
pub use train::{
    base_loss_and_grads, loss_and_grads, local_steps, pretrain_base, PretrainConfig, SgdMomentum, TrainingConfig,
};
pub use transformer::{base_logits, forward_logits, mean_cross_entropy, perplexity, shard_logits, LogitsBlock};

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which projections carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptTargets {
    pub attention: bool,
    pub mlp: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub context: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub adapt: AdaptTargets,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 512,
            d_model: 32,
            context: 64,
            layers: 1,
            heads: 4,
            mlp_hidden: 128,
            lora_rank: 4,
            lora_alpha: 32.0,
            lora_dropout: 0.1,
            adapt: AdaptTargets {
                attention: true,
                mlp: true,
            },
        }
    }
}

/// An adapted projection inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SiteKind {
    Query,
    Key,
    Value,
    Output,
    MlpIn,
    MlpOut,
}

impl SiteKind {
    pub fn name(&self) -> &'static str {
        match self {
            SiteKind::Query => "attn.q",
            SiteKind::Key => "attn.k",
            SiteKind::Value => "attn.v",
            SiteKind::Output => "attn.o",
            SiteKind::MlpIn => "mlp.in",
            SiteKind::MlpOut => "mlp.out",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub layer: usize,
    pub kind: SiteKind,
    pub rows: usize,
    pub cols: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if self.vocab < 2 || self.d_model == 0 || self.context == 0 || self.layers == 0 || self.mlp_hidden == 0 {
            return bad(format!("degenerate model dimensions: {self:?}"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.lora_rank == 0 {
            return bad("lora rank must be at least 1".into());
        }
        if let Some(limit) = self.sites().iter().map(|s| s.rows.min(s.cols)).min() {
            if self.lora_rank >= limit {
                return bad(format!("lora rank {} not below adapted dimension {limit}", self.lora_rank));
            }
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return bad("lora dropout must lie in [0, 1)".into());
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return bad("lora alpha must be positive".into());
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    /// Adapted projections in canonical order (layer-major).
    pub fn sites(&self) -> Vec<Site> {
        let d = self.d_model;
        let h = self.mlp_hidden;
        let mut out = Vec::new();
        for layer in 0..self.layers {
            if self.adapt.attention {
                for kind in [SiteKind::Query, SiteKind::Key, SiteKind::Value, SiteKind::Output] {
                    out.push(Site {
                        layer,
                        kind,
                        rows: d,
                        cols: d,
                    });
                }
            }
            if self.adapt.mlp {
                out.push(Site {
                    layer,
                    kind: SiteKind::MlpIn,
                    rows: d,
                    cols: h,
                });
                out.push(Site {
                    layer,
                    kind: SiteKind::MlpOut,
                    rows: h,
                    cols: d,
                });
            }
        }
        out
    }
}

/// Number of adapter parameters: `Σ r·(m + n)` over adapted `m×n` matrices.
pub fn count_trainable_params(config: &ModelConfig) -> usize {
    config
        .sites()
        .iter()
        .map(|s| config.lora_rank * (s.rows + s.cols))
        .sum()
}

/// Perplexity decrease per trainable parameter.
pub fn ratio_metric(ppl_pretrained: f64, ppl_finetuned: f64, n_trainable: usize) -> f64 {
    (ppl_pretrained - ppl_finetuned) / n_trainable as f64
}
