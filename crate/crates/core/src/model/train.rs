use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::{BaseParams, DeltaTheta, LoraAdapterSet, LoraParams, TinyLM};
use super::transformer::{backward, forward, window_loss, Adapters, Dropout};
use super::ModelConfig;
use crate::corpus::Shard;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{tag, Rng};

/// Local optimiser settings of a client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Windows per micro-batch.
    pub batch_size: usize,
    /// Micro-batches averaged per optimiser step.
    pub accum: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.05,
            momentum: 0.9,
            batch_size: 4,
            accum: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 300,
            lr: 3e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// SGD with heavy-ball momentum (`v ← μv + g`, `θ ← θ − lr·v`). The velocity
/// persists across communication intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Option<LoraParams>,
}

impl SgdMomentum {
    pub fn new(momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: None,
        }
    }

    fn step(&mut self, params: &mut LoraParams, grads: &LoraParams, lr: f64) {
        let v = self.velocity.get_or_insert_with(|| grads.zeros_like());
        let mu = self.momentum;
        for (vs, gs) in v.slices_mut().zip(grads.slices()) {
            for (vv, g) in vs.iter_mut().zip(gs) {
                *vv = mu * *vv + g;
            }
        }
        params.axpy(-lr, v);
    }
}

fn batch_targets(batch: &[&[u32]]) -> Result<usize> {
    if batch.is_empty() || batch.iter().any(|w| w.len() < 2) {
        return Err(Error::InvalidInput("batch needs windows of at least two tokens".into()));
    }
    Ok(batch.iter().map(|w| w.len() - 1).sum())
}

fn run_batch(
    model: &TinyLM,
    adapters: Option<&LoraParams>,
    batch: &[&[u32]],
    mut dropout: Option<&mut Rng>,
    mut lora_grads: Option<&mut LoraParams>,
    mut base_grads: Option<&mut BaseParams>,
) -> Result<f64> {
    let cfg = model.config();
    let count = batch_targets(batch)?;
    let weight = 1.0 / count as f64;
    let ad = adapters.map(|params| Adapters {
        params,
        scale: cfg.lora_scale(),
    });
    let mut total = 0.0;
    for w in batch {
        if w.len() - 1 > cfg.context {
            return Err(Error::InvalidInput(format!(
                "window of {} tokens exceeds context {}",
                w.len(),
                cfg.context
            )));
        }
        let dr = dropout.as_deref_mut().map(|rng| Dropout {
            p: cfg.lora_dropout,
            rng,
        });
        let tape = forward(model, ad, &w[..w.len() - 1], dr)?;
        let (loss, dlogits) = window_loss(&tape.logits, &w[1..], cfg.vocab, Some(weight));
        total += loss;
        backward(
            model,
            ad,
            &tape,
            &dlogits.expect("gradient requested"),
            lora_grads.as_deref_mut(),
            base_grads.as_deref_mut(),
        );
    }
    Ok(total / count as f64)
}

/// Mean next-token cross-entropy of `batch` and its exact gradient with
/// respect to the adapters only. Each window is `(input ‖ last target)`.
pub fn loss_and_grads(
    model: &TinyLM,
    adapters: &LoraAdapterSet,
    batch: &[&[u32]],
    dropout: Option<&mut Rng>,
) -> Result<(f64, LoraParams)> {
    let mut grads = adapters.params().zeros_like();
    if !grads.same_shape(&LoraParams::zeros(model.config())) {
        return Err(Error::ShapeMismatch("adapters do not match the model".into()));
    }
    let loss = run_batch(model, Some(adapters.params()), batch, dropout, Some(&mut grads), None)?;
    Ok((loss, grads))
}

/// Runs `k_steps` optimiser steps on the adapters and returns
/// `(θ_before − Δθ, Δθ)` with `Δθ = θ_before − θ_after`.
#[allow(clippy::too_many_arguments)]
pub fn local_steps(
    model: &TinyLM,
    adapters: &LoraAdapterSet,
    optimizer: &mut SgdMomentum,
    shard: &Shard,
    k_steps: usize,
    config: &TrainingConfig,
    rng: &mut Rng,
) -> Result<(LoraAdapterSet, DeltaTheta)> {
    if config.batch_size == 0 || config.accum == 0 {
        return Err(Error::InvalidConfig("batch size and accumulation must be positive".into()));
    }
    let window = model.config().context + 1;
    let mut working = adapters.params().clone();
    for step in 0..k_steps {
        let mut grads = working.zeros_like();
        for _ in 0..config.accum {
            let batch: Vec<&[u32]> = (0..config.batch_size)
                .map(|_| shard.sample_window(rng, window))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::InvalidInput("training shard has no usable window".into()))?;
            let mut micro = working.zeros_like();
            let loss = run_batch(model, Some(&working), &batch, Some(rng), Some(&mut micro), None)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!("non-finite loss at local step {step}")));
            }
            grads.axpy(1.0 / config.accum as f64, &micro);
        }
        optimizer.step(&mut working, &grads, config.lr);
        if !working.is_finite() {
            return Err(Error::TrainingDiverged(format!("non-finite adapters at local step {step}")));
        }
    }
    let after = LoraAdapterSet::from_params(working);
    let delta = DeltaTheta::between(adapters, &after)?;
    let next = adapters.apply(&delta, 1.0)?;
    Ok((next, delta))
}

/// Mean next-token cross-entropy of `batch` for the bare base and its
/// gradient with respect to every base weight.
pub fn base_loss_and_grads(model: &TinyLM, batch: &[&[u32]]) -> Result<(f64, BaseParams)> {
    let mut grads = model.params().zeros_like();
    let loss = run_batch(model, None, batch, None, None, Some(&mut grads))?;
    Ok((loss, grads))
}

/// Trains every base weight with Adam on next-token prediction over
/// `pooled`, then freezes the result.
pub fn pretrain_base(config: &ModelConfig, pooled: &Shard, pretrain: &PretrainConfig) -> Result<TinyLM> {
    let model = TinyLM::random(config.clone(), pretrain.seed)?;
    if pretrain.steps == 0 {
        return Ok(model);
    }
    let (beta1, beta2, eps) = (0.9, 0.95, 1e-8);
    let mut params = model.params().clone();
    let mut m = params.zeros_like();
    let mut v = params.zeros_like();
    let mut rng = Rng::new(pretrain.seed, &[tag::PRETRAIN]);
    let window = config.context + 1;
    for step in 1..=pretrain.steps {
        let current = TinyLM::new(config.clone(), params.clone())?;
        let batch: Vec<&[u32]> = (0..pretrain.batch_size)
            .map(|_| pooled.sample_window(&mut rng, window))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::InvalidInput("pretraining corpus has no usable window".into()))?;
        let (loss, mut grads) = base_loss_and_grads(&current, &batch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!("non-finite loss at pretraining step {step}")));
        }
        let bc1 = 1.0 - math::pow(beta1, step as f64);
        let bc2 = 1.0 - math::pow(beta2, step as f64);
        for (((p, g), ms), vs) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices_mut())
            .zip(m.slices_mut())
            .zip(v.slices_mut())
        {
            for i in 0..p.len() {
                ms[i] = beta1 * ms[i] + (1.0 - beta1) * g[i];
                vs[i] = beta2 * vs[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= pretrain.lr * (ms[i] / bc1) / (math::sqrt(vs[i] / bc2) + eps);
            }
        }
    }
    TinyLM::new(config.clone(), params)
}
