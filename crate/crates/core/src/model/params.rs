use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;

use serde::{Deserialize, Serialize};

use super::tensor::Matrix;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// All base weights: embeddings, blocks, final norm and output head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseParams {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub head: Matrix,
}

/// A named view of one tensor.
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl BaseParams {
    /// GPT-2 style initialisation: N(0, 0.02²) weights, residual projections
    /// scaled by `1/√(2L)`, unit norm gains, zero biases.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let h = config.mlp_hidden;
        let resid_std = INIT_STD / math::sqrt(2.0 * config.layers as f64);
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                wq: Matrix::randn(d, d, INIT_STD, rng),
                bq: vec![0.0; d],
                wk: Matrix::randn(d, d, INIT_STD, rng),
                bk: vec![0.0; d],
                wv: Matrix::randn(d, d, INIT_STD, rng),
                bv: vec![0.0; d],
                wo: Matrix::randn(d, d, resid_std, rng),
                bo: vec![0.0; d],
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                w1: Matrix::randn(d, h, INIT_STD, rng),
                b1: vec![0.0; h],
                w2: Matrix::randn(h, d, resid_std, rng),
                b2: vec![0.0; d],
            })
            .collect();
        BaseParams {
            tok_emb: Matrix::randn(config.vocab, d, INIT_STD, rng),
            pos_emb: Matrix::randn(config.context, d, INIT_STD, rng),
            blocks,
            lnf_g: vec![1.0; d],
            lnf_b: vec![0.0; d],
            head: Matrix::randn(d, config.vocab, INIT_STD, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    /// Tensors in canonical order with stable names.
    pub fn named(&self) -> Vec<NamedTensor<'_>> {
        fn m(name: String, x: &Matrix) -> NamedTensor<'_> {
            NamedTensor {
                name,
                shape: vec![x.rows, x.cols],
                data: &x.data,
            }
        }
        fn v(name: String, x: &[f64]) -> NamedTensor<'_> {
            NamedTensor {
                name,
                shape: vec![x.len()],
                data: x,
            }
        }
        let mut out = vec![m("tok_emb".into(), &self.tok_emb), m("pos_emb".into(), &self.pos_emb)];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.extend([
                v(p("ln1.g"), &b.ln1_g),
                v(p("ln1.b"), &b.ln1_b),
                m(p("attn.q.w"), &b.wq),
                v(p("attn.q.b"), &b.bq),
                m(p("attn.k.w"), &b.wk),
                v(p("attn.k.b"), &b.bk),
                m(p("attn.v.w"), &b.wv),
                v(p("attn.v.b"), &b.bv),
                m(p("attn.o.w"), &b.wo),
                v(p("attn.o.b"), &b.bo),
                v(p("ln2.g"), &b.ln2_g),
                v(p("ln2.b"), &b.ln2_b),
                m(p("mlp.in.w"), &b.w1),
                v(p("mlp.in.b"), &b.b1),
                m(p("mlp.out.w"), &b.w2),
                v(p("mlp.out.b"), &b.b2),
            ]);
        }
        out.extend([
            v("lnf.g".into(), &self.lnf_g),
            v("lnf.b".into(), &self.lnf_b),
            m("head".into(), &self.head),
        ]);
        out
    }

    /// Mutable tensors in the same order as [`BaseParams::named`].
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.tok_emb.data, &mut self.pos_emb.data];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g[..],
                &mut b.ln1_b[..],
                &mut b.wq.data[..],
                &mut b.bq[..],
                &mut b.wk.data[..],
                &mut b.bk[..],
                &mut b.wv.data[..],
                &mut b.bv[..],
                &mut b.wo.data[..],
                &mut b.bo[..],
                &mut b.ln2_g[..],
                &mut b.ln2_b[..],
                &mut b.w1.data[..],
                &mut b.b1[..],
                &mut b.w2.data[..],
                &mut b.b2[..],
            ]);
        }
        out.extend([&mut self.lnf_g[..], &mut self.lnf_b[..], &mut self.head.data[..]]);
        out
    }

    /// Rebuilds parameters from `(name, shape, data)` triples, checking every
    /// name and shape against the layout implied by `config`.
    pub fn from_named(config: &ModelConfig, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut params = BaseParams::init(config, &mut Rng::new(0, &[]));
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} base tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, got_shape, data)) in
            params.slices_mut().into_iter().zip(expected).zip(tensors)
        {
            if &name != got_name || &shape != got_shape || data.len() != slot.len() {
                return Err(Error::ShapeMismatch(format!(
                    "expected tensor {name} {shape:?}, found {got_name} {got_shape:?}"
                )));
            }
            slot.copy_from_slice(data);
        }
        Ok(params)
    }
}

/// The frozen base model. There is no mutable access to its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyLM {
    config: ModelConfig,
    params: BaseParams,
}

impl TinyLM {
    pub fn new(config: ModelConfig, params: BaseParams) -> Result<Self> {
        config.validate()?;
        if params.blocks.len() != config.layers
            || params.tok_emb.rows != config.vocab
            || params.tok_emb.cols != config.d_model
            || params.pos_emb.rows != config.context
        {
            return Err(Error::ShapeMismatch("base parameters do not match config".into()));
        }
        Ok(TinyLM { config, params })
    }

    /// A randomly initialised base.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = BaseParams::init(&config, &mut Rng::new(seed, &[crate::rng::tag::BASE_INIT]));
        Ok(TinyLM { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BaseParams {
        &self.params
    }
}

/// One adapter pair `(A: m×r, B: r×n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

/// Values for every adapter pair of a model, in [`ModelConfig::sites`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraParams {
    pub pairs: Vec<LoraPair>,
}

impl LoraParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let r = config.lora_rank;
        LoraParams {
            pairs: config
                .sites()
                .iter()
                .map(|s| LoraPair {
                    a: Matrix::zeros(s.rows, r),
                    b: Matrix::zeros(r, s.cols),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LoraParams {
            pairs: self
                .pairs
                .iter()
                .map(|p| LoraPair {
                    a: Matrix::zeros(p.a.rows, p.a.cols),
                    b: Matrix::zeros(p.b.rows, p.b.cols),
                })
                .collect(),
        }
    }

    pub fn same_shape(&self, other: &LoraParams) -> bool {
        self.pairs.len() == other.pairs.len()
            && self
                .pairs
                .iter()
                .zip(&other.pairs)
                .all(|(x, y)| x.a.same_shape(&y.a) && x.b.same_shape(&y.b))
    }

    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.pairs.iter().flat_map(|p| [&p.a.data[..], &p.b.data[..]])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.pairs
            .iter_mut()
            .flat_map(|p| [&mut p.a.data[..], &mut p.b.data[..]])
    }

    pub fn num_params(&self) -> usize {
        self.slices().map(<[f64]>::len).sum()
    }

    /// All values concatenated as `A₀, B₀, A₁, B₁, ...`.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().flatten().copied().collect()
    }

    /// Elementwise `f(self, other)`; shapes must match.
    pub fn zip_map(&self, other: &LoraParams, f: impl Fn(f64, f64) -> f64) -> LoraParams {
        let mut out = self.clone();
        for (o, s) in out.slices_mut().zip(other.slices()) {
            for (x, y) in o.iter_mut().zip(s) {
                *x = f(*x, *y);
            }
        }
        out
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &LoraParams) {
        for (o, s) in self.slices_mut().zip(other.slices()) {
            for (x, y) in o.iter_mut().zip(s) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().flatten().all(|x| x.is_finite())
    }

    /// Inverse of [`LoraParams::sites_named`], checking names and shapes.
    pub fn from_named(config: &ModelConfig, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut params = LoraParams::zeros(config);
        let expected: Vec<(String, Vec<usize>)> = params
            .sites_named(config)
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} adapter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, got_shape, data)) in params.slices_mut().zip(expected).zip(tensors) {
            if &name != got_name || &shape != got_shape || data.len() != slot.len() {
                return Err(Error::ShapeMismatch(format!(
                    "expected tensor {name} {shape:?}, found {got_name} {got_shape:?}"
                )));
            }
            slot.copy_from_slice(data);
        }
        Ok(params)
    }

    pub fn sites_named(&self, config: &ModelConfig) -> Vec<(String, Vec<usize>, &[f64])> {
        config
            .sites()
            .iter()
            .zip(&self.pairs)
            .flat_map(|(s, p)| {
                let base = format!("lora.{}.{}", s.layer, s.kind.name());
                [
                    (format!("{base}.A"), vec![p.a.rows, p.a.cols], &p.a.data[..]),
                    (format!("{base}.B"), vec![p.b.rows, p.b.cols], &p.b.data[..]),
                ]
            })
            .collect()
    }
}

/// A client's trainable adapter weights θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapterSet(LoraParams);

impl LoraAdapterSet {
    /// `A ~ N(0, 0.02²)`, `B = 0`, so the initial update `A·B` is zero.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let mut p = LoraParams::zeros(config);
        for pair in &mut p.pairs {
            pair.a = Matrix::randn(pair.a.rows, pair.a.cols, INIT_STD, rng);
        }
        LoraAdapterSet(p)
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        LoraAdapterSet(LoraParams::zeros(config))
    }

    pub fn from_params(params: LoraParams) -> Self {
        LoraAdapterSet(params)
    }

    pub fn params(&self) -> &LoraParams {
        &self.0
    }

    pub fn params_mut(&mut self) -> &mut LoraParams {
        &mut self.0
    }

    /// `θ − η·Δ`.
    pub fn apply(&self, delta: &DeltaTheta, eta: f64) -> Result<LoraAdapterSet> {
        if !self.0.same_shape(&delta.0) {
            return Err(Error::IncompatibleDelta("delta shape differs from adapters".into()));
        }
        Ok(LoraAdapterSet(self.0.zip_map(&delta.0, |t, d| t - eta * d)))
    }
}

impl Deref for LoraAdapterSet {
    type Target = LoraParams;
    fn deref(&self) -> &LoraParams {
        &self.0
    }
}

/// A pseudo-update `θ_before − θ_after` over one communication interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTheta(LoraParams);

impl DeltaTheta {
    pub fn between(before: &LoraAdapterSet, after: &LoraAdapterSet) -> Result<Self> {
        if !before.0.same_shape(&after.0) {
            return Err(Error::IncompatibleDelta("adapter shapes differ".into()));
        }
        Ok(DeltaTheta(before.0.zip_map(&after.0, |b, a| b - a)))
    }

    pub fn zeros_like(params: &LoraParams) -> Self {
        DeltaTheta(params.zeros_like())
    }

    pub fn from_params(params: LoraParams) -> Self {
        DeltaTheta(params)
    }

    pub fn params(&self) -> &LoraParams {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.slices().flatten().all(|x| *x == 0.0)
    }
}

impl Deref for DeltaTheta {
    type Target = LoraParams;
    fn deref(&self) -> &LoraParams {
        &self.0
    }
}
