//! Forward and backward passes of the pre-norm transformer.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::{BaseParams, LoraAdapterSet, LoraPair, LoraParams, TinyLM};
use super::tensor::{col_sum_acc, dot, matmul, matmul_t_acc, outer_acc, Matrix};
use super::{ModelConfig, SiteKind};
use crate::corpus::Shard;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Pre-softmax scores, one row of `vocab` entries per scored position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsBlock {
    pub positions: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl LogitsBlock {
    pub fn row(&self, p: usize) -> &[f64] {
        &self.data[p * self.vocab..(p + 1) * self.vocab]
    }
}

/// Index of an adapted projection in [`ModelConfig::sites`] order.
pub(crate) fn site_index(config: &ModelConfig, layer: usize, kind: SiteKind) -> Option<usize> {
    let attn = if config.adapt.attention { 4 } else { 0 };
    let mlp = if config.adapt.mlp { 2 } else { 0 };
    let base = layer * (attn + mlp);
    match kind {
        SiteKind::Query | SiteKind::Key | SiteKind::Value | SiteKind::Output if attn > 0 => {
            let off = match kind {
                SiteKind::Query => 0,
                SiteKind::Key => 1,
                SiteKind::Value => 2,
                _ => 3,
            };
            Some(base + off)
        }
        SiteKind::MlpIn if mlp > 0 => Some(base + attn),
        SiteKind::MlpOut if mlp > 0 => Some(base + attn + 1),
        _ => None,
    }
}

#[derive(Clone, Copy)]
pub(crate) struct Adapters<'a> {
    pub params: &'a LoraParams,
    pub scale: f64,
}

impl<'a> Adapters<'a> {
    fn pair(&self, config: &ModelConfig, layer: usize, kind: SiteKind) -> Option<(&'a LoraPair, f64)> {
        site_index(config, layer, kind).map(|i| (&self.params.pairs[i], self.scale))
    }
}

pub(crate) struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut Rng,
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

struct LinCache {
    /// Inverted-dropout factors on the adapter input (`None` when dropout is off).
    mask: Option<Vec<f64>>,
    /// `drop(x) · A`.
    z: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    cq: Option<LinCache>,
    ck: Option<LinCache>,
    cv: Option<LinCache>,
    probs: Vec<f64>,
    att: Vec<f64>,
    co: Option<LinCache>,
    ln2: LnCache,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    c1: Option<LinCache>,
    c2: Option<LinCache>,
}

/// Activations kept for the backward pass.
pub(crate) struct Tape {
    t: usize,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    hf: Vec<f64>,
    pub logits: Vec<f64>,
}

fn ln_fwd(x: &[f64], d: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, LnCache) {
    let t = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; t];
    for r in 0..t {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / math::sqrt(var + LN_EPS);
        rstd[r] = rs;
        for c in 0..d {
            let xh = (xr[c] - mean) * rs;
            xhat[r * d + c] = xh;
            y[r * d + c] = g[c] * xh + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn ln_bwd(dy: &[f64], cache: &LnCache, g: &[f64], grads: Option<(&mut [f64], &mut [f64])>) -> Vec<f64> {
    let d = g.len();
    let t = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    if let Some((dg, db)) = grads {
        for r in 0..t {
            for c in 0..d {
                dg[c] += dy[r * d + c] * cache.xhat[r * d + c];
                db[c] += dy[r * d + c];
            }
        }
    }
    for r in 0..t {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let dxhat: Vec<f64> = (0..d).map(|c| dy[r * d + c] * g[c]).collect();
        let m1 = dxhat.iter().sum::<f64>() / d as f64;
        let m2 = dot(&dxhat, xh) / d as f64;
        for c in 0..d {
            dx[r * d + c] = cache.rstd[r] * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
    dx
}

fn lin_fwd(
    x: &[f64],
    t: usize,
    w: &Matrix,
    bias: &[f64],
    lora: Option<(&LoraPair, f64)>,
    dropout: &mut Option<Dropout<'_>>,
) -> (Vec<f64>, Option<LinCache>) {
    let mut y = matmul(x, t, w, Some(bias));
    let cache = lora.map(|(pair, scale)| {
        let mask = dropout.as_mut().filter(|d| d.p > 0.0).map(|d| {
            let keep = 1.0 / (1.0 - d.p);
            (0..x.len())
                .map(|_| if d.rng.uniform() < d.p { 0.0 } else { keep })
                .collect::<Vec<f64>>()
        });
        let z = match &mask {
            Some(m) => {
                let xd: Vec<f64> = x.iter().zip(m).map(|(a, b)| a * b).collect();
                matmul(&xd, t, &pair.a, None)
            }
            None => matmul(x, t, &pair.a, None),
        };
        let zb = matmul(&z, t, &pair.b, None);
        for (yv, u) in y.iter_mut().zip(&zb) {
            *yv += scale * u;
        }
        LinCache { mask, z }
    });
    (y, cache)
}

struct LinGrads<'a> {
    lora: Option<&'a mut LoraPair>,
    base: Option<(&'a mut Matrix, &'a mut [f64])>,
}

#[allow(clippy::too_many_arguments)]
fn lin_bwd(
    dy: &[f64],
    x: &[f64],
    t: usize,
    w: &Matrix,
    lora: Option<(&LoraPair, f64)>,
    cache: Option<&LinCache>,
    need_dx: bool,
    grads: LinGrads<'_>,
) -> Option<Vec<f64>> {
    if let Some((dw, db)) = grads.base {
        outer_acc(x, dy, t, dw);
        col_sum_acc(dy, w.cols, db);
    }
    let mut dx = need_dx.then(|| {
        let mut dx = vec![0.0; t * w.rows];
        matmul_t_acc(dy, t, w, &mut dx);
        dx
    });
    if let (Some((pair, scale)), Some(cache)) = (lora, cache) {
        let r = pair.a.cols;
        // dz = scale · dy · Bᵀ
        let mut dz = vec![0.0; t * r];
        matmul_t_acc(dy, t, &pair.b, &mut dz);
        dz.iter_mut().for_each(|v| *v *= scale);
        if let Some(g) = grads.lora {
            let mut dyb = dy.to_vec();
            dyb.iter_mut().for_each(|v| *v *= scale);
            outer_acc(&cache.z, &dyb, t, &mut g.b);
            match &cache.mask {
                Some(m) => {
                    let xd: Vec<f64> = x.iter().zip(m).map(|(a, b)| a * b).collect();
                    outer_acc(&xd, &dz, t, &mut g.a);
                }
                None => outer_acc(x, &dz, t, &mut g.a),
            }
        }
        if let Some(dx) = dx.as_mut() {
            let mut dxd = vec![0.0; t * w.rows];
            matmul_t_acc(&dz, t, &pair.a, &mut dxd);
            match &cache.mask {
                Some(m) => dx.iter_mut().zip(dxd.iter().zip(m)).for_each(|(d, (a, b))| *d += a * b),
                None => dx.iter_mut().zip(&dxd).for_each(|(d, a)| *d += a),
            }
        }
    }
    dx
}

fn attn_fwd(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let hd = d / heads;
    let inv = 1.0 / math::sqrt(hd as f64);
    let mut probs = vec![0.0; heads * t * t];
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let qi = &q[i * d + off..i * d + off + hd];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let s = dot(qi, &k[j * d + off..j * d + off + hd]) * inv;
                p[j] = s;
                max = max.max(s);
            }
            let mut sum = 0.0;
            for pj in p.iter_mut().take(i + 1) {
                *pj = math::exp(*pj - max);
                sum += *pj;
            }
            let o = &mut out[i * d + off..i * d + off + hd];
            for j in 0..=i {
                p[j] /= sum;
                let vj = &v[j * d + off..j * d + off + hd];
                for (oc, vc) in o.iter_mut().zip(vj) {
                    *oc += p[j] * vc;
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attn_bwd(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    t: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hd = d / heads;
    let inv = 1.0 / math::sqrt(hd as f64);
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..t {
            let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
            let doi = &dout[i * d + off..i * d + off + hd];
            let mut acc = 0.0;
            for j in 0..=i {
                dp[j] = dot(doi, &v[j * d + off..j * d + off + hd]);
                acc += p[j] * dp[j];
                for (dvc, doc) in dv[j * d + off..j * d + off + hd].iter_mut().zip(doi) {
                    *dvc += p[j] * doc;
                }
            }
            for j in 0..=i {
                let ds = p[j] * (dp[j] - acc) * inv;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..hd {
                    dq[i * d + off + c] += ds * k[j * d + off + c];
                    dk[j * d + off + c] += ds * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + math::tanh(GELU_C * (u + 0.044_715 * u * u * u)))
}

fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + 0.044_715 * u * u * u);
    let th = math::tanh(inner);
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044_715 * u * u)
}

pub(crate) fn check_tokens(tokens: &[u32], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t as usize >= vocab) {
        Some(&token) => Err(Error::OutOfVocab { token, vocab }),
        None => Ok(()),
    }
}

/// Runs one window of at most `context` tokens and records the activations.
pub(crate) fn forward(
    model: &TinyLM,
    adapters: Option<Adapters<'_>>,
    tokens: &[u32],
    mut dropout: Option<Dropout<'_>>,
) -> Result<Tape> {
    let cfg = model.config();
    let p = model.params();
    check_tokens(tokens, cfg.vocab)?;
    let t = tokens.len();
    if t == 0 || t > cfg.context {
        return Err(Error::InvalidInput("window length must be in 1..=context".into()));
    }
    let d = cfg.d_model;
    let mut x = vec![0.0; t * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let e = p.tok_emb.row(tok as usize);
        let pe = p.pos_emb.row(i);
        for c in 0..d {
            x[i * d + c] = e[c] + pe[c];
        }
    }
    let lora = |layer, kind| adapters.and_then(|a| a.pair(cfg, layer, kind));
    let mut blocks = Vec::with_capacity(cfg.layers);
    for (l, bp) in p.blocks.iter().enumerate() {
        let (h1, ln1) = ln_fwd(&x, d, &bp.ln1_g, &bp.ln1_b);
        let (q, cq) = lin_fwd(&h1, t, &bp.wq, &bp.bq, lora(l, SiteKind::Query), &mut dropout);
        let (k, ck) = lin_fwd(&h1, t, &bp.wk, &bp.bk, lora(l, SiteKind::Key), &mut dropout);
        let (v, cv) = lin_fwd(&h1, t, &bp.wv, &bp.bv, lora(l, SiteKind::Value), &mut dropout);
        let (att, probs) = attn_fwd(&q, &k, &v, t, d, cfg.heads);
        let (o, co) = lin_fwd(&att, t, &bp.wo, &bp.bo, lora(l, SiteKind::Output), &mut dropout);
        x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
        let (h2, ln2) = ln_fwd(&x, d, &bp.ln2_g, &bp.ln2_b);
        let (u, c1) = lin_fwd(&h2, t, &bp.w1, &bp.b1, lora(l, SiteKind::MlpIn), &mut dropout);
        let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let (m, c2) = lin_fwd(&g, t, &bp.w2, &bp.b2, lora(l, SiteKind::MlpOut), &mut dropout);
        x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
        blocks.push(BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            cq,
            ck,
            cv,
            probs,
            att,
            co,
            ln2,
            h2,
            u,
            g,
            c1,
            c2,
        });
    }
    let (hf, lnf) = ln_fwd(&x, d, &p.lnf_g, &p.lnf_b);
    let logits = matmul(&hf, t, &p.head, None);
    Ok(Tape {
        t,
        tokens: tokens.to_vec(),
        blocks,
        lnf,
        hf,
        logits,
    })
}

/// Back-propagates `dlogits` through a recorded window, accumulating adapter
/// gradients into `lora_grads` and, when given, base gradients into `base_grads`.
pub(crate) fn backward(
    model: &TinyLM,
    adapters: Option<Adapters<'_>>,
    tape: &Tape,
    dlogits: &[f64],
    mut lora_grads: Option<&mut LoraParams>,
    mut base_grads: Option<&mut BaseParams>,
) {
    let cfg = model.config();
    let p = model.params();
    let (t, d) = (tape.t, cfg.d_model);
    let lora = |layer, kind| adapters.and_then(|a| a.pair(cfg, layer, kind));
    let idx = |layer, kind| site_index(cfg, layer, kind);

    let mut dhf = vec![0.0; t * d];
    matmul_t_acc(dlogits, t, &p.head, &mut dhf);
    if let Some(bg) = base_grads.as_deref_mut() {
        outer_acc(&tape.hf, dlogits, t, &mut bg.head);
    }
    let mut dx = ln_bwd(
        &dhf,
        &tape.lnf,
        &p.lnf_g,
        base_grads.as_deref_mut().map(|bg| (&mut bg.lnf_g[..], &mut bg.lnf_b[..])),
    );

    macro_rules! grads {
        ($layer:expr, $kind:expr, $w:ident, $b:ident) => {
            LinGrads {
                lora: match (lora_grads.as_deref_mut(), idx($layer, $kind)) {
                    (Some(g), Some(i)) if adapters.is_some() => Some(&mut g.pairs[i]),
                    _ => None,
                },
                base: base_grads
                    .as_deref_mut()
                    .map(|bg| {
                        let b = &mut bg.blocks[$layer];
                        (&mut b.$w, &mut b.$b[..])
                    }),
            }
        };
    }

    for l in (0..cfg.layers).rev() {
        let bp = &p.blocks[l];
        let bc = &tape.blocks[l];
        // MLP branch.
        let dg = lin_bwd(&dx, &bc.g, t, &bp.w2, lora(l, SiteKind::MlpOut), bc.c2.as_ref(), true, grads!(l, SiteKind::MlpOut, w2, b2))
            .expect("dx requested");
        let du: Vec<f64> = dg.iter().zip(&bc.u).map(|(g, &u)| g * gelu_grad(u)).collect();
        let dh2 = lin_bwd(&du, &bc.h2, t, &bp.w1, lora(l, SiteKind::MlpIn), bc.c1.as_ref(), true, grads!(l, SiteKind::MlpIn, w1, b1))
            .expect("dx requested");
        let dln2 = ln_bwd(
            &dh2,
            &bc.ln2,
            &bp.ln2_g,
            base_grads
                .as_deref_mut()
                .map(|bg| {
                    let b = &mut bg.blocks[l];
                    (&mut b.ln2_g[..], &mut b.ln2_b[..])
                }),
        );
        dx.iter_mut().zip(&dln2).for_each(|(a, b)| *a += b);
        // Attention branch.
        let datt = lin_bwd(&dx, &bc.att, t, &bp.wo, lora(l, SiteKind::Output), bc.co.as_ref(), true, grads!(l, SiteKind::Output, wo, bo))
            .expect("dx requested");
        let (dq, dk, dv) = attn_bwd(&datt, &bc.q, &bc.k, &bc.v, &bc.probs, t, d, cfg.heads);
        // The first block's input gradient only feeds the frozen embeddings.
        let need_dx = l > 0 || base_grads.is_some();
        let mut dh1 = vec![0.0; t * d];
        for (dy, kind, cache) in [
            (&dq, SiteKind::Query, bc.cq.as_ref()),
            (&dk, SiteKind::Key, bc.ck.as_ref()),
            (&dv, SiteKind::Value, bc.cv.as_ref()),
        ] {
            let (w, grads) = match kind {
                SiteKind::Query => (&bp.wq, grads!(l, kind, wq, bq)),
                SiteKind::Key => (&bp.wk, grads!(l, kind, wk, bk)),
                _ => (&bp.wv, grads!(l, kind, wv, bv)),
            };
            if let Some(part) = lin_bwd(dy, &bc.h1, t, w, lora(l, kind), cache, need_dx, grads) {
                dh1.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
            }
        }
        if need_dx {
            let dln1 = ln_bwd(
                &dh1,
                &bc.ln1,
                &bp.ln1_g,
                base_grads
                    .as_deref_mut()
                    .map(|bg| {
                    let b = &mut bg.blocks[l];
                    (&mut b.ln1_g[..], &mut b.ln1_b[..])
                }),
            );
            dx.iter_mut().zip(&dln1).for_each(|(a, b)| *a += b);
        }
    }
    if let Some(bg) = base_grads {
        for (i, &tok) in tape.tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            for c in 0..d {
                bg.tok_emb.data[tok as usize * d + c] += row[c];
                bg.pos_emb.data[i * d + c] += row[c];
            }
        }
    }
}

/// Sum of next-token cross-entropy over a window's targets, and optionally
/// `weight · (softmax − onehot)` as the logits gradient.
pub(crate) fn window_loss(logits: &[f64], targets: &[u32], vocab: usize, grad_weight: Option<f64>) -> (f64, Option<Vec<f64>>) {
    let mut total = 0.0;
    let mut dlogits = grad_weight.map(|_| vec![0.0; logits.len()]);
    for (r, &target) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let lse = math::log_sum_exp(row);
        total += lse - row[target as usize];
        if let (Some(dl), Some(w)) = (dlogits.as_mut(), grad_weight) {
            let drow = &mut dl[r * vocab..(r + 1) * vocab];
            for (g, &z) in drow.iter_mut().zip(row) {
                *g = w * math::exp(z - lse);
            }
            drow[target as usize] -= w;
        }
    }
    (total, dlogits)
}

fn adapters_of<'a>(model: &TinyLM, adapters: Option<&'a LoraAdapterSet>) -> Result<Option<Adapters<'a>>> {
    match adapters {
        Some(a) => {
            let expected = LoraParams::zeros(model.config());
            if !a.params().same_shape(&expected) {
                return Err(Error::ShapeMismatch("adapters do not match the model".into()));
            }
            Ok(Some(Adapters {
                params: a.params(),
                scale: model.config().lora_scale(),
            }))
        }
        None => Ok(None),
    }
}

/// Logits for every position of `tokens`, processed in independent chunks of
/// `context` tokens. Dropout on the adapter path is applied only when a
/// random stream is supplied.
pub fn forward_logits(
    model: &TinyLM,
    adapters: &LoraAdapterSet,
    tokens: &[u32],
    dropout: Option<&mut Rng>,
) -> Result<LogitsBlock> {
    let ad = adapters_of(model, Some(adapters))?;
    let cfg = model.config();
    check_tokens(tokens, cfg.vocab)?;
    let mut data = Vec::with_capacity(tokens.len() * cfg.vocab);
    let mut dropout = dropout;
    for chunk in tokens.chunks(cfg.context) {
        let dr = dropout.as_deref_mut().map(|rng| Dropout {
            p: cfg.lora_dropout,
            rng,
        });
        data.extend(forward(model, ad, chunk, dr)?.logits);
    }
    Ok(LogitsBlock {
        positions: tokens.len(),
        vocab: cfg.vocab,
        data,
    })
}

/// Logits of the bare base, dropout-free, chunked like [`forward_logits`].
pub fn base_logits(model: &TinyLM, tokens: &[u32]) -> Result<LogitsBlock> {
    let cfg = model.config();
    check_tokens(tokens, cfg.vocab)?;
    let mut data = Vec::with_capacity(tokens.len() * cfg.vocab);
    for chunk in tokens.chunks(cfg.context) {
        data.extend(forward(model, None, chunk, None)?.logits);
    }
    Ok(LogitsBlock {
        positions: tokens.len(),
        vocab: cfg.vocab,
        data,
    })
}

/// Dropout-free logits for every token of every piece of `shard`.
pub fn shard_logits(model: &TinyLM, adapters: &LoraAdapterSet, shard: &Shard) -> Result<LogitsBlock> {
    let mut out = LogitsBlock {
        positions: 0,
        vocab: model.config().vocab,
        data: Vec::new(),
    };
    for piece in &shard.pieces {
        let b = forward_logits(model, adapters, &piece.tokens, None)?;
        out.positions += b.positions;
        out.data.extend(b.data);
    }
    Ok(out)
}

/// Mean next-token cross-entropy over `shard`, dropout off. `None` adapters
/// evaluate the bare base.
pub fn mean_cross_entropy(model: &TinyLM, adapters: Option<&LoraAdapterSet>, shard: &Shard) -> Result<f64> {
    let ad = adapters_of(model, adapters)?;
    let cfg = model.config();
    let windows = shard.eval_windows(cfg.context + 1);
    if windows.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty shard".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        let tape = forward(model, ad, &w[..w.len() - 1], None)?;
        total += window_loss(&tape.logits, &w[1..], cfg.vocab, None).0;
        count += w.len() - 1;
    }
    Ok(total / count as f64)
}

/// `exp` of the mean cross-entropy over `shard`.
pub fn perplexity(model: &TinyLM, adapters: Option<&LoraAdapterSet>, shard: &Shard) -> Result<f64> {
    mean_cross_entropy(model, adapters, shard).map(math::exp)
}
