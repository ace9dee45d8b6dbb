//! Trust matrices: who aggregates whose updates, and by how much.
//!
//! Each learned strategy first builds a pre-normalisation score matrix `W̃`
//! and then takes a row softmax:
//!
//! * weight similarity: `W̃ᵢⱼ = cos(θᵢ, θⱼ)`, `W = softmax(W̃ / τ)`;
//! * validation loss: `W̃ᵢⱼ = CE(model j on val set of i)`, `W = softmax(−W̃ / τ)`;
//! * prediction similarity: `W̃ᵢⱼ = mean |f_θᵢ(X_S) − f_θⱼ(X_S)|`, `W = softmax(−W̃ / τ)`.
//!
//! The oracle row-normalises mixture dot products instead. Row sums use an
//! order-independent summation, which makes every strategy exactly
//! permutation equivariant.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{MixtureVector, Shard};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::math;
use crate::model::{mean_cross_entropy, LogitsBlock, LoraAdapterSet, TinyLM};

/// Tolerance on row sums of every produced matrix.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustSource {
    WeightSimilarity,
    Validation,
    Prediction,
    Oracle,
    Uniform,
    Identity,
    Custom,
}

/// A row-stochastic `N×N` aggregation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustMatrix {
    n: usize,
    w: Vec<f64>,
    pub source: TrustSource,
    pub round: usize,
}

impl TrustMatrix {
    /// Validates nonnegativity, finiteness and unit row sums.
    pub fn from_rows(n: usize, w: Vec<f64>, source: TrustSource) -> Result<Self> {
        if n == 0 || w.len() != n * n {
            return Err(Error::ShapeMismatch(format!("{} entries for a {n}×{n} matrix", w.len())));
        }
        for (i, row) in w.chunks_exact(n).enumerate() {
            if row.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::InvalidInput(format!("row {i} has negative or non-finite entries")));
            }
            let s = math::order_free_sum(row);
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!("row {i} sums to {s}")));
            }
        }
        Ok(TrustMatrix { n, w, source, round: 0 })
    }

    pub fn identity(n: usize) -> Self {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        TrustMatrix {
            n,
            w,
            source: TrustSource::Identity,
            round: 0,
        }
    }

    pub fn with_round(mut self, round: usize) -> Self {
        self.round = round;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.n..(i + 1) * self.n]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }
}

fn softmax_rows(scores: &[f64], n: usize, sign: f64, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidConfig("softmax temperature must be positive".into()));
    }
    Ok(scores
        .chunks_exact(n)
        .flat_map(|row| {
            let signed: Vec<f64> = row.iter().map(|s| sign * s).collect();
            math::softmax(&signed, temperature)
        })
        .collect())
}

/// Pairwise cosine similarities of flattened adapter vectors, diagonal included.
pub fn weight_similarity_scores(thetas: &[&[f64]]) -> Result<Vec<f64>> {
    let n = thetas.len();
    let len = thetas.first().map(|t| t.len()).unwrap_or(0);
    if n == 0 || thetas.iter().any(|t| t.len() != len) {
        return Err(Error::ShapeMismatch("adapter vectors differ in length".into()));
    }
    let norms: Vec<f64> = thetas.iter().map(|t| math::sqrt(t.iter().map(|x| x * x).sum())).collect();
    if let Some(client) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::DegenerateWeights { client });
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d: f64 = thetas[i].iter().zip(thetas[j]).map(|(a, b)| a * b).sum();
            let c = d / (norms[i] * norms[j]);
            s[i * n + j] = c;
            s[j * n + i] = c;
        }
    }
    Ok(s)
}

/// Weight-similarity trust: row softmax of cosine similarities.
pub fn trust_weight_similarity(thetas: &[&[f64]], temperature: f64) -> Result<TrustMatrix> {
    let n = thetas.len();
    let scores = weight_similarity_scores(thetas)?;
    TrustMatrix::from_rows(n, softmax_rows(&scores, n, 1.0, temperature)?, TrustSource::WeightSimilarity)
}

/// Validation-loss trust from a precomputed loss matrix, `losses[i·N + j]`
/// being model `j` evaluated on the validation set of client `i`.
pub fn trust_from_losses(losses: &[f64], n: usize, temperature: f64) -> Result<TrustMatrix> {
    if losses.len() != n * n {
        return Err(Error::ShapeMismatch("loss matrix is not N×N".into()));
    }
    TrustMatrix::from_rows(n, softmax_rows(losses, n, -1.0, temperature)?, TrustSource::Validation)
}

/// The `N²` cross-entropies behind validation-loss trust.
pub fn validation_losses<E: Executor>(
    model: &TinyLM,
    adapters: &[&LoraAdapterSet],
    val_shards: &[&Shard],
    exec: &E,
) -> Result<Vec<f64>> {
    let n = adapters.len();
    if val_shards.len() != n {
        return Err(Error::ShapeMismatch("one validation shard per client required".into()));
    }
    if let Some(i) = val_shards.iter().position(|s| s.is_empty()) {
        return Err(Error::InvalidInput(format!("client {i} has an empty validation shard")));
    }
    exec.map_range(n * n, |idx| {
        let (i, j) = (idx / n, idx % n);
        mean_cross_entropy(model, Some(adapters[j]), val_shards[i])
    })
    .into_iter()
    .collect()
}

/// Validation-loss trust: row softmax of negated cross-entropies.
pub fn trust_validation<E: Executor>(
    model: &TinyLM,
    adapters: &[&LoraAdapterSet],
    val_shards: &[&Shard],
    temperature: f64,
    exec: &E,
) -> Result<TrustMatrix> {
    let losses = validation_losses(model, adapters, val_shards, exec)?;
    trust_from_losses(&losses, adapters.len(), temperature)
}

/// One coordinate-list entry of sparsified logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CooEntry {
    pub position: u32,
    pub token: u32,
    pub value: f64,
}

/// The `K` largest logits of every position, stored per position in
/// ascending token order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseLogits {
    pub positions: usize,
    pub vocab: usize,
    pub k: usize,
    pub entries: Vec<CooEntry>,
}

impl SparseLogits {
    pub fn row(&self, p: usize) -> &[CooEntry] {
        &self.entries[p * self.k..(p + 1) * self.k]
    }
}

/// Keeps the `k` largest logits per position; ties go to the lower token id.
pub fn sparsify_topk(block: &LogitsBlock, k: usize) -> Result<SparseLogits> {
    if k == 0 || k > block.vocab {
        return Err(Error::InvalidInput(format!("top-k {k} outside 1..={}", block.vocab)));
    }
    let mut entries = Vec::with_capacity(block.positions * k);
    let mut ids: Vec<u32> = Vec::with_capacity(block.vocab);
    for p in 0..block.positions {
        let row = block.row(p);
        ids.clear();
        ids.extend(0..block.vocab as u32);
        ids.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
        let mut kept: Vec<u32> = ids[..k].to_vec();
        kept.sort_unstable();
        entries.extend(kept.into_iter().map(|token| CooEntry {
            position: p as u32,
            token,
            value: row[token as usize],
        }));
    }
    Ok(SparseLogits {
        positions: block.positions,
        vocab: block.vocab,
        k,
        entries,
    })
}

/// Logits as communicated for prediction-similarity trust.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogitsPayload {
    Dense(LogitsBlock),
    Sparse(SparseLogits),
}

impl LogitsPayload {
    pub fn positions(&self) -> usize {
        match self {
            LogitsPayload::Dense(b) => b.positions,
            LogitsPayload::Sparse(s) => s.positions,
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            LogitsPayload::Dense(b) => b.vocab,
            LogitsPayload::Sparse(s) => s.vocab,
        }
    }

    fn row(&self, p: usize) -> RowIter<'_> {
        match self {
            LogitsPayload::Dense(b) => RowIter::Dense(b.row(p).iter().enumerate()),
            LogitsPayload::Sparse(s) => RowIter::Sparse(s.row(p).iter()),
        }
    }
}

enum RowIter<'a> {
    Dense(core::iter::Enumerate<core::slice::Iter<'a, f64>>),
    Sparse(core::slice::Iter<'a, CooEntry>),
}

impl Iterator for RowIter<'_> {
    type Item = (u32, f64);
    fn next(&mut self) -> Option<(u32, f64)> {
        match self {
            RowIter::Dense(it) => it.next().map(|(i, v)| (i as u32, *v)),
            RowIter::Sparse(it) => it.next().map(|e| (e.token, e.value)),
        }
    }
}

/// Accumulates `|a − b|` over the union of two id-sorted supports, absent
/// entries counting as zero.
fn merged_l1(a: RowIter<'_>, b: RowIter<'_>, acc: &mut f64) {
    let mut a = a.peekable();
    let mut b = b.peekable();
    loop {
        match (a.peek().copied(), b.peek().copied()) {
            (Some((ia, va)), Some((ib, vb))) => {
                if ia == ib {
                    *acc += (va - vb).abs();
                    a.next();
                    b.next();
                } else if ia < ib {
                    *acc += va.abs();
                    a.next();
                } else {
                    *acc += vb.abs();
                    b.next();
                }
            }
            (Some((_, va)), None) => {
                *acc += va.abs();
                a.next();
            }
            (None, Some((_, vb))) => {
                *acc += vb.abs();
                b.next();
            }
            (None, None) => break,
        }
    }
}

/// Mean absolute logit difference between every pair of clients, over all
/// `positions × vocab` entries. Symmetric with a zero diagonal.
pub fn prediction_distances(payloads: &[LogitsPayload]) -> Result<Vec<f64>> {
    let n = payloads.len();
    let first = payloads
        .first()
        .ok_or_else(|| Error::IncompatibleLogits("no logits supplied".into()))?;
    let (positions, vocab) = (first.positions(), first.vocab());
    if positions == 0 {
        return Err(Error::IncompatibleLogits("logits cover no positions".into()));
    }
    if payloads.iter().any(|p| p.positions() != positions || p.vocab() != vocab) {
        return Err(Error::IncompatibleLogits(
            "clients scored different position or vocabulary counts".into(),
        ));
    }
    let denom = (positions * vocab) as f64;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let mut acc = 0.0;
            for p in 0..positions {
                merged_l1(payloads[i].row(p), payloads[j].row(p), &mut acc);
            }
            d[i * n + j] = acc / denom;
            d[j * n + i] = acc / denom;
        }
    }
    Ok(d)
}

/// Prediction-similarity trust: row softmax of negated logit distances.
pub fn trust_prediction(payloads: &[LogitsPayload], temperature: f64) -> Result<TrustMatrix> {
    let n = payloads.len();
    let d = prediction_distances(payloads)?;
    TrustMatrix::from_rows(n, softmax_rows(&d, n, -1.0, temperature)?, TrustSource::Prediction)
}

/// Mixture dot products, self included.
pub fn oracle_scores(mixtures: &[MixtureVector]) -> Vec<f64> {
    let n = mixtures.len();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = mixtures[i].dot(&mixtures[j]);
        }
    }
    s
}

fn normalise_rows(n: usize, mut w: Vec<f64>, source: TrustSource) -> Result<TrustMatrix> {
    for (row, chunk) in w.chunks_exact_mut(n).enumerate() {
        let s = math::order_free_sum(chunk);
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::DegenerateRow { row });
        }
        chunk.iter_mut().for_each(|x| *x /= s);
    }
    TrustMatrix::from_rows(n, w, source)
}

/// Oracle trust: mixture dot products divided by their row sums (no softmax).
pub fn trust_oracle(mixtures: &[MixtureVector]) -> Result<TrustMatrix> {
    if mixtures.is_empty() {
        return Err(Error::InvalidInput("no mixtures".into()));
    }
    normalise_rows(mixtures.len(), oracle_scores(mixtures), TrustSource::Oracle)
}

/// Every entry `1/n`.
pub fn trust_uniform(n: usize) -> TrustMatrix {
    TrustMatrix {
        n,
        w: vec![1.0 / n as f64; n * n],
        source: TrustSource::Uniform,
        round: 0,
    }
}

/// Directed communication graph; `allows(i, j)` means client `i` may use
/// client `j`'s messages. Self edges are always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyMask {
    n: usize,
    adj: Vec<bool>,
}

impl TopologyMask {
    pub fn full(n: usize) -> Self {
        TopologyMask {
            n,
            adj: vec![true; n * n],
        }
    }

    /// Each client hears itself and its two cycle neighbours.
    pub fn ring(n: usize) -> Self {
        let mut adj = vec![false; n * n];
        for i in 0..n {
            adj[i * n + i] = true;
            adj[i * n + (i + 1) % n] = true;
            adj[i * n + (i + n - 1) % n] = true;
        }
        TopologyMask { n, adj }
    }

    /// Builds a mask from rows of flags, rejecting missing self edges and
    /// graphs that are not strongly connected.
    pub fn from_adjacency(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("adjacency must be square and nonempty".into()));
        }
        if (0..n).any(|i| !rows[i][i]) {
            return Err(Error::InvalidInput("topology must contain every self edge".into()));
        }
        let mask = TopologyMask {
            n,
            adj: rows.iter().flatten().copied().collect(),
        };
        if !mask.strongly_connected() {
            return Err(Error::NotStronglyConnected);
        }
        Ok(mask)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    /// Number of other clients that use client `j`'s messages.
    pub fn recipients(&self, j: usize) -> usize {
        (0..self.n).filter(|&i| i != j && self.allows(i, j)).count()
    }

    fn reaches_all(&self, forward: bool) -> bool {
        let n = self.n;
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                let edge = if forward { self.allows(u, v) } else { self.allows(v, u) };
                if edge && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn strongly_connected(&self) -> bool {
        self.n > 0 && self.reaches_all(true) && self.reaches_all(false)
    }
}

/// Zeroes entries outside the mask and renormalises each row.
pub fn apply_topology(w: &TrustMatrix, mask: &TopologyMask) -> Result<TrustMatrix> {
    if w.n != mask.n {
        return Err(Error::ShapeMismatch("trust matrix and topology differ in size".into()));
    }
    let n = w.n;
    let masked: Vec<f64> = w
        .w
        .iter()
        .enumerate()
        .map(|(idx, &x)| if mask.adj[idx] { x } else { 0.0 })
        .collect();
    Ok(normalise_rows(n, masked, w.source)?.with_round(w.round))
}

/// `Σᵢⱼ |aᵢⱼ − bᵢⱼ|` between consecutive trust matrices.
pub fn trust_drift_l1(current: &TrustMatrix, previous: &TrustMatrix) -> Result<f64> {
    if current.n != previous.n {
        return Err(Error::ShapeMismatch("trust matrices differ in size".into()));
    }
    Ok(current.w.iter().zip(&previous.w).map(|(a, b)| (a - b).abs()).sum())
}
