//! Synthetic category corpora, client partitioning and the shared public set.
//!
//! Every category draws tokens from one global vocabulary laid out as a
//! shared block followed by one private block per category. Tokens follow a
//! first-order chain: the next token comes from the private block with
//! probability `private_mass` (else the shared block), and within a block its
//! rank is Zipf distributed under either the category-wide ordering or an
//! ordering specific to the previous token.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{derive_seed, tag, Rng};

/// A contiguous range of token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBlock {
    pub start: u32,
    pub len: u32,
}

impl TokenBlock {
    pub fn new(start: u32, len: u32) -> Self {
        TokenBlock { start, len }
    }

    pub fn end(&self) -> u32 {
        self.start + self.len
    }

    pub fn contains(&self, token: u32) -> bool {
        token >= self.start && token < self.end()
    }

    pub fn overlaps(&self, other: &TokenBlock) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

/// Generation parameters of one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub category_id: usize,
    pub vocab_size: usize,
    pub private_block: TokenBlock,
    pub shared_block: TokenBlock,
    pub zipf_exponent: f64,
    /// Probability that a token is drawn from the private block.
    pub private_mass: f64,
    /// Probability that a token's rank ordering depends on the previous token.
    pub bigram_weight: f64,
    pub bigram_seed: u64,
}

/// Parameters for a whole family of categories sharing one vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub categories: usize,
    pub vocab_size: usize,
    pub shared_block_len: usize,
    pub zipf_exponent: f64,
    pub private_mass: f64,
    pub bigram_weight: f64,
    pub tokens_per_category: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            categories: 3,
            vocab_size: 512,
            shared_block_len: 128,
            zipf_exponent: 1.1,
            private_mass: 0.5,
            bigram_weight: 0.6,
            tokens_per_category: 40_000,
            seed: 0,
        }
    }
}

impl CategorySpec {
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size as u64;
        if self.private_block.len == 0 || self.shared_block.len == 0 {
            return Err(Error::InvalidSpec(format!(
                "category {} has an empty token block",
                self.category_id
            )));
        }
        if self.private_block.end() as u64 > v || self.shared_block.end() as u64 > v {
            return Err(Error::InvalidSpec(format!(
                "category {} blocks exceed vocabulary {}",
                self.category_id, self.vocab_size
            )));
        }
        if self.private_block.overlaps(&self.shared_block) {
            return Err(Error::InvalidSpec(format!(
                "category {} private block overlaps the shared block",
                self.category_id
            )));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::InvalidSpec("zipf exponent must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.private_mass) || !(0.0..=1.0).contains(&self.bigram_weight) {
            return Err(Error::InvalidSpec(
                "private_mass and bigram_weight must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Lays out `[shared | private_0 | private_1 | ...]` over the vocabulary.
    pub fn family(config: &CorpusConfig) -> Result<Vec<CategorySpec>> {
        let c = config.categories;
        if c == 0 {
            return Err(Error::InvalidSpec("need at least one category".into()));
        }
        if config.shared_block_len >= config.vocab_size {
            return Err(Error::InvalidSpec("shared block leaves no private tokens".into()));
        }
        let private_total = config.vocab_size - config.shared_block_len;
        if private_total % c != 0 {
            return Err(Error::InvalidSpec(format!(
                "{private_total} private tokens do not split evenly over {c} categories"
            )));
        }
        let private_len = (private_total / c) as u32;
        let shared = TokenBlock::new(0, config.shared_block_len as u32);
        let specs: Vec<CategorySpec> = (0..c)
            .map(|k| CategorySpec {
                category_id: k,
                vocab_size: config.vocab_size,
                private_block: TokenBlock::new(shared.end() + k as u32 * private_len, private_len),
                shared_block: shared,
                zipf_exponent: config.zipf_exponent,
                private_mass: config.private_mass,
                bigram_weight: config.bigram_weight,
                bigram_seed: derive_seed(config.seed, &[tag::BIGRAM, k as u64]),
            })
            .collect();
        validate_family(&specs)?;
        Ok(specs)
    }
}

/// Checks the family-level invariants: one shared block, disjoint private
/// blocks, and a vocabulary exactly covered by the blocks.
pub fn validate_family(specs: &[CategorySpec]) -> Result<()> {
    let first = specs
        .first()
        .ok_or_else(|| Error::InvalidSpec("empty category family".into()))?;
    for s in specs {
        s.validate()?;
        if s.shared_block != first.shared_block || s.vocab_size != first.vocab_size {
            return Err(Error::InvalidSpec("categories disagree on the shared block".into()));
        }
    }
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            if a.private_block.overlaps(&b.private_block) {
                return Err(Error::InvalidSpec(format!(
                    "private blocks of categories {} and {} overlap",
                    a.category_id, b.category_id
                )));
            }
        }
    }
    let covered = first.shared_block.len as usize
        + specs.iter().map(|s| s.private_block.len as usize).sum::<usize>();
    if covered != first.vocab_size {
        return Err(Error::InvalidSpec(format!(
            "blocks cover {covered} tokens but the vocabulary has {}",
            first.vocab_size
        )));
    }
    Ok(())
}

/// A generated token stream of one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCorpus {
    pub category_id: usize,
    pub vocab_size: usize,
    pub tokens: Vec<u32>,
}

fn zipf_cdf(n: usize, exponent: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=n).map(|r| math::pow(r as f64, -exponent)).collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

fn sample_rank(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

const SHARED: u64 = 0;
const PRIVATE: u64 = 1;

/// Rank-to-token orderings, built lazily per previous token.
struct Orderings<'a> {
    spec: &'a CategorySpec,
    global: [Vec<u32>; 2],
    per_context: Vec<[Option<Vec<u32>>; 2]>,
}

impl<'a> Orderings<'a> {
    fn new(spec: &'a CategorySpec) -> Self {
        let global = [
            Self::ordering(spec, spec.shared_block, SHARED, u64::MAX),
            Self::ordering(spec, spec.private_block, PRIVATE, u64::MAX),
        ];
        Orderings {
            spec,
            global,
            per_context: vec![[None, None]; spec.vocab_size + 1],
        }
    }

    fn ordering(spec: &CategorySpec, block: TokenBlock, kind: u64, context: u64) -> Vec<u32> {
        let mut order: Vec<u32> = (block.start..block.end()).collect();
        Rng::new(spec.bigram_seed, &[kind, context]).shuffle(&mut order);
        order
    }

    fn token(&mut self, context: usize, kind: u64, contextual: bool, rank: usize) -> u32 {
        if !contextual {
            return self.global[kind as usize][rank];
        }
        let block = if kind == SHARED {
            self.spec.shared_block
        } else {
            self.spec.private_block
        };
        let spec = self.spec;
        let slot = &mut self.per_context[context][kind as usize];
        slot.get_or_insert_with(|| Self::ordering(spec, block, kind, context as u64))[rank]
    }
}

/// Generates `length` tokens of one category. Deterministic in `(spec, seed)`.
pub fn generate_category_corpus(spec: &CategorySpec, length: usize, seed: u64) -> Result<TokenCorpus> {
    spec.validate()?;
    if length == 0 {
        return Err(Error::InvalidSpec("corpus length must be positive".into()));
    }
    let cdfs = [
        zipf_cdf(spec.shared_block.len as usize, spec.zipf_exponent),
        zipf_cdf(spec.private_block.len as usize, spec.zipf_exponent),
    ];
    let mut orderings = Orderings::new(spec);
    let mut rng = Rng::new(seed, &[tag::CORPUS]);
    // The first token is drawn in a virtual start context.
    let mut context = spec.vocab_size;
    let mut tokens = Vec::with_capacity(length);
    for _ in 0..length {
        let kind = if rng.uniform() < spec.private_mass { PRIVATE } else { SHARED };
        let contextual = rng.uniform() < spec.bigram_weight;
        let rank = sample_rank(&cdfs[kind as usize], rng.uniform());
        let token = orderings.token(context, kind, contextual, rank);
        tokens.push(token);
        context = token as usize;
    }
    Ok(TokenCorpus {
        category_id: spec.category_id,
        vocab_size: spec.vocab_size,
        tokens,
    })
}

/// Generates one corpus per spec, each from its own derived seed.
pub fn generate_corpora(specs: &[CategorySpec], length: usize, seed: u64) -> Result<Vec<TokenCorpus>> {
    validate_family(specs)?;
    specs
        .iter()
        .map(|s| generate_category_corpus(s, length, derive_seed(seed, &[s.category_id as u64])))
        .collect()
}

/// Multiset Jaccard index `|a ∩ b| / (|a| + |b|)`, in `[0, 0.5]`.
pub fn jaccard_index(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("jaccard index of an empty corpus".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < sa.len() && j < sb.len() {
        match sa[i].cmp(&sb[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(common as f64 / (a.len() + b.len()) as f64)
}

/// Per-client category weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureVector(Vec<f64>);

impl MixtureVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput("mixture weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("mixture sums to {total}, not 1")));
        }
        Ok(MixtureVector(weights))
    }

    pub fn one_hot(categories: usize, k: usize) -> Self {
        let mut w = vec![0.0; categories];
        w[k] = 1.0;
        MixtureVector(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &MixtureVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for MixtureVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        MixtureVector::new(v)
    }
}

impl From<MixtureVector> for Vec<f64> {
    fn from(m: MixtureVector) -> Vec<f64> {
        m.0
    }
}

/// Position of a piece inside its category corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub category: usize,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn overlaps(&self, other: &Span) -> bool {
        self.category == other.category
            && self.start < other.start + other.len
            && other.start < self.start + self.len
    }
}

/// A contiguous run of tokens copied out of a category corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Piece {
    pub span: Span,
    pub tokens: Vec<u32>,
}

/// A set of pieces assigned to one purpose (train, val, test, shared).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub pieces: Vec<Piece>,
}

impl Shard {
    pub fn token_count(&self) -> usize {
        self.pieces.iter().map(|p| p.tokens.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.token_count() == 0
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.pieces.iter().flat_map(|p| p.tokens.iter().copied())
    }

    pub fn spans(&self) -> impl Iterator<Item = Span> + '_ {
        self.pieces.iter().map(|p| p.span)
    }

    /// Splits off the last `fraction` of the shard's tokens, in piece order.
    /// At most one piece is cut.
    pub fn split_tail(&self, fraction: f64) -> (Shard, Shard) {
        let total = self.token_count();
        let mut keep = total - (libm::round(total as f64 * fraction) as usize).min(total);
        let mut head = Shard::default();
        let mut tail = Shard::default();
        for p in &self.pieces {
            let cut = keep.min(p.tokens.len());
            keep -= cut;
            let (h, t) = p.tokens.split_at(cut);
            if !h.is_empty() {
                head.pieces.push(Piece {
                    span: Span { len: h.len(), ..p.span },
                    tokens: h.to_vec(),
                });
            }
            if !t.is_empty() {
                tail.pieces.push(Piece {
                    span: Span {
                        start: p.span.start + cut,
                        len: t.len(),
                        ..p.span
                    },
                    tokens: t.to_vec(),
                });
            }
        }
        (head, tail)
    }

    /// Consecutive evaluation windows of at most `window` tokens. Windows
    /// overlap by one token so every token except the first of each piece is
    /// a prediction target exactly once.
    pub fn eval_windows(&self, window: usize) -> Vec<&[u32]> {
        let stride = window - 1;
        let mut out = Vec::new();
        for p in &self.pieces {
            let t = &p.tokens;
            let mut start = 0;
            while start + 1 < t.len() {
                let end = (start + window).min(t.len());
                out.push(&t[start..end]);
                start += stride;
            }
        }
        out
    }

    /// A uniformly placed window of up to `window` tokens; pieces are picked
    /// in proportion to the number of windows they hold.
    pub fn sample_window(&self, rng: &mut Rng, window: usize) -> Option<&[u32]> {
        let starts = |p: &Piece| p.tokens.len().saturating_sub(window.min(p.tokens.len()).max(2)) + 1;
        let usable = |p: &Piece| p.tokens.len() >= 2;
        let total: usize = self.pieces.iter().filter(|p| usable(p)).map(starts).sum();
        if total == 0 {
            return None;
        }
        let mut pick = rng.below(total);
        for p in self.pieces.iter().filter(|p| usable(p)) {
            let n = starts(p);
            if pick < n {
                let len = window.min(p.tokens.len());
                return Some(&p.tokens[pick..pick + len]);
            }
            pick -= n;
        }
        unreachable!("window index within total")
    }
}

/// Hands out disjoint pieces of category corpora in a seeded chunk order.
#[derive(Debug, Clone)]
pub struct ChunkPool {
    corpora: Vec<TokenCorpus>,
    chunk_len: usize,
    order: Vec<Vec<usize>>,
    cursor: Vec<usize>,
}

impl ChunkPool {
    pub fn new(corpora: Vec<TokenCorpus>, chunk_len: usize, seed: u64) -> Result<Self> {
        if chunk_len < 2 {
            return Err(Error::InvalidInput("chunk length must be at least 2".into()));
        }
        let order = corpora
            .iter()
            .map(|c| {
                let mut idx: Vec<usize> = (0..c.tokens.len().div_ceil(chunk_len)).collect();
                Rng::new(seed, &[tag::POOL, c.category_id as u64]).shuffle(&mut idx);
                idx
            })
            .collect();
        let cursor = vec![0; corpora.len()];
        Ok(ChunkPool {
            corpora,
            chunk_len,
            order,
            cursor,
        })
    }

    pub fn categories(&self) -> usize {
        self.corpora.len()
    }

    pub fn corpora(&self) -> &[TokenCorpus] {
        &self.corpora
    }

    fn chunk_range(&self, category: usize, chunk: usize) -> (usize, usize) {
        let start = chunk * self.chunk_len;
        let end = (start + self.chunk_len).min(self.corpora[category].tokens.len());
        (start, end)
    }

    /// Tokens not yet handed out for `category`.
    pub fn remaining(&self, category: usize) -> usize {
        self.order[category][self.cursor[category]..]
            .iter()
            .map(|&c| {
                let (s, e) = self.chunk_range(category, c);
                e - s
            })
            .sum()
    }

    /// Takes exactly `n` tokens of `category`. The final chunk is truncated
    /// and its remainder is discarded, keeping every handed-out span disjoint.
    pub fn take(&mut self, category: usize, n: usize) -> Result<Shard> {
        let available = self.remaining(category);
        if n > available {
            return Err(Error::DataExhausted {
                category,
                requested: n,
                available,
            });
        }
        let mut shard = Shard::default();
        let mut need = n;
        while need > 0 {
            let chunk = self.order[category][self.cursor[category]];
            self.cursor[category] += 1;
            let (s, e) = self.chunk_range(category, chunk);
            let len = (e - s).min(need);
            shard.pieces.push(Piece {
                span: Span {
                    category,
                    start: s,
                    len,
                },
                tokens: self.corpora[category].tokens[s..s + len].to_vec(),
            });
            need -= len;
        }
        Ok(shard)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heterogeneity {
    /// Two categories per client, mixed 3/4 and 1/4.
    Low,
    /// One exclusive category per client.
    High,
}

impl Heterogeneity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Heterogeneity::Low => "low",
            Heterogeneity::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub heterogeneity: Heterogeneity,
    pub n_clients: usize,
    pub tokens_per_client: usize,
    pub split: SplitFractions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub mixture: MixtureVector,
    pub train: Shard,
    pub val: Shard,
    pub test: Shard,
}

/// Category mixtures for a heterogeneity level. Low pairs client `i` with
/// categories `i mod C` (3/4) and `(i + 1) mod C` (1/4); high assigns
/// category `i mod C`.
pub fn client_mixtures(heterogeneity: Heterogeneity, n_clients: usize, categories: usize) -> Result<Vec<MixtureVector>> {
    match heterogeneity {
        Heterogeneity::High => {
            if n_clients < categories || categories == 0 {
                return Err(Error::InvalidInput(format!(
                    "high heterogeneity needs at least one client per category ({n_clients} < {categories})"
                )));
            }
            Ok((0..n_clients)
                .map(|i| MixtureVector::one_hot(categories, i % categories))
                .collect())
        }
        Heterogeneity::Low => {
            if n_clients < 2 || categories < 2 {
                return Err(Error::InvalidInput(
                    "low heterogeneity needs at least two clients and two categories".into(),
                ));
            }
            Ok((0..n_clients)
                .map(|i| {
                    let mut w = vec![0.0; categories];
                    w[i % categories] = 0.75;
                    w[(i + 1) % categories] = 0.25;
                    MixtureVector(w)
                })
                .collect())
        }
    }
}

fn round_count(x: f64) -> usize {
    libm::round(x) as usize
}

/// Draws disjoint train/val/test shards for every client from `pool`.
pub fn partition_clients(pool: &mut ChunkPool, config: &PartitionConfig) -> Result<Vec<ClientDataset>> {
    let s = config.split;
    if [s.train, s.val, s.test].iter().any(|f| *f < 0.0) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("split fractions must be nonnegative and sum to 1".into()));
    }
    let mixtures = client_mixtures(config.heterogeneity, config.n_clients, pool.categories())?;
    mixtures
        .into_iter()
        .enumerate()
        .map(|(client_id, mixture)| {
            let mut ds = ClientDataset {
                client_id,
                mixture,
                train: Shard::default(),
                val: Shard::default(),
                test: Shard::default(),
            };
            for (category, &w) in ds.mixture.weights().iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let total = round_count(w * config.tokens_per_client as f64);
                let n_train = round_count(s.train * total as f64);
                let n_val = round_count(s.val * total as f64).min(total - n_train);
                let n_test = total - n_train - n_val;
                ds.train.pieces.extend(pool.take(category, n_train)?.pieces);
                ds.val.pieces.extend(pool.take(category, n_val)?.pieces);
                ds.test.pieces.extend(pool.take(category, n_test)?.pieces);
            }
            Ok(ds)
        })
        .collect()
}

/// The public set scored by every client for prediction-similarity trust.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedDataset {
    pub shard: Shard,
    pub per_category_counts: Vec<usize>,
}

/// Samples `total_tokens` evenly across categories (the first
/// `total_tokens mod C` categories get one extra token).
pub fn build_shared_dataset(pool: &mut ChunkPool, total_tokens: usize) -> Result<SharedDataset> {
    let c = pool.categories();
    if c == 0 || total_tokens < c {
        return Err(Error::InvalidInput(format!(
            "shared set of {total_tokens} tokens cannot cover {c} categories"
        )));
    }
    let counts: Vec<usize> = (0..c)
        .map(|k| total_tokens / c + usize::from(k < total_tokens % c))
        .collect();
    let mut shard = Shard::default();
    for (k, &n) in counts.iter().enumerate() {
        shard.pieces.extend(pool.take(k, n)?.pieces);
    }
    Ok(SharedDataset {
        shard,
        per_category_counts: counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_category_specs(private_mass: f64, same_seed: bool) -> Vec<CategorySpec> {
        let mut specs = CategorySpec::family(&CorpusConfig {
            categories: 2,
            vocab_size: 96,
            shared_block_len: 32,
            private_mass,
            ..CorpusConfig::default()
        })
        .unwrap();
        if same_seed {
            specs[1].bigram_seed = specs[0].bigram_seed;
        }
        specs
    }

    #[test]
    fn fully_private_categories_barely_overlap() {
        let specs = two_category_specs(1.0, false);
        let a = generate_category_corpus(&specs[0], 5000, 1).unwrap();
        let b = generate_category_corpus(&specs[1], 5000, 2).unwrap();
        let j = jaccard_index(&a.tokens, &b.tokens).unwrap();
        assert!(j <= 0.05, "jaccard {j}");
    }

    #[test]
    fn generation_is_deterministic() {
        let specs = two_category_specs(0.5, false);
        let a = generate_category_corpus(&specs[0], 3000, 9).unwrap();
        let b = generate_category_corpus(&specs[0], 3000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shared_only_categories_are_identical_multisets() {
        let specs = two_category_specs(0.0, true);
        let a = generate_category_corpus(&specs[0], 4000, 5).unwrap();
        let b = generate_category_corpus(&specs[1], 4000, 5).unwrap();
        assert_eq!(jaccard_index(&a.tokens, &b.tokens).unwrap(), 0.5);
    }

    #[test]
    fn tokens_stay_in_their_blocks() {
        let specs = two_category_specs(0.5, false);
        let a = generate_category_corpus(&specs[1], 3000, 3).unwrap();
        assert!(a
            .tokens
            .iter()
            .all(|&t| specs[1].shared_block.contains(t) || specs[1].private_block.contains(t)));
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = two_category_specs(0.5, false).remove(0);
        assert!(matches!(generate_category_corpus(&spec, 0, 1), Err(Error::InvalidSpec(_))));
        spec.private_block.len = 0;
        assert!(matches!(generate_category_corpus(&spec, 10, 1), Err(Error::InvalidSpec(_))));
        let uneven = CorpusConfig {
            categories: 3,
            vocab_size: 100,
            shared_block_len: 32,
            ..CorpusConfig::default()
        };
        assert!(CategorySpec::family(&uneven).is_err());
    }

    #[test]
    fn jaccard_examples() {
        assert!((jaccard_index(&[1, 1, 2], &[1, 2, 2]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(jaccard_index(&[4, 5, 5], &[4, 5, 5]).unwrap(), 0.5);
        assert_eq!(jaccard_index(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert!(matches!(jaccard_index(&[], &[1]), Err(Error::InvalidInput(_))));
    }

    fn pool(categories: usize, len: usize) -> ChunkPool {
        let cfg = CorpusConfig {
            categories,
            vocab_size: 32 + 32 * categories,
            shared_block_len: 32,
            ..CorpusConfig::default()
        };
        let specs = CategorySpec::family(&cfg).unwrap();
        ChunkPool::new(generate_corpora(&specs, len, 11).unwrap(), 50, 4).unwrap()
    }

    fn assert_disjoint(spans: &[Span]) {
        for (i, a) in spans.iter().enumerate() {
            for b in &spans[i + 1..] {
                assert!(!a.overlaps(b), "{a:?} overlaps {b:?}");
            }
        }
    }

    #[test]
    fn high_partition_round_robin() {
        let mut p = pool(3, 6000);
        let cfg = PartitionConfig {
            heterogeneity: Heterogeneity::High,
            n_clients: 6,
            tokens_per_client: 500,
            split: SplitFractions::default(),
        };
        let ds = partition_clients(&mut p, &cfg).unwrap();
        let mut per_cat = [0; 3];
        for d in &ds {
            let nz: Vec<usize> = (0..3).filter(|&k| d.mixture.weights()[k] != 0.0).collect();
            assert_eq!(nz.len(), 1);
            assert_eq!(d.mixture.weights()[nz[0]], 1.0);
            per_cat[nz[0]] += 1;
            assert_eq!(d.train.token_count() + d.val.token_count() + d.test.token_count(), 500);
        }
        assert_eq!(per_cat, [2, 2, 2]);
    }

    #[test]
    fn low_partition_three_quarter_mixtures() {
        let mut p = pool(4, 6000);
        let cfg = PartitionConfig {
            heterogeneity: Heterogeneity::Low,
            n_clients: 4,
            tokens_per_client: 400,
            split: SplitFractions::default(),
        };
        let ds = partition_clients(&mut p, &cfg).unwrap();
        for d in &ds {
            let mut nz: Vec<f64> = d.mixture.weights().iter().copied().filter(|w| *w != 0.0).collect();
            nz.sort_by(f64::total_cmp);
            assert_eq!(nz, [0.25, 0.75]);
            assert!((d.mixture.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shards_and_shared_set_are_disjoint() {
        let mut p = pool(3, 6000);
        let cfg = PartitionConfig {
            heterogeneity: Heterogeneity::Low,
            n_clients: 5,
            tokens_per_client: 600,
            split: SplitFractions::default(),
        };
        let ds = partition_clients(&mut p, &cfg).unwrap();
        let shared = build_shared_dataset(&mut p, 3000).unwrap();
        assert_eq!(shared.per_category_counts, [1000, 1000, 1000]);
        let mut spans: Vec<Span> = ds
            .iter()
            .flat_map(|d| d.train.spans().chain(d.val.spans()).chain(d.test.spans()))
            .collect();
        spans.extend(shared.shard.spans());
        assert_disjoint(&spans);
    }

    #[test]
    fn shared_counts_differ_by_at_most_one() {
        let mut p = pool(2, 3000);
        let shared = build_shared_dataset(&mut p, 1001).unwrap();
        assert_eq!(shared.per_category_counts.iter().sum::<usize>(), 1001);
        let (lo, hi) = (shared.per_category_counts[1], shared.per_category_counts[0]);
        assert!(hi - lo <= 1);
    }

    #[test]
    fn exhaustion_is_reported() {
        let mut p = pool(2, 1000);
        let cfg = PartitionConfig {
            heterogeneity: Heterogeneity::High,
            n_clients: 2,
            tokens_per_client: 1500,
            split: SplitFractions::default(),
        };
        assert!(matches!(partition_clients(&mut p, &cfg), Err(Error::DataExhausted { .. })));
    }

    #[test]
    fn eval_windows_cover_every_target_once() {
        let shard = Shard {
            pieces: vec![Piece {
                span: Span { category: 0, start: 0, len: 10 },
                tokens: (0..10).collect(),
            }],
        };
        let w = shard.eval_windows(4);
        let targets: usize = w.iter().map(|w| w.len() - 1).sum();
        assert_eq!(targets, 9);
        assert_eq!(w[0], &[0, 1, 2, 3]);
        assert_eq!(w[1], &[3, 4, 5, 6]);
    }

    #[test]
    fn split_tail_preserves_tokens() {
        let mut p = pool(2, 2000);
        let s = p.take(0, 730).unwrap();
        let (h, t) = s.split_tail(0.1);
        assert_eq!(h.token_count() + t.token_count(), 730);
        assert_eq!(t.token_count(), 73);
        assert!(t.pieces.len() <= 2);
        let mut spans: Vec<Span> = h.spans().chain(t.spans()).collect();
        spans.sort();
        assert_disjoint(&spans);
    }
}
