//! Synchronous gossip rounds: local training, broadcast, trust, and
//! trust-weighted aggregation of adapter updates, plus the baselines and
//! the byte ledger of everything that would cross the wire.
//!
//! A round `t` runs `comm_period` local steps on every client from
//! `θᵢ⁽ᵗ⁻¹⁾`, producing `Δθᵢ = θ_before − θ_after`. Trust is computed from
//! the pre-update adapters `θ⁽ᵗ⁻¹⁾`, masked by the topology, and each client
//! moves to `θᵢ⁽ᵗ⁻¹⁾ − η·Σⱼ wᵢⱼ Δθⱼ`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_shared_dataset, generate_corpora, partition_clients, CategorySpec, ChunkPool, ClientDataset, CorpusConfig,
    Heterogeneity, MixtureVector, PartitionConfig, Shard, SharedDataset, SplitFractions, TokenCorpus,
};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::math;
use crate::model::{
    count_trainable_params, local_steps, perplexity, pretrain_base, shard_logits, DeltaTheta, LoraAdapterSet,
    LoraParams, ModelConfig, PretrainConfig, SgdMomentum, TinyLM, TrainingConfig,
};
use crate::rng::{derive_seed, tag, Rng};
use crate::trust::{
    apply_topology, sparsify_topk, trust_drift_l1, trust_oracle, trust_prediction, trust_uniform, trust_validation,
    trust_weight_similarity, LogitsPayload, TopologyMask, TrustMatrix, ROW_SUM_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Local,
    Fedavg,
    FedavgFt,
    Strategy1,
    Strategy2,
    Strategy3,
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Local,
        Strategy::Fedavg,
        Strategy::FedavgFt,
        Strategy::Strategy1,
        Strategy::Strategy2,
        Strategy::Strategy3,
        Strategy::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Local => "local",
            Strategy::Fedavg => "fedavg",
            Strategy::FedavgFt => "fedavg_ft",
            Strategy::Strategy1 => "strategy1",
            Strategy::Strategy2 => "strategy2",
            Strategy::Strategy3 => "strategy3",
            Strategy::Oracle => "oracle",
        }
    }

    pub fn parse(name: &str) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Trust is learned from client state rather than fixed.
    pub fn is_learned(&self) -> bool {
        matches!(self, Strategy::Strategy1 | Strategy::Strategy2 | Strategy::Strategy3)
    }

    /// What each client broadcasts per round.
    pub fn messages(&self, sparse: bool) -> &'static [ElementKind] {
        use ElementKind::*;
        match self {
            Strategy::Local => &[],
            Strategy::Fedavg | Strategy::FedavgFt | Strategy::Oracle => &[LoraUpdates],
            Strategy::Strategy1 | Strategy::Strategy2 => &[LoraWeights, LoraUpdates],
            Strategy::Strategy3 if sparse => &[SparseTopkLogits, LoraUpdates],
            Strategy::Strategy3 => &[DenseLogits, LoraUpdates],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Full,
    Ring,
    /// `custom[i][j]`: client `i` uses messages from client `j`.
    Custom(Vec<Vec<bool>>),
}

impl Topology {
    pub fn name(&self) -> &'static str {
        match self {
            Topology::Full => "full",
            Topology::Ring => "ring",
            Topology::Custom(_) => "custom",
        }
    }

    pub fn mask(&self, n: usize) -> Result<TopologyMask> {
        match self {
            Topology::Full => Ok(TopologyMask::full(n)),
            Topology::Ring => Ok(TopologyMask::ring(n)),
            Topology::Custom(rows) => {
                if rows.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "custom topology has {} rows for {n} clients",
                        rows.len()
                    )));
                }
                TopologyMask::from_adjacency(rows)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundSchedule {
    pub total_iterations: usize,
    pub warmup_iterations: usize,
    pub comm_period: usize,
    pub outer_lr: f64,
}

impl Default for RoundSchedule {
    fn default() -> Self {
        RoundSchedule {
            total_iterations: 500,
            warmup_iterations: 100,
            comm_period: 25,
            outer_lr: 1.0,
        }
    }
}

impl RoundSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.comm_period == 0 {
            return Err(Error::InvalidConfig("communication period must be at least 1".into()));
        }
        if self.warmup_iterations > self.total_iterations {
            return Err(Error::InvalidConfig("warmup exceeds the total iteration budget".into()));
        }
        if (self.total_iterations - self.warmup_iterations) % self.comm_period != 0 {
            return Err(Error::InvalidConfig(format!(
                "post-warmup budget {} is not a multiple of the period {}",
                self.total_iterations - self.warmup_iterations,
                self.comm_period
            )));
        }
        if !(self.outer_lr.is_finite() && self.outer_lr > 0.0) {
            return Err(Error::InvalidConfig("outer learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        (self.total_iterations - self.warmup_iterations) / self.comm_period
    }

    /// Local iterations completed at evaluation index `round` (0 = after warmup).
    pub fn iterations_at(&self, round: usize) -> usize {
        self.warmup_iterations + round * self.comm_period
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub topology: Topology,
    pub n_clients: usize,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub schedule: RoundSchedule,
    /// Share of each client's training data held back for the local phase of
    /// `fedavg_ft`; the same share of the iteration budget goes to that phase.
    pub ft_fraction: f64,
    /// Keep only the top-K logits per position for prediction trust.
    pub top_k: Option<usize>,
    /// Softmax temperature of the learned trust strategies.
    pub temperature: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            strategy: Strategy::Strategy3,
            topology: Topology::Full,
            n_clients: 6,
            seeds: vec![0, 1, 2],
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            schedule: RoundSchedule::default(),
            ft_fraction: 0.1,
            top_k: None,
            temperature: 1.0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.n_clients == 0 {
            return Err(Error::InvalidConfig("at least one client is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        if !(self.ft_fraction > 0.0 && self.ft_fraction < 1.0) {
            return Err(Error::InvalidConfig("ft_fraction must lie in (0, 1)".into()));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > self.model.vocab {
                return Err(Error::InvalidConfig(format!("top_k {k} outside 1..={}", self.model.vocab)));
            }
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig("trust temperature must be positive".into()));
        }
        let t = &self.training;
        if t.batch_size == 0 || t.accum == 0 || !(t.lr.is_finite() && t.lr > 0.0) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::InvalidConfig("invalid local optimiser settings".into()));
        }
        if self.strategy == Strategy::FedavgFt {
            self.ft_rounds()?;
        }
        self.topology.mask(self.n_clients).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(m),
            other => Error::InvalidConfig(format!("topology: {other}")),
        })?;
        Ok(())
    }

    /// Rounds spent in the local phase of `fedavg_ft`: `ft_fraction` of the
    /// total budget, rounded to whole communication periods.
    pub fn ft_rounds(&self) -> Result<usize> {
        let periods = self.ft_fraction * self.schedule.total_iterations as f64 / self.schedule.comm_period as f64;
        let r = libm::round(periods) as usize;
        if r == 0 || r > self.schedule.rounds() {
            return Err(Error::InvalidConfig(format!(
                "ft_fraction {} gives {r} local rounds out of {}",
                self.ft_fraction,
                self.schedule.rounds()
            )));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    LoraWeights,
    LoraUpdates,
    DenseLogits,
    SparseTopkLogits,
}

impl ElementKind {
    pub fn name(&self) -> &'static str {
        match self {
            ElementKind::LoraWeights => "lora_weights",
            ElementKind::LoraUpdates => "lora_updates",
            ElementKind::DenseLogits => "dense_logits",
            ElementKind::SparseTopkLogits => "sparse_topk_logits",
        }
    }
}

/// Size parameters of every message kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadShape {
    pub trainable_params: usize,
    pub positions: usize,
    pub vocab: usize,
    pub top_k: Option<usize>,
}

/// Header of a sparse logits message.
pub const SPARSE_HEADER_BYTES: u64 = 16;
/// Position u32, token u32, value f64.
pub const SPARSE_ENTRY_BYTES: u64 = 16;

/// Closed-form payload size of one message.
pub fn ledger_bytes(kind: ElementKind, shape: &PayloadShape) -> Result<u64> {
    let p = shape.positions as u64;
    Ok(match kind {
        ElementKind::LoraWeights | ElementKind::LoraUpdates => shape.trainable_params as u64 * 8,
        ElementKind::DenseLogits => p * shape.vocab as u64 * 8,
        ElementKind::SparseTopkLogits => {
            let k = shape
                .top_k
                .ok_or_else(|| Error::InvalidConfig("sparse logits need top_k".into()))?;
            p * k as u64 * SPARSE_ENTRY_BYTES + SPARSE_HEADER_BYTES
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub seed: u64,
    pub round: usize,
    pub client: usize,
    pub kind: ElementKind,
    /// Size of one copy of the message.
    pub bytes: u64,
    /// Other clients that receive it.
    pub recipients: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub records: Vec<LedgerRecord>,
}

impl CommLedger {
    /// Sum of message sizes, each broadcast counted once.
    pub fn total_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes).sum()
    }

    /// Bytes on the wire: each message times its number of recipients.
    pub fn transmitted_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.bytes * r.recipients as u64).sum()
    }
}

/// `Σⱼ wⱼ·Δθⱼ` in client order. Zero weights are skipped, so a one-hot row
/// returns that client's update bit for bit.
pub fn aggregate(deltas: &[&DeltaTheta], w_row: &[f64]) -> Result<DeltaTheta> {
    if deltas.is_empty() || deltas.len() != w_row.len() {
        return Err(Error::IncompatibleDelta(format!(
            "{} updates for a trust row of length {}",
            deltas.len(),
            w_row.len()
        )));
    }
    if w_row.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (math::order_free_sum(w_row) - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::IncompatibleDelta("trust row is not stochastic".into()));
    }
    if deltas.iter().any(|d| !d.params().same_shape(deltas[0].params())) {
        return Err(Error::IncompatibleDelta("updates differ in shape".into()));
    }
    let mut acc: Option<LoraParams> = None;
    for (d, &w) in deltas.iter().zip(w_row) {
        if w == 0.0 {
            continue;
        }
        match acc.as_mut() {
            None => {
                let mut first = d.params().clone();
                if w != 1.0 {
                    first.scale(w);
                }
                acc = Some(first);
            }
            Some(a) => a.axpy(w, d.params()),
        }
    }
    Ok(DeltaTheta::from_params(acc.expect("a stochastic row has a positive entry")))
}

/// Per-client mutable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub adapters: LoraAdapterSet,
    pub optimizer: SgdMomentum,
    pub rng: Rng,
}

/// Everything a run needs besides the frozen base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentData {
    pub heterogeneity: Heterogeneity,
    pub clients: Vec<ClientDataset>,
    pub shared: Option<SharedDataset>,
}

impl ExperimentData {
    pub fn mixtures(&self) -> Vec<MixtureVector> {
        self.clients.iter().map(|c| c.mixture.clone()).collect()
    }
}

/// Corpus, partition and pretraining set sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: CorpusConfig,
    pub heterogeneity: Heterogeneity,
    pub tokens_per_client: usize,
    pub split: SplitFractions,
    /// Public set scored by every client for prediction trust.
    pub shared_tokens: usize,
    /// Category-balanced set the base model is pretrained on.
    pub pretrain_tokens: usize,
    pub chunk_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            corpus: CorpusConfig::default(),
            heterogeneity: Heterogeneity::High,
            tokens_per_client: 3000,
            split: SplitFractions::default(),
            shared_tokens: 600,
            pretrain_tokens: 12_000,
            chunk_len: 256,
        }
    }
}

/// Client data, the shared set, and the pretraining shard drawn from one
/// chunk pool, so none of them overlap.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub data: ExperimentData,
    pub pretrain: Shard,
}

pub fn generate_world_corpora(data: &DataConfig) -> Result<Vec<TokenCorpus>> {
    let specs = CategorySpec::family(&data.corpus)?;
    generate_corpora(&specs, data.corpus.tokens_per_category, data.corpus.seed)
}

/// Partitions `corpora` into client shards, the shared set and the
/// pretraining set.
pub fn build_world(corpora: Vec<TokenCorpus>, data: &DataConfig, n_clients: usize) -> Result<World> {
    let mut pool = ChunkPool::new(corpora, data.chunk_len, derive_seed(data.corpus.seed, &[tag::POOL]))?;
    let clients = partition_clients(
        &mut pool,
        &PartitionConfig {
            heterogeneity: data.heterogeneity,
            n_clients,
            tokens_per_client: data.tokens_per_client,
            split: data.split,
        },
    )?;
    let shared = build_shared_dataset(&mut pool, data.shared_tokens)?;
    let pretrain = build_shared_dataset(&mut pool, data.pretrain_tokens)?.shard;
    Ok(World {
        data: ExperimentData {
            heterogeneity: data.heterogeneity,
            clients,
            shared: Some(shared),
        },
        pretrain,
    })
}

/// Builds the world and pretrains the shared base on its pretraining shard.
pub fn prepare(data: &DataConfig, model: &ModelConfig, pretrain: &PretrainConfig, n_clients: usize) -> Result<(World, TinyLM)> {
    if data.corpus.vocab_size != model.vocab {
        return Err(Error::InvalidConfig(format!(
            "corpus vocabulary {} differs from model vocabulary {}",
            data.corpus.vocab_size, model.vocab
        )));
    }
    let world = build_world(generate_world_corpora(data)?, data, n_clients)?;
    let base = pretrain_base(model, &world.pretrain, pretrain)?;
    Ok((world, base))
}

/// One seed of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// `test_ppl[client][k]` after `k` rounds; index 0 is the state after warmup.
    pub test_ppl: Vec<Vec<f64>>,
    /// Trust matrix used in each communicating round.
    pub trust: Vec<TrustMatrix>,
    /// L1 distance between consecutive trust matrices.
    pub drift: Vec<f64>,
    pub final_adapters: Vec<LoraAdapterSet>,
}

impl SeedRun {
    pub fn final_ppl(&self) -> Vec<f64> {
        self.test_ppl.iter().map(|t| *t.last().expect("trajectory is never empty")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub heterogeneity: Heterogeneity,
    /// Test perplexity of the bare pretrained base, per client.
    pub base_ppl: Vec<f64>,
    pub runs: Vec<SeedRun>,
    pub ledger: CommLedger,
}

impl ExperimentResult {
    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    /// Mean over seeds of the per-seed mean final client perplexity, and the
    /// sample std over seeds (absent for a single seed).
    pub fn final_mean_std(&self) -> (f64, Option<f64>) {
        let per_seed: Vec<f64> = self.runs.iter().map(|r| mean(&r.final_ppl())).collect();
        math::mean_std(&per_seed)
    }

    /// Mean test perplexity over clients and seeds at each evaluation index.
    pub fn mean_trajectory(&self) -> Vec<f64> {
        let len = self.runs.first().map(|r| r.test_ppl[0].len()).unwrap_or(0);
        (0..len)
            .map(|k| {
                let per_seed: Vec<f64> = self
                    .runs
                    .iter()
                    .map(|r| mean(&r.test_ppl.iter().map(|c| c[k]).collect::<Vec<_>>()))
                    .collect();
                mean(&per_seed)
            })
            .collect()
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// First evaluation index whose mean perplexity is at most `threshold`.
pub fn rounds_to_threshold(result: &ExperimentResult, threshold: f64) -> Option<usize> {
    result.mean_trajectory().iter().position(|&p| p <= threshold)
}

/// Test hooks for a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// Replaces the topology-masked trust matrix of every round.
    pub trust: Option<TrustMatrix>,
}

pub fn run_experiment<E: Executor>(
    config: &ExperimentConfig,
    data: &ExperimentData,
    base: &TinyLM,
    exec: &E,
) -> Result<ExperimentResult> {
    run_experiment_with(config, data, base, exec, &Overrides::default())
}

pub fn run_experiment_with<E: Executor>(
    config: &ExperimentConfig,
    data: &ExperimentData,
    base: &TinyLM,
    exec: &E,
    overrides: &Overrides,
) -> Result<ExperimentResult> {
    let ctx = RunContext::new(config, data, base, overrides)?;
    let base_ppl = exec
        .map_range(ctx.n, |i| perplexity(base, None, &data.clients[i].test))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut ledger = CommLedger::default();
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let mut session = Session::with_context(ctx.clone(), seed, exec)?;
        while session.round() < session.total_rounds() {
            session.run_round()?;
        }
        let (run, seed_ledger) = session.finish()?;
        ledger.records.extend(seed_ledger.records);
        runs.push(run);
    }
    Ok(ExperimentResult {
        config: config.clone(),
        heterogeneity: data.heterogeneity,
        base_ppl,
        runs,
        ledger,
    })
}

/// One seed of an experiment, advanced a round at a time.
pub struct Session<'a, E: Executor> {
    ctx: RunContext<'a>,
    exec: &'a E,
    seed: u64,
    states: Vec<ClientState>,
    round: usize,
    test_ppl: Vec<Vec<f64>>,
    trust: Vec<TrustMatrix>,
    ledger: CommLedger,
}

impl<'a, E: Executor> Session<'a, E> {
    /// Initialises every client with the same adapters and runs the warmup.
    pub fn start(
        config: &'a ExperimentConfig,
        data: &'a ExperimentData,
        base: &'a TinyLM,
        overrides: &'a Overrides,
        seed: u64,
        exec: &'a E,
    ) -> Result<Self> {
        Self::with_context(RunContext::new(config, data, base, overrides)?, seed, exec)
    }

    fn with_context(ctx: RunContext<'a>, seed: u64, exec: &'a E) -> Result<Self> {
        let cfg = ctx.config;
        let init = LoraAdapterSet::init(&cfg.model, &mut Rng::new(seed, &[tag::ADAPTER_INIT]));
        let mut states: Vec<ClientState> = (0..ctx.n)
            .map(|i| ClientState {
                adapters: init.clone(),
                optimizer: SgdMomentum::new(cfg.training.momentum),
                rng: Rng::new(seed, &[tag::CLIENT, i as u64]),
            })
            .collect();
        let warm = ctx.train_all(&mut states, &ctx.shards, cfg.schedule.warmup_iterations, exec)?;
        for (st, (next, _)) in states.iter_mut().zip(warm) {
            st.adapters = next;
        }
        let test_ppl = ctx.evaluate(&states, exec)?.into_iter().map(|p| vec![p]).collect();
        Ok(Session {
            ctx,
            exec,
            seed,
            states,
            round: 0,
            test_ppl,
            trust: Vec::new(),
            ledger: CommLedger::default(),
        })
    }

    pub fn states(&self) -> &[ClientState] {
        &self.states
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn total_rounds(&self) -> usize {
        self.ctx.config.schedule.rounds()
    }

    /// First round of the local-only phase (`total_rounds() + 1` if none).
    fn local_from(&self) -> Result<usize> {
        let rounds = self.total_rounds();
        Ok(match self.ctx.config.strategy {
            Strategy::FedavgFt => rounds - self.ctx.config.ft_rounds()? + 1,
            Strategy::Local => 1,
            _ => rounds + 1,
        })
    }

    /// Runs the next round and evaluates every client afterwards.
    pub fn run_round(&mut self) -> Result<()> {
        if self.round >= self.total_rounds() {
            return Err(Error::InvalidState("all rounds already ran".into()));
        }
        let round = self.round + 1;
        let ctx = &self.ctx;
        let cfg = ctx.config;
        let period = cfg.schedule.comm_period;
        if round >= self.local_from()? {
            let shards = if cfg.strategy == Strategy::FedavgFt {
                &ctx.ft_shards
            } else {
                &ctx.shards
            };
            let out = ctx.train_all(&mut self.states, shards, period, self.exec)?;
            for (st, (next, _)) in self.states.iter_mut().zip(out) {
                st.adapters = next;
            }
        } else {
            let out = ctx.train_all(&mut self.states, &ctx.shards, period, self.exec)?;
            ctx.record(&mut self.ledger, self.seed, round)?;
            let w = match &ctx.overrides.trust {
                Some(forced) => forced.clone(),
                None => ctx.trust(&self.states, self.exec)?,
            }
            .with_round(round);
            let deltas: Vec<&DeltaTheta> = out.iter().map(|(_, d)| d).collect();
            for (i, st) in self.states.iter_mut().enumerate() {
                let mixed = aggregate(&deltas, w.row(i))?;
                let next = st.adapters.apply(&mixed, cfg.schedule.outer_lr)?;
                if !next.params().is_finite() {
                    return Err(Error::TrainingDiverged(format!(
                        "client {i} adapters not finite after round {round}"
                    )));
                }
                st.adapters = next;
            }
            self.trust.push(w);
        }
        for (traj, p) in self.test_ppl.iter_mut().zip(ctx.evaluate(&self.states, self.exec)?) {
            traj.push(p);
        }
        self.round = round;
        Ok(())
    }

    pub fn finish(self) -> Result<(SeedRun, CommLedger)> {
        let drift = self
            .trust
            .windows(2)
            .map(|p| trust_drift_l1(&p[1], &p[0]))
            .collect::<Result<Vec<_>>>()?;
        Ok((
            SeedRun {
                seed: self.seed,
                test_ppl: self.test_ppl,
                trust: self.trust,
                drift,
                final_adapters: self.states.into_iter().map(|s| s.adapters).collect(),
            },
            self.ledger,
        ))
    }
}

#[derive(Clone)]
struct RunContext<'a> {
    config: &'a ExperimentConfig,
    data: &'a ExperimentData,
    base: &'a TinyLM,
    overrides: &'a Overrides,
    n: usize,
    mask: TopologyMask,
    shape: PayloadShape,
    /// Training shards of the communicating phase and of the local phase.
    shards: Vec<Shard>,
    ft_shards: Vec<Shard>,
}

impl<'a> RunContext<'a> {
    fn new(
        config: &'a ExperimentConfig,
        data: &'a ExperimentData,
        base: &'a TinyLM,
        overrides: &'a Overrides,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.n_clients;
        if data.clients.len() != n {
            return Err(Error::InvalidConfig(format!(
                "{} client datasets for {n} clients",
                data.clients.len()
            )));
        }
        if base.config() != &config.model {
            return Err(Error::InvalidConfig("base model does not match the model config".into()));
        }
        if let Some(i) = data.clients.iter().position(|c| c.train.is_empty() || c.test.is_empty()) {
            return Err(Error::InvalidInput(format!("client {i} lacks train or test data")));
        }
        if config.strategy == Strategy::Strategy2 {
            if let Some(i) = data.clients.iter().position(|c| c.val.is_empty()) {
                return Err(Error::InvalidConfig(format!("validation trust needs a val shard for client {i}")));
            }
        }
        let positions = match (&data.shared, config.strategy) {
            (Some(s), _) if !s.shard.is_empty() => s.shard.token_count(),
            (_, Strategy::Strategy3) => {
                return Err(Error::InvalidConfig("prediction trust needs a shared dataset".into()));
            }
            _ => 0,
        };
        if let Some(t) = &overrides.trust {
            if t.n() != n {
                return Err(Error::InvalidConfig("forced trust matrix has the wrong size".into()));
            }
        }
        let (shards, ft_shards): (Vec<Shard>, Vec<Shard>) = if config.strategy == Strategy::FedavgFt {
            data.clients.iter().map(|c| c.train.split_tail(config.ft_fraction)).unzip()
        } else {
            (data.clients.iter().map(|c| c.train.clone()).collect(), Vec::new())
        };
        if let Some(i) = shards.iter().chain(&ft_shards).position(|s| s.is_empty()) {
            return Err(Error::InvalidInput(format!("training shard {i} is empty after the held-out split")));
        }
        Ok(RunContext {
            config,
            data,
            base,
            overrides,
            n,
            mask: config.topology.mask(n)?,
            shape: PayloadShape {
                trainable_params: count_trainable_params(&config.model),
                positions,
                vocab: config.model.vocab,
                top_k: config.top_k,
            },
            shards,
            ft_shards,
        })
    }

    fn evaluate<E: Executor>(&self, states: &[ClientState], exec: &E) -> Result<Vec<f64>> {
        exec.map_range(self.n, |i| {
            let ppl = perplexity(self.base, Some(&states[i].adapters), &self.data.clients[i].test)?;
            if ppl.is_finite() {
                Ok(ppl)
            } else {
                Err(Error::TrainingDiverged(format!("client {i} test perplexity is not finite")))
            }
        })
        .into_iter()
        .collect()
    }

    fn train_all<E: Executor>(
        &self,
        states: &mut [ClientState],
        shards: &[Shard],
        steps: usize,
        exec: &E,
    ) -> Result<Vec<(LoraAdapterSet, DeltaTheta)>> {
        let training = &self.config.training;
        exec.map_mut(states, |i, st| {
            local_steps(self.base, &st.adapters, &mut st.optimizer, &shards[i], steps, training, &mut st.rng)
        })
        .into_iter()
        .collect()
    }

    fn trust<E: Executor>(&self, states: &[ClientState], exec: &E) -> Result<TrustMatrix> {
        let n = self.n;
        let tau = self.config.temperature;
        let adapters: Vec<&LoraAdapterSet> = states.iter().map(|s| &s.adapters).collect();
        let w = match self.config.strategy {
            Strategy::Fedavg | Strategy::FedavgFt => trust_uniform(n),
            Strategy::Oracle => trust_oracle(&self.data.mixtures())?,
            Strategy::Strategy1 => {
                let flat: Vec<Vec<f64>> = adapters.iter().map(|a| a.params().flatten()).collect();
                let refs: Vec<&[f64]> = flat.iter().map(Vec::as_slice).collect();
                trust_weight_similarity(&refs, tau)?
            }
            Strategy::Strategy2 => {
                let val: Vec<&Shard> = self.data.clients.iter().map(|c| &c.val).collect();
                trust_validation(self.base, &adapters, &val, tau, exec)?
            }
            Strategy::Strategy3 => {
                let shared = &self.data.shared.as_ref().expect("checked at setup").shard;
                let payloads = exec
                    .map_range(n, |i| {
                        let dense = shard_logits(self.base, adapters[i], shared)?;
                        Ok(match self.config.top_k {
                            Some(k) => LogitsPayload::Sparse(sparsify_topk(&dense, k)?),
                            None => LogitsPayload::Dense(dense),
                        })
                    })
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                trust_prediction(&payloads, tau)?
            }
            Strategy::Local => TrustMatrix::identity(n),
        };
        match &self.config.topology {
            Topology::Full => Ok(w),
            _ => apply_topology(&w, &self.mask),
        }
    }

    fn record(&self, ledger: &mut CommLedger, seed: u64, round: usize) -> Result<()> {
        let kinds = self.config.strategy.messages(self.config.top_k.is_some());
        for client in 0..self.n {
            for &kind in kinds {
                ledger.records.push(LedgerRecord {
                    seed,
                    round,
                    client,
                    kind,
                    bytes: ledger_bytes(kind, &self.shape)?,
                    recipients: self.mask.recipients(client),
                });
            }
        }
        Ok(())
    }

}

/// One-line description of a run for logs.
pub fn describe(config: &ExperimentConfig) -> String {
    format!(
        "{} on {} topology, {} clients, seeds {:?}",
        config.strategy.name(),
        config.topology.name(),
        config.n_clients,
        config.seeds
    )
}
