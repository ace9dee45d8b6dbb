//! Runs experiments end to end and writes the run directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use trustgossip_core::corpus::{Heterogeneity, TokenCorpus};
use trustgossip_core::exec::Executor;
use trustgossip_core::model::{pretrain_base, TinyLM};
use trustgossip_core::protocol::{build_world, generate_world_corpora, run_experiment, ExperimentResult, Strategy, World};
use trustgossip_core::summary::{ring_row, summarize, RingRow, SummaryRow, SummaryTable};
use trustgossip_core::Error as CoreError;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus_io;
use crate::error::{AppError, Result};
use crate::manifest::{unix_now, RunManifest, MANIFEST_NAME};
use crate::report;

pub const CONFIG_NAME: &str = "config.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_root: PathBuf,
    /// Reuse a pretrained base instead of pretraining one.
    pub base: Option<PathBuf>,
    /// Read corpora from a directory written by `corpus gen`.
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub results: Vec<ExperimentResult>,
    pub summary: SummaryTable,
}

/// Corpora from `dir` when given (their generation config must match), or
/// freshly generated.
pub fn load_or_generate_corpora(config: &RunConfig, dir: Option<&Path>) -> Result<Vec<TokenCorpus>> {
    match dir {
        Some(dir) => {
            let (manifest, corpora) = corpus_io::read_corpora(dir)?;
            if manifest.config != config.data.corpus {
                return Err(AppError::config(
                    dir.join(corpus_io::MANIFEST_NAME),
                    "corpus was generated with different settings than the run config",
                ));
            }
            Ok(corpora)
        }
        None => Ok(generate_world_corpora(&config.data)?),
    }
}

pub fn load_or_pretrain_base(config: &RunConfig, world: &World, path: Option<&Path>) -> Result<TinyLM> {
    match path {
        Some(p) => {
            let (_, base) = checkpoint::load_base(p)?;
            if base.config() != &config.model {
                return Err(AppError::config(p, "checkpoint model differs from the run config model"));
            }
            Ok(base)
        }
        None => Ok(pretrain_base(&config.model, &world.pretrain, &config.pretrain)?),
    }
}

fn result_path(dir: &Path, strategy: Strategy) -> PathBuf {
    dir.join("results").join(format!("{}.json", strategy.name()))
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| AppError::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Clears a previous run in `dir`; refuses to touch directories that are
/// not run directories.
fn fresh_run_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let empty = fs::read_dir(dir).map_err(|e| AppError::io(dir, e))?.next().is_none();
        if !empty {
            if !dir.join(MANIFEST_NAME).is_file() {
                return Err(AppError::Usage(format!(
                    "{} exists and is not a run directory",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))
}

pub fn run<E: Executor>(config: &RunConfig, options: &RunOptions, exec: &E) -> Result<RunOutput> {
    config.validate()?;
    let started_at = unix_now();
    let corpora = load_or_generate_corpora(config, options.corpus.as_deref())?;
    let corpus_hash = corpus_io::content_hash(&corpora);
    let world = build_world(corpora, &config.data, config.n_clients)?;
    let base = load_or_pretrain_base(config, &world, options.base.as_deref())?;

    let results = config
        .strategies
        .iter()
        .map(|&s| run_experiment(&config.experiment(s), &world.data, &base, exec))
        .collect::<trustgossip_core::Result<Vec<_>>>()?;
    let summary = summarize(&results)?;

    let run_id = config.run_id();
    let dir = options.out_root.join(&run_id);
    fresh_run_dir(&dir)?;
    let mut files = vec![
        write(&dir.join(CONFIG_NAME), &serde_json::to_string_pretty(config).expect("config serialises"))?,
        write(&dir.join("results.csv"), &report::results_csv(&results))?,
        write(&dir.join("summary.csv"), &report::summary_csv(&summary))?,
        write(&dir.join("ledger.csv"), &report::ledger_csv(&results))?,
        write(&dir.join("ledger_totals.csv"), &report::ledger_totals_csv(&results))?,
    ];
    let base_path = dir.join("base.ckpt");
    checkpoint::save_base(&base_path, &base, serde_json::json!({ "pretrain": config.pretrain }))?;
    files.push(base_path);
    for r in &results {
        files.push(write(
            &result_path(&dir, r.strategy()),
            &serde_json::to_string(r).expect("result serialises"),
        )?);
        for run in &r.runs {
            for (client, adapters) in run.final_adapters.iter().enumerate() {
                let path = dir
                    .join("adapters")
                    .join(r.strategy().name())
                    .join(format!("seed_{}", run.seed))
                    .join(format!("client_{client}.ckpt"));
                let meta = serde_json::json!({ "strategy": r.strategy(), "seed": run.seed, "client": client });
                checkpoint::save_adapters(&path, &config.model, adapters, meta)?;
                files.push(path);
            }
        }
    }
    files.extend(figures_for(&dir, &results)?);

    let mut manifest = RunManifest {
        run_id,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: config.hash(),
        corpus_hash,
        strategies: config.strategies.clone(),
        seeds: config.seeds.clone(),
        started_at,
        finished_at: unix_now(),
        files: BTreeSet::new(),
    };
    manifest.add_files(&dir, &files)?;
    manifest.write(&dir)?;
    Ok(RunOutput {
        dir,
        manifest,
        results,
        summary,
    })
}

fn figures_for(dir: &Path, results: &[ExperimentResult]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for r in results {
        files.extend(report::emit_figures(dir, r)?);
    }
    files.push(write(&dir.join("ratio_metric.csv"), &report::ratio_metric_csv(results))?);
    Ok(files)
}

pub fn load_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_NAME);
    let text = fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::format(&path, e.to_string()))
}

pub fn load_results(dir: &Path) -> Result<Vec<ExperimentResult>> {
    let config = load_config(dir)?;
    config
        .strategies
        .iter()
        .map(|&s| {
            let path = result_path(dir, s);
            let text = fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
            serde_json::from_str(&text).map_err(|e| AppError::format(&path, e.to_string()))
        })
        .collect()
}

/// Re-emits the trust artifacts and ratio table of a finished run and
/// records them in its manifest.
pub fn figures(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut manifest = RunManifest::read(dir)?;
    let results = load_results(dir)?;
    let files = figures_for(dir, &results)?;
    manifest.add_files(dir, &files)?;
    manifest.write(dir)?;
    Ok(files)
}

/// Summary of one run directory, rebuilt from its `results.csv`.
pub fn summary_of_run(dir: &Path) -> Result<(RunConfig, SummaryTable)> {
    let config = load_config(dir)?;
    let rows = report::read_results_csv(&dir.join("results.csv"))?;
    let table = report::summary_from_rows(config.data.heterogeneity, &rows)?;
    Ok((config, table))
}

/// Summary rows across runs, which must share model, client count,
/// schedule and local optimiser settings.
pub fn compare(dirs: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    let mut first: Option<RunConfig> = None;
    let mut rows: Vec<SummaryRow> = Vec::new();
    for dir in dirs {
        let (config, table) = summary_of_run(dir)?;
        if let Some(f) = &first {
            if f.model != config.model || f.n_clients != config.n_clients || f.schedule != config.schedule || f.training != config.training {
                return Err(CoreError::IncompatibleResults(format!(
                    "{} was run with different model or schedule settings",
                    dir.display()
                ))
                .into());
            }
        } else {
            first = Some(config);
        }
        for row in table.rows {
            if rows.iter().any(|r| r.strategy == row.strategy && r.heterogeneity == row.heterogeneity) {
                return Err(CoreError::IncompatibleResults(format!(
                    "{} at {} heterogeneity appears in more than one run",
                    row.strategy.name(),
                    row.heterogeneity.as_str()
                ))
                .into());
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Ring-versus-full rows for every strategy present in both runs. Without
/// an explicit threshold each strategy uses its full-topology final mean
/// perplexity.
pub fn ring_table(full_dir: &Path, ring_dir: &Path, threshold: Option<f64>) -> Result<Vec<RingRow>> {
    let full = load_results(full_dir)?;
    let ring = load_results(ring_dir)?;
    let mut rows = Vec::new();
    for f in &full {
        if let Some(r) = ring.iter().find(|r| r.strategy() == f.strategy()) {
            let thr = threshold.unwrap_or_else(|| f.final_mean_std().0);
            rows.push(ring_row(f, r, thr)?);
        }
    }
    if rows.is_empty() {
        return Err(CoreError::InvalidInput("the runs share no strategy".into()).into());
    }
    Ok(rows)
}

pub fn heterogeneity_of(results: &[ExperimentResult]) -> Option<Heterogeneity> {
    results.first().map(|r| r.heterogeneity)
}
