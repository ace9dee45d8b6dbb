use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trustgossip::config::RunConfig;
use trustgossip::driver::{self, RunOptions};
use trustgossip::error::{exit, AppError, Result};
use trustgossip::exec::Parallel;
use trustgossip::{checkpoint, corpus_io, report};
use trustgossip_core::model::perplexity;
use trustgossip_core::protocol::build_world;

#[derive(Parser)]
#[command(name = "trustgossip", version, about = "Trust-weighted gossip fine-tuning of low-rank adapters, simulated")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or inspect synthetic category corpora.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
    /// Pretrain the shared base model and save it as a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Run the experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds replacing the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        /// Output root; the run goes to `<out>/<run-id>/`.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Pretrained base checkpoint to reuse.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Corpus directory written by `corpus gen`.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Side-by-side table of final perplexities from several runs.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-emit trust heatmaps, trust CSVs and drift series for a run.
    Figures {
        #[arg(long)]
        run: PathBuf,
    },
    /// Iterations a ring topology needs relative to a full one.
    RingTable {
        #[arg(long)]
        full: PathBuf,
        #[arg(long)]
        ring: PathBuf,
        /// Target perplexity; defaults to each strategy's full-topology final value.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Write one token file per category plus a JSON manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print token counts and the pairwise Jaccard matrix.
    Stats {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| AppError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(AppError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| AppError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Corpus { command } => match command {
            CorpusCommand::Gen { config, out } => {
                let config = RunConfig::load(&config)?;
                let corpora = driver::load_or_generate_corpora(&config, None)?;
                let files = corpus_io::write_corpora(&out, &config.data.corpus, &corpora)?;
                for f in files {
                    eprintln!("wrote {}", f.display());
                }
                Ok(())
            }
            CorpusCommand::Stats { dir } => {
                let (manifest, corpora) = corpus_io::read_corpora(&dir)?;
                for c in &corpora {
                    let mut distinct = c.tokens.clone();
                    distinct.sort_unstable();
                    distinct.dedup();
                    eprintln!(
                        "category {}: {} tokens, {} distinct of {}",
                        c.category_id,
                        c.tokens.len(),
                        distinct.len(),
                        manifest.vocab_size
                    );
                }
                print!("{}", corpus_io::jaccard_csv(&corpora)?);
                Ok(())
            }
        },
        Command::Pretrain { config, out, corpus } => {
            let config = RunConfig::load(&config)?;
            let corpora = driver::load_or_generate_corpora(&config, corpus.as_deref())?;
            let world = build_world(corpora, &config.data, config.n_clients)?;
            let base = driver::load_or_pretrain_base(&config, &world, None)?;
            let mean_test = world
                .data
                .clients
                .iter()
                .map(|c| perplexity(&base, None, &c.test))
                .collect::<trustgossip_core::Result<Vec<f64>>>()?;
            let ppl = mean_test.iter().sum::<f64>() / mean_test.len() as f64;
            checkpoint::save_base(&out, &base, serde_json::json!({ "pretrain": config.pretrain, "client_test_ppl": ppl }))?;
            eprintln!("wrote {} (mean client test perplexity {ppl:.3})", out.display());
            Ok(())
        }
        Command::Run {
            config,
            seed_override,
            out,
            base,
            corpus,
        } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(seeds) = seed_override {
                config.seeds = seeds;
            }
            let output = driver::run(
                &config,
                &RunOptions {
                    out_root: out,
                    base,
                    corpus,
                },
                &Parallel,
            )?;
            print!("{}", report::summary_csv(&output.summary));
            eprintln!("run written to {}", output.dir.display());
            Ok(())
        }
        Command::Compare { runs, out } => {
            let rows = driver::compare(&runs)?;
            emit(out.as_deref(), &report::comparison_table(&rows))
        }
        Command::Figures { run } => {
            let files = driver::figures(&run)?;
            eprintln!("wrote {} files", files.len());
            Ok(())
        }
        Command::RingTable {
            full,
            ring,
            threshold,
            out,
        } => {
            let rows = driver::ring_table(&full, &ring, threshold)?;
            emit(out.as_deref(), &report::ring_csv(&rows))
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
