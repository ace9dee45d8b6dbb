//! Cross-seed summaries and the ring-versus-full comparison.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Heterogeneity;
use crate::error::{Error, Result};
use crate::math;
use crate::protocol::{rounds_to_threshold, ExperimentResult, Strategy};

/// Ring runs needing more than this multiple of the full-topology
/// iterations count as not reaching the threshold.
pub const RING_CAP: f64 = 10.0;

/// Final test perplexity of one client in one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalPpl {
    pub seed: u64,
    pub client: usize,
    pub ppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub heterogeneity: Heterogeneity,
    pub strategy: Strategy,
    pub mean_ppl: f64,
    /// Sample std over seeds; absent with fewer than two seeds.
    pub std: Option<f64>,
    pub seeds: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn get(&self, heterogeneity: Heterogeneity, strategy: Strategy) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.heterogeneity == heterogeneity && r.strategy == strategy)
    }
}

pub fn final_records(result: &ExperimentResult) -> Vec<FinalPpl> {
    result
        .runs
        .iter()
        .flat_map(|run| {
            run.final_ppl()
                .into_iter()
                .enumerate()
                .map(move |(client, ppl)| FinalPpl { seed: run.seed, client, ppl })
        })
        .collect()
}

/// Mean over clients per seed, then mean and sample std over seeds. The
/// record order does not matter.
pub fn summary_row(heterogeneity: Heterogeneity, strategy: Strategy, records: &[FinalPpl]) -> Result<SummaryRow> {
    let mut by_seed: BTreeMap<u64, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in records {
        if by_seed.entry(r.seed).or_default().insert(r.client, r.ppl).is_some() {
            return Err(Error::IncompatibleResults(format!(
                "duplicate final perplexity for seed {} client {}",
                r.seed, r.client
            )));
        }
    }
    if by_seed.is_empty() {
        return Err(Error::IncompatibleResults("no final perplexities".into()));
    }
    let per_seed: Vec<f64> = by_seed
        .values()
        .map(|clients| clients.values().sum::<f64>() / clients.len() as f64)
        .collect();
    let (mean_ppl, std) = math::mean_std(&per_seed);
    Ok(SummaryRow {
        heterogeneity,
        strategy,
        mean_ppl,
        std,
        seeds: per_seed.len(),
    })
}

/// One row per (heterogeneity, strategy). All results must share the model,
/// client count and schedule.
pub fn summarize(results: &[ExperimentResult]) -> Result<SummaryTable> {
    let Some(first) = results.first() else {
        return Ok(SummaryTable::default());
    };
    let mut rows: Vec<SummaryRow> = Vec::with_capacity(results.len());
    for r in results {
        let (a, b) = (&first.config, &r.config);
        if a.model != b.model || a.n_clients != b.n_clients || a.schedule != b.schedule || a.training != b.training {
            return Err(Error::IncompatibleResults(format!(
                "{} and {} were run with different model or schedule settings",
                a.strategy.name(),
                b.strategy.name()
            )));
        }
        if rows
            .iter()
            .any(|row| row.strategy == r.strategy() && row.heterogeneity == r.heterogeneity)
        {
            return Err(Error::IncompatibleResults(format!(
                "{} appears twice for {} heterogeneity",
                r.strategy().name(),
                r.heterogeneity.as_str()
            )));
        }
        rows.push(summary_row(r.heterogeneity, r.strategy(), &final_records(r))?);
    }
    Ok(SummaryTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RingRow {
    pub strategy: Strategy,
    pub threshold: f64,
    /// Local iterations needed to reach the threshold.
    pub full_iterations: Option<usize>,
    pub ring_iterations: Option<usize>,
    /// `ring_iterations / full_iterations`; `None` prints as NA.
    pub ratio: Option<f64>,
}

/// Iterations the ring topology needs relative to the full topology to
/// reach `threshold`. The runs must differ only in topology and total
/// iteration budget.
pub fn ring_row(full: &ExperimentResult, ring: &ExperimentResult, threshold: f64) -> Result<RingRow> {
    let (a, b) = (&full.config, &ring.config);
    let paired = a.strategy == b.strategy
        && a.n_clients == b.n_clients
        && a.seeds == b.seeds
        && a.model == b.model
        && a.training == b.training
        && a.top_k == b.top_k
        && a.temperature == b.temperature
        && a.ft_fraction == b.ft_fraction
        && a.schedule.warmup_iterations == b.schedule.warmup_iterations
        && a.schedule.comm_period == b.schedule.comm_period
        && a.schedule.outer_lr == b.schedule.outer_lr
        && full.heterogeneity == ring.heterogeneity;
    if !paired {
        return Err(Error::InvalidInput(format!(
            "runs of {} and {} are not a topology pair",
            a.strategy.name(),
            b.strategy.name()
        )));
    }
    let full_iterations = rounds_to_threshold(full, threshold).map(|r| a.schedule.iterations_at(r));
    let ring_iterations = rounds_to_threshold(ring, threshold).map(|r| b.schedule.iterations_at(r));
    let ratio = match (full_iterations, ring_iterations) {
        (Some(f), Some(r)) if f == r => Some(1.0),
        (Some(f), Some(r)) if f > 0 => Some(r as f64 / f as f64).filter(|x| *x <= RING_CAP),
        _ => None,
    };
    Ok(RingRow {
        strategy: a.strategy,
        threshold,
        full_iterations,
        ring_iterations,
        ratio,
    })
}

/// Perplexity decrease per trainable parameter relative to the base, per
/// seed-averaged final client perplexity.
pub fn ratio_metric_of(result: &ExperimentResult) -> f64 {
    let base = result.base_ppl.iter().sum::<f64>() / result.base_ppl.len() as f64;
    crate::model::ratio_metric(
        base,
        result.final_mean_std().0,
        crate::model::count_trainable_params(&result.config.model),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(seed: u64, client: usize, ppl: f64) -> FinalPpl {
        FinalPpl { seed, client, ppl }
    }

    #[test]
    fn single_seed_has_no_std() {
        let row = summary_row(Heterogeneity::High, Strategy::Local, &[rec(0, 0, 10.0), rec(0, 1, 20.0)]).unwrap();
        assert_eq!(row.mean_ppl, 15.0);
        assert_eq!(row.std, None);
        assert_eq!(row.seeds, 1);
    }

    #[test]
    fn identical_seeds_have_zero_std() {
        let recs = [rec(0, 0, 4.0), rec(0, 1, 6.0), rec(1, 0, 6.0), rec(1, 1, 4.0)];
        let row = summary_row(Heterogeneity::Low, Strategy::Fedavg, &recs).unwrap();
        assert_eq!(row.mean_ppl, 5.0);
        assert_eq!(row.std, Some(0.0));
    }

    #[test]
    fn clients_are_averaged_before_seeds() {
        // Seed means 2 and 4; sample std is sqrt(2).
        let recs = [rec(1, 0, 1.0), rec(1, 1, 3.0), rec(0, 0, 4.0)];
        let row = summary_row(Heterogeneity::High, Strategy::Oracle, &recs).unwrap();
        assert_eq!(row.mean_ppl, 3.0);
        assert!((row.std.unwrap() - math::sqrt(2.0)).abs() < 1e-15);
        let mut shuffled = recs;
        shuffled.reverse();
        assert_eq!(summary_row(Heterogeneity::High, Strategy::Oracle, &shuffled).unwrap(), row);
    }

    #[test]
    fn duplicates_and_empty_input_are_rejected() {
        assert!(summary_row(Heterogeneity::High, Strategy::Local, &[]).is_err());
        let dup = vec![rec(0, 0, 1.0), rec(0, 0, 2.0)];
        assert!(summary_row(Heterogeneity::High, Strategy::Local, &dup).is_err());
    }
}
