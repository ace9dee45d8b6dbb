//! CSV tables, trust heatmaps and the cross-run comparison tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trustgossip_core::corpus::Heterogeneity;
use trustgossip_core::model::count_trainable_params;
use trustgossip_core::protocol::{ExperimentResult, Strategy};
use trustgossip_core::summary::{ratio_metric_of, summary_row, FinalPpl, RingRow, SummaryRow, SummaryTable};
use trustgossip_core::trust::TrustMatrix;
use trustgossip_core::Error as CoreError;

use crate::error::{AppError, Result};

/// Side length in pixels of one trust entry in the heatmaps.
pub const PGM_CELL: usize = 16;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is UTF-8")
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| AppError::format(path, e.to_string()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| AppError::format(path, e.to_string()))
}

/// Shortest decimal that parses back to the same value.
fn exact(x: f64) -> String {
    format!("{x}")
}

/// Seventeen significant digits.
fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

// ---------------------------------------------------------------- results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub strategy: Strategy,
    pub client: usize,
    pub seed: u64,
    pub round: usize,
    pub test_ppl: f64,
}

pub fn result_rows(result: &ExperimentResult) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for run in &result.runs {
        for (client, traj) in run.test_ppl.iter().enumerate() {
            for (round, &test_ppl) in traj.iter().enumerate() {
                rows.push(ResultRow {
                    strategy: result.strategy(),
                    client,
                    seed: run.seed,
                    round,
                    test_ppl,
                });
            }
        }
    }
    rows
}

pub fn results_csv(results: &[ExperimentResult]) -> String {
    csv_text(
        &["strategy", "client", "seed", "round", "test_ppl"],
        results.iter().flat_map(result_rows).map(|r| {
            vec![
                r.strategy.name().to_string(),
                r.client.to_string(),
                r.seed.to_string(),
                r.round.to_string(),
                exact(r.test_ppl),
            ]
        }),
    )
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    read_csv(path)
}

/// Rebuilds the summary from persisted per-round rows: the last round of
/// each (strategy, seed, client) is its final perplexity. Strategies keep
/// their order of first appearance.
pub fn summary_from_rows(heterogeneity: Heterogeneity, rows: &[ResultRow]) -> trustgossip_core::Result<SummaryTable> {
    let mut order: Vec<Strategy> = Vec::new();
    let mut last: BTreeMap<(Strategy, u64, usize), (usize, f64)> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.strategy) {
            order.push(r.strategy);
        }
        let slot = last.entry((r.strategy, r.seed, r.client)).or_insert((r.round, r.test_ppl));
        if r.round > slot.0 {
            *slot = (r.round, r.test_ppl);
        } else if r.round == slot.0 && r.test_ppl.to_bits() != slot.1.to_bits() {
            return Err(CoreError::IncompatibleResults(format!(
                "conflicting rows for {} seed {} client {} round {}",
                r.strategy.name(),
                r.seed,
                r.client,
                r.round
            )));
        }
    }
    let rows = order
        .into_iter()
        .map(|s| {
            let finals: Vec<FinalPpl> = last
                .iter()
                .filter(|((st, _, _), _)| *st == s)
                .map(|(&(_, seed, client), &(_, ppl))| FinalPpl { seed, client, ppl })
                .collect();
            summary_row(heterogeneity, s, &finals)
        })
        .collect::<trustgossip_core::Result<Vec<SummaryRow>>>()?;
    Ok(SummaryTable { rows })
}

pub fn summary_csv(table: &SummaryTable) -> String {
    csv_text(
        &["heterogeneity", "strategy", "mean_ppl", "std", "seeds"],
        table.rows.iter().map(|r| {
            vec![
                r.heterogeneity.as_str().to_string(),
                r.strategy.name().to_string(),
                exact(r.mean_ppl),
                r.std.map(exact).unwrap_or_default(),
                r.seeds.to_string(),
            ]
        }),
    )
}

pub fn read_summary_csv(path: &Path) -> Result<SummaryTable> {
    Ok(SummaryTable { rows: read_csv(path)? })
}

pub fn ledger_csv(results: &[ExperimentResult]) -> String {
    csv_text(
        &["strategy", "seed", "round", "client", "kind", "bytes", "recipients"],
        results.iter().flat_map(|res| {
            res.ledger.records.iter().map(move |r| {
                vec![
                    res.strategy().name().to_string(),
                    r.seed.to_string(),
                    r.round.to_string(),
                    r.client.to_string(),
                    r.kind.name().to_string(),
                    r.bytes.to_string(),
                    r.recipients.to_string(),
                ]
            })
        }),
    )
}

pub fn ledger_totals_csv(results: &[ExperimentResult]) -> String {
    csv_text(
        &["strategy", "messages", "total_bytes", "transmitted_bytes"],
        results.iter().map(|r| {
            vec![
                r.strategy().name().to_string(),
                r.ledger.records.len().to_string(),
                r.ledger.total_bytes().to_string(),
                r.ledger.transmitted_bytes().to_string(),
            ]
        }),
    )
}

// ---------------------------------------------------------------- trust

pub fn trust_csv(w: &TrustMatrix) -> String {
    let n = w.n();
    let mut header = vec!["client".to_string()];
    header.extend((0..n).map(|j| j.to_string()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_text(
        &header,
        (0..n).map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(w.row(i).iter().map(|&x| sig17(x)));
            row
        }),
    )
}

/// 8-bit binary PGM. Off-diagonal entries scale to the largest off-diagonal
/// value; the diagonal is masked to 0.
pub fn trust_pgm(w: &TrustMatrix) -> Vec<u8> {
    let n = w.n();
    let max = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| w.get(i, j))
        .fold(0.0f64, f64::max);
    let side = n * PGM_CELL;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for py in 0..side {
        for px in 0..side {
            let (i, j) = (py / PGM_CELL, px / PGM_CELL);
            let v = if i == j || max <= 0.0 {
                0
            } else {
                (w.get(i, j) / max * 255.0).round().clamp(0.0, 255.0) as u8
            };
            out.push(v);
        }
    }
    out
}

/// Rounds are numbered from 1 in file names.
fn trust_dir(root: &Path, strategy: Strategy, seed_index: usize, seed: u64) -> PathBuf {
    let base = root.join("trust").join(strategy.name());
    if seed_index == 0 {
        base
    } else {
        base.join(format!("seed_{seed}"))
    }
}

/// Trust CSVs and heatmaps for every round, the drift series and the ratio
/// metric. The first seed's matrices go directly under
/// `trust/<strategy>/`, later seeds under `trust/<strategy>/seed_<s>/`.
/// Returns every written path.
pub fn emit_figures(root: &Path, result: &ExperimentResult) -> Result<Vec<PathBuf>> {
    let strategy = result.strategy();
    let mut written = Vec::new();
    if strategy != Strategy::Local {
        if result.runs.iter().any(|r| r.trust.is_empty()) {
            return Err(CoreError::InvalidState(format!("{} run has no trust history", strategy.name())).into());
        }
        let mut drift_rows = Vec::new();
        for (k, run) in result.runs.iter().enumerate() {
            let dir = trust_dir(root, strategy, k, run.seed);
            for (t, w) in run.trust.iter().enumerate() {
                let csv_path = dir.join(format!("round_{}.csv", t + 1));
                write_text(&csv_path, &trust_csv(w))?;
                let pgm_path = dir.join(format!("round_{}.pgm", t + 1));
                write_bytes(&pgm_path, &trust_pgm(w))?;
                written.extend([csv_path, pgm_path]);
            }
            for (t, d) in run.drift.iter().enumerate() {
                drift_rows.push(vec![run.seed.to_string(), (t + 2).to_string(), sig17(*d)]);
            }
        }
        let path = root.join("trust").join(strategy.name()).join("drift.csv");
        write_text(&path, &csv_text(&["seed", "round", "drift_l1"], drift_rows))?;
        written.push(path);
    }
    Ok(written)
}

pub fn ratio_metric_csv(results: &[ExperimentResult]) -> String {
    csv_text(
        &["strategy", "base_ppl", "final_ppl", "trainable_params", "ppl_decrease_per_param"],
        results.iter().map(|r| {
            let base = r.base_ppl.iter().sum::<f64>() / r.base_ppl.len() as f64;
            vec![
                r.strategy().name().to_string(),
                exact(base),
                exact(r.final_mean_std().0),
                count_trainable_params(&r.config.model).to_string(),
                exact(ratio_metric_of(r)),
            ]
        }),
    )
}

// ---------------------------------------------------------------- comparisons

/// One row per heterogeneity level and one column per strategy, each cell
/// `mean (std)`. Strategies appear in their canonical order.
pub fn comparison_table(rows: &[SummaryRow]) -> String {
    let strategies: Vec<Strategy> = Strategy::ALL
        .into_iter()
        .filter(|s| rows.iter().any(|r| r.strategy == *s))
        .collect();
    let mut levels: Vec<Heterogeneity> = Vec::new();
    for r in rows {
        if !levels.contains(&r.heterogeneity) {
            levels.push(r.heterogeneity);
        }
    }
    levels.sort();
    let mut header = vec!["heterogeneity"];
    header.extend(strategies.iter().map(|s| s.name()));
    csv_text(
        &header,
        levels.iter().map(|&h| {
            let mut row = vec![h.as_str().to_string()];
            for &s in &strategies {
                let cell = rows
                    .iter()
                    .find(|r| r.heterogeneity == h && r.strategy == s)
                    .map(|r| match r.std {
                        Some(sd) => format!("{:.2} ({:.2})", r.mean_ppl, sd),
                        None => format!("{:.2}", r.mean_ppl),
                    })
                    .unwrap_or_default();
                row.push(cell);
            }
            row
        }),
    )
}

pub fn ring_csv(rows: &[RingRow]) -> String {
    let opt = |x: Option<usize>| x.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
    csv_text(
        &["strategy", "threshold", "full_iterations", "ring_iterations", "ratio"],
        rows.iter().map(|r| {
            vec![
                r.strategy.name().to_string(),
                exact(r.threshold),
                opt(r.full_iterations),
                opt(r.ring_iterations),
                r.ratio.map(exact).unwrap_or_else(|| "NA".into()),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use trustgossip_core::trust::TrustSource;

    #[test]
    fn trust_csv_keeps_seventeen_digits() {
        let w = TrustMatrix::from_rows(2, vec![1.0 / 3.0, 2.0 / 3.0, 0.5, 0.5], TrustSource::Custom).unwrap();
        let text = trust_csv(&w);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "client,0,1");
        assert_eq!(lines[1], "0,3.3333333333333331e-1,6.6666666666666663e-1");
        let back: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(back, 1.0 / 3.0);
    }

    #[test]
    fn heatmap_masks_the_diagonal_and_scales_off_diagonal() {
        let w = TrustMatrix::from_rows(3, vec![0.8, 0.1, 0.1, 0.2, 0.6, 0.2, 0.05, 0.15, 0.8], TrustSource::Custom).unwrap();
        let pgm = trust_pgm(&w);
        let side = 3 * PGM_CELL;
        let header = format!("P5\n{side} {side}\n255\n");
        assert!(pgm.starts_with(header.as_bytes()));
        let px = &pgm[header.len()..];
        assert_eq!(px.len(), side * side);
        let at = |i: usize, j: usize| px[(i * PGM_CELL + 3) * side + j * PGM_CELL + 5];
        for i in 0..3 {
            assert_eq!(at(i, i), 0);
        }
        assert_eq!(at(1, 0), 255);
        assert_eq!(at(1, 2), 255);
        assert_eq!(at(0, 1), 128);
    }

    #[test]
    fn ring_csv_prints_na() {
        let rows = vec![RingRow {
            strategy: Strategy::Strategy3,
            threshold: 1.5,
            full_iterations: Some(100),
            ring_iterations: None,
            ratio: None,
        }];
        assert_eq!(
            ring_csv(&rows),
            "strategy,threshold,full_iterations,ring_iterations,ratio\nstrategy3,1.5,100,NA,NA\n"
        );
    }

    #[test]
    fn comparison_table_is_wide() {
        let rows = vec![
            SummaryRow {
                heterogeneity: Heterogeneity::High,
                strategy: Strategy::Strategy3,
                mean_ppl: 100.0,
                std: Some(1.25),
                seeds: 3,
            },
            SummaryRow {
                heterogeneity: Heterogeneity::High,
                strategy: Strategy::Local,
                mean_ppl: 110.0,
                std: None,
                seeds: 1,
            },
        ];
        assert_eq!(
            comparison_table(&rows),
            "heterogeneity,local,strategy3\nhigh,110.00,100.00 (1.25)\n"
        );
    }
}
