mod common;

use std::fs;

use trustgossip::driver::{self, RunOptions};
use trustgossip::exec::Parallel;
use trustgossip::manifest::RunManifest;
use trustgossip::{checkpoint, report};
use trustgossip_core::exec::Sequential;
use trustgossip_core::protocol::{Strategy, Topology};
use trustgossip_core::summary::{summarize, RING_CAP};

fn options(root: &std::path::Path) -> RunOptions {
    RunOptions {
        out_root: root.to_path_buf(),
        ..RunOptions::default()
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let config = common::tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let seq = driver::run(&config, &options(a.path()), &Sequential).unwrap();
    let par = driver::run(&config, &options(b.path()), &Parallel).unwrap();
    assert_eq!(seq.results, par.results);
    let files = common::files_below(&seq.dir);
    assert_eq!(files, common::files_below(&par.dir));
    for f in files.iter().filter(|f| f.as_str() != "manifest.json") {
        assert_eq!(
            fs::read(seq.dir.join(f)).unwrap(),
            fs::read(par.dir.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn run_directory_is_complete_and_self_describing() {
    let config = common::tiny();
    let root = tempfile::tempdir().unwrap();
    let out = driver::run(&config, &options(root.path()), &Sequential).unwrap();
    assert_eq!(out.dir, root.path().join(config.run_id()));

    // The manifest lists exactly the files on disk, itself excepted.
    let manifest = RunManifest::read(&out.dir).unwrap();
    let on_disk: Vec<String> = common::files_below(&out.dir)
        .into_iter()
        .filter(|f| f != "manifest.json")
        .collect();
    assert_eq!(manifest.files.iter().cloned().collect::<Vec<_>>(), on_disk);
    assert_eq!(manifest.config_hash, config.hash());
    assert_eq!(manifest.seeds, vec![0, 1]);
    assert!(manifest.started_at <= manifest.finished_at);
    assert_eq!(manifest.corpus_hash.len(), 64);

    for name in ["results.csv", "summary.csv", "ledger.csv", "config.json", "base.ckpt"] {
        assert!(on_disk.iter().any(|f| f == name), "{name} missing");
    }
    // Local training exchanges nothing and gets no trust artifacts.
    assert!(!on_disk.iter().any(|f| f.starts_with("trust/local")));
    // Learned strategies: one CSV and heatmap per round, for every seed.
    let rounds = config.schedule.rounds();
    for s in ["fedavg", "strategy1", "strategy3", "oracle"] {
        for t in 1..=rounds {
            assert!(on_disk.contains(&format!("trust/{s}/round_{t}.csv")));
            assert!(on_disk.contains(&format!("trust/{s}/round_{t}.pgm")));
            assert!(on_disk.contains(&format!("trust/{s}/seed_1/round_{t}.pgm")));
        }
        assert!(!on_disk.contains(&format!("trust/{s}/round_{}.csv", rounds + 1)));
        let drift = fs::read_to_string(out.dir.join(format!("trust/{s}/drift.csv"))).unwrap();
        // Header plus (rounds − 1) rows per seed.
        assert_eq!(drift.lines().count(), 1 + 2 * (rounds - 1));
    }

    // The saved base reloads to the model the run used.
    let (_, base) = checkpoint::load_base(&out.dir.join("base.ckpt")).unwrap();
    assert_eq!(base.config(), &config.model);
    let (_, adapters) =
        checkpoint::load_adapters(&out.dir.join("adapters/strategy3/seed_1/client_2.ckpt")).unwrap();
    let s3 = out.results.iter().find(|r| r.strategy() == Strategy::Strategy3).unwrap();
    assert_eq!(adapters, s3.runs[1].final_adapters[2]);
}

#[test]
fn heatmaps_mask_the_diagonal() {
    let config = common::tiny();
    let root = tempfile::tempdir().unwrap();
    let out = driver::run(&config, &options(root.path()), &Sequential).unwrap();
    let pgm = fs::read(out.dir.join("trust/strategy3/round_2.pgm")).unwrap();
    let side = 3 * report::PGM_CELL;
    let header = format!("P5\n{side} {side}\n255\n");
    assert!(pgm.starts_with(header.as_bytes()));
    let px = &pgm[header.len()..];
    for i in 0..3 {
        for dy in 0..report::PGM_CELL {
            for dx in 0..report::PGM_CELL {
                let y = i * report::PGM_CELL + dy;
                let x = i * report::PGM_CELL + dx;
                assert_eq!(px[y * side + x], 0);
            }
        }
    }
    assert!(px.iter().any(|&p| p == 255), "largest off-diagonal entry maps to white");
}

#[test]
fn persisted_csvs_reproduce_the_summary_exactly() {
    let config = common::tiny();
    let root = tempfile::tempdir().unwrap();
    let out = driver::run(&config, &options(root.path()), &Sequential).unwrap();
    let in_memory = summarize(&out.results).unwrap();
    assert_eq!(out.summary, in_memory);
    let (_, from_results) = driver::summary_of_run(&out.dir).unwrap();
    assert_eq!(from_results, in_memory);
    let from_summary = report::read_summary_csv(&out.dir.join("summary.csv")).unwrap();
    assert_eq!(from_summary, in_memory);
    for row in &in_memory.rows {
        assert!(row.std.is_some(), "two seeds give a std");
    }

    // Hand average of the last round of results.csv for one strategy.
    let rows = report::read_results_csv(&out.dir.join("results.csv")).unwrap();
    let last_round = rows.iter().map(|r| r.round).max().unwrap();
    let mut per_seed = Vec::new();
    for seed in [0u64, 1] {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.strategy == Strategy::Fedavg && r.seed == seed && r.round == last_round)
            .map(|r| r.test_ppl)
            .collect();
        assert_eq!(v.len(), 3);
        per_seed.push(v.iter().sum::<f64>() / 3.0);
    }
    let hand = (per_seed[0] + per_seed[1]) / 2.0;
    let fedavg = in_memory.rows.iter().find(|r| r.strategy == Strategy::Fedavg).unwrap();
    assert!((fedavg.mean_ppl - hand).abs() <= 1e-12 * hand);
}

#[test]
fn figures_can_be_regenerated_from_a_finished_run() {
    let config = common::tiny();
    let root = tempfile::tempdir().unwrap();
    let out = driver::run(&config, &options(root.path()), &Sequential).unwrap();
    let before = fs::read(out.dir.join("trust/oracle/round_1.csv")).unwrap();
    fs::remove_dir_all(out.dir.join("trust")).unwrap();
    let files = driver::figures(&out.dir).unwrap();
    assert!(!files.is_empty());
    assert_eq!(fs::read(out.dir.join("trust/oracle/round_1.csv")).unwrap(), before);
    let manifest = RunManifest::read(&out.dir).unwrap();
    let on_disk: Vec<String> = common::files_below(&out.dir)
        .into_iter()
        .filter(|f| f != "manifest.json")
        .collect();
    assert_eq!(manifest.files.iter().cloned().collect::<Vec<_>>(), on_disk);
}

#[test]
fn rerunning_replaces_the_previous_run() {
    let config = common::tiny();
    let root = tempfile::tempdir().unwrap();
    let out = driver::run(&config, &options(root.path()), &Sequential).unwrap();
    fs::write(out.dir.join("stray.txt"), "left over").unwrap();
    driver::run(&config, &options(root.path()), &Sequential).unwrap();
    assert!(!out.dir.join("stray.txt").exists());

    // A directory that is not a run is never cleared.
    let mut named = config.clone();
    named.run_id = Some("precious".into());
    fs::create_dir_all(root.path().join("precious")).unwrap();
    fs::write(root.path().join("precious/notes.txt"), "keep").unwrap();
    assert!(driver::run(&named, &options(root.path()), &Sequential).is_err());
    assert!(root.path().join("precious/notes.txt").exists());
}

#[test]
fn compare_builds_one_row_per_heterogeneity() {
    let root = tempfile::tempdir().unwrap();
    let mut high = common::tiny();
    high.strategies = vec![Strategy::Local, Strategy::Strategy3];
    let mut low = high.clone();
    low.data.heterogeneity = trustgossip_core::corpus::Heterogeneity::Low;
    let a = driver::run(&high, &options(root.path()), &Sequential).unwrap();
    let b = driver::run(&low, &options(root.path()), &Sequential).unwrap();
    let rows = driver::compare(&[a.dir.clone(), b.dir.clone()]).unwrap();
    assert_eq!(rows.len(), 4);
    let table = report::comparison_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "heterogeneity,local,strategy3");
    assert!(lines[1].starts_with("low,"));
    assert!(lines[2].starts_with("high,"));

    // The same run twice is a duplicate.
    assert!(driver::compare(&[a.dir.clone(), a.dir.clone()]).is_err());
    // Different schedules do not mix.
    let mut longer = high.clone();
    longer.schedule.total_iterations = 30;
    longer.strategies = vec![Strategy::Fedavg];
    let c = driver::run(&longer, &options(root.path()), &Sequential).unwrap();
    assert!(driver::compare(&[a.dir, c.dir]).is_err());
}

#[test]
fn ring_table_pairs_runs_and_reports_na() {
    let root = tempfile::tempdir().unwrap();
    let mut full = common::tiny();
    full.strategies = vec![Strategy::Strategy3];
    let mut ring = full.clone();
    ring.topology = Topology::Ring;
    let f = driver::run(&full, &options(root.path()), &Sequential).unwrap();
    let r = driver::run(&ring, &options(root.path()), &Sequential).unwrap();

    let same = driver::ring_table(&f.dir, &f.dir, None).unwrap();
    assert_eq!(same[0].ratio, Some(1.0));

    let rows = driver::ring_table(&f.dir, &r.dir, None).unwrap();
    assert_eq!(rows.len(), 1);
    if let Some(ratio) = rows[0].ratio {
        assert!(ratio <= RING_CAP);
    }
    let unreachable = driver::ring_table(&f.dir, &r.dir, Some(1.0)).unwrap();
    assert_eq!(unreachable[0].ratio, None);
    assert!(report::ring_csv(&unreachable).contains("NA"));

    // Unpaired runs are rejected.
    let mut other = full.clone();
    other.training.lr = 0.04;
    let o = driver::run(&other, &options(root.path()), &Sequential).unwrap();
    assert!(driver::ring_table(&f.dir, &o.dir, None).is_err());
}
