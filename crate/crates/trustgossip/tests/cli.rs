mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trustgossip"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn corpus_gen_then_stats_prints_a_jaccard_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", common::TINY);
    let o = cli(&["corpus", "gen", "--config", &cfg, "--out", "corpus"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("corpus/corpus.json").is_file());
    assert_eq!(fs::metadata(dir.path().join("corpus/category_0.u32")).unwrap().len(), 4 * 4000);

    let o = cli(&["corpus", "stats", "--dir", "corpus"], dir.path());
    assert_eq!(code(&o), 0);
    let out = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "category,0,1,2");
    assert_eq!(lines.len(), 4);
}

#[test]
fn pretrain_then_run_with_the_saved_base_and_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", common::TINY);
    assert_eq!(code(&cli(&["corpus", "gen", "--config", &cfg, "--out", "corpus"], dir.path())), 0);
    let o = cli(&["pretrain", "--config", &cfg, "--out", "base.ckpt"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let o = cli(
        &[
            "--threads", "2", "run", "--config", &cfg, "--out", "out", "--base", "base.ckpt", "--corpus", "corpus",
            "--seed-override", "7",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.starts_with("heterogeneity,strategy,mean_ppl,std,seeds\n"));
    assert!(summary.contains("high,strategy3,"));

    let runs: Vec<_> = fs::read_dir(dir.path().join("out")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run = runs.into_iter().next().unwrap().unwrap().path();
    let manifest = fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seeds\": [\n    7\n  ]"));
    // The saved base was reused rather than pretrained again.
    let (_, reused) = trustgossip::checkpoint::load_base(&run.join("base.ckpt")).unwrap();
    let (_, saved) = trustgossip::checkpoint::load_base(&dir.path().join("base.ckpt")).unwrap();
    assert_eq!(reused, saved);

    let run_s = run.to_string_lossy().into_owned();
    let o = cli(&["compare", "--runs", &run_s], dir.path());
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("heterogeneity,local,fedavg,strategy1,strategy3,oracle\nhigh,"));

    assert_eq!(code(&cli(&["figures", "--run", &run_s], dir.path())), 0);
    let o = cli(&["ring-table", "--full", &run_s, "--ring", &run_s, "--out", "ring.csv"], dir.path());
    assert_eq!(code(&o), 0);
    let ring = fs::read_to_string(dir.path().join("ring.csv")).unwrap();
    assert!(ring.starts_with("strategy,threshold,full_iterations,ring_iterations,ratio\n"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", "strategy = \"nope\"\n");
    assert_eq!(code(&cli(&["run", "--config", &bad], dir.path())), 2);
    let unknown = write_config(dir.path(), "unknown.json", "{\"strategies\": [\"local\"], \"colour\": 1}");
    assert_eq!(code(&cli(&["run", "--config", &unknown], dir.path())), 2);
    let wrong_vocab = write_config(dir.path(), "v.toml", &common::TINY.replace("vocab = 48", "vocab = 64"));
    assert_eq!(code(&cli(&["run", "--config", &wrong_vocab], dir.path())), 2);
    assert_eq!(code(&cli(&["run", "--config", "missing.yaml"], dir.path())), 2);
    assert_eq!(code(&cli(&["run"], dir.path())), 2, "missing argument");
}

#[test]
fn numeric_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let text = common::TINY.replace("lr = 0.05", "lr = 1e300");
    let cfg = write_config(dir.path(), "explode.toml", &text);
    let o = cli(&["run", "--config", &cfg, "--out", "out"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_run_directories_are_plain_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["figures", "--run", "nowhere"], dir.path());
    assert_eq!(code(&o), 1);
}
