#![allow(dead_code)]

use std::path::{Path, PathBuf};

use trustgossip::config::{ConfigFormat, RunConfig};

/// A run small enough to finish in about a second.
pub const TINY: &str = r#"
strategies = ["local", "fedavg", "strategy1", "strategy3", "oracle"]
n_clients = 3
seeds = [0, 1]
top_k = 6

[model]
vocab = 48
d_model = 16
context = 12
heads = 2
mlp_hidden = 32
lora_rank = 2

[training]
lr = 0.05
batch_size = 2

[schedule]
total_iterations = 24
warmup_iterations = 6
comm_period = 6

[data]
tokens_per_client = 400
shared_tokens = 60
pretrain_tokens = 900
chunk_len = 40

[data.corpus]
vocab_size = 48
shared_block_len = 12
tokens_per_category = 4000
seed = 5

[pretrain]
steps = 10
batch_size = 4
"#;

pub fn tiny() -> RunConfig {
    let c = RunConfig::parse(TINY, ConfigFormat::Toml).unwrap();
    c.validate().unwrap();
    c
}

/// Every regular file below `root`, relative, with `/` separators, sorted.
pub fn files_below(root: &Path) -> Vec<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path: PathBuf = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap();
                let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
                out.push(parts.join("/"));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
