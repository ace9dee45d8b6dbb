//! Corpus files: one flat little-endian u32 token file per category plus a
//! JSON manifest next to them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trustgossip_core::corpus::{jaccard_index, CorpusConfig, TokenCorpus};

use crate::error::{AppError, Result};

pub const MANIFEST_NAME: &str = "corpus.json";
const FORMAT: &str = "trustgossip-corpus";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub category_id: usize,
    pub vocab_size: usize,
    pub tokens: usize,
    /// File name relative to the manifest.
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub vocab_size: usize,
    pub seed: u64,
    pub config: CorpusConfig,
    pub categories: Vec<CategoryEntry>,
    pub content_hash: String,
}

pub fn encode_tokens(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
}

pub fn decode_tokens(bytes: &[u8]) -> Option<Vec<u32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

/// Content hash over all categories in order: each contributes its id,
/// token count and little-endian token bytes.
pub fn content_hash(corpora: &[TokenCorpus]) -> String {
    let mut h = Sha256::new();
    for c in corpora {
        h.update((c.category_id as u64).to_le_bytes());
        h.update((c.tokens.len() as u64).to_le_bytes());
        h.update(encode_tokens(&c.tokens));
    }
    hex::encode(h.finalize())
}

fn category_file(id: usize) -> String {
    format!("category_{id}.u32")
}

/// Writes the corpora and manifest into `dir`; returns every written path.
pub fn write_corpora(dir: &Path, config: &CorpusConfig, corpora: &[TokenCorpus]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut written = Vec::with_capacity(corpora.len() + 1);
    let mut categories = Vec::with_capacity(corpora.len());
    for c in corpora {
        let bytes = encode_tokens(&c.tokens);
        let name = category_file(c.category_id);
        let path = dir.join(&name);
        fs::write(&path, &bytes).map_err(|e| AppError::io(&path, e))?;
        categories.push(CategoryEntry {
            category_id: c.category_id,
            vocab_size: c.vocab_size,
            tokens: c.tokens.len(),
            file: name,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        written.push(path);
    }
    let manifest = CorpusManifest {
        format: FORMAT.into(),
        version: VERSION,
        vocab_size: config.vocab_size,
        seed: config.seed,
        config: config.clone(),
        categories,
        content_hash: content_hash(corpora),
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text).map_err(|e| AppError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Reads and verifies corpora written by [`write_corpora`].
pub fn read_corpora(dir: &Path) -> Result<(CorpusManifest, Vec<TokenCorpus>)> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| AppError::format(&path, e.to_string()))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(AppError::format(
            &path,
            format!("unsupported corpus format {} v{}", manifest.format, manifest.version),
        ));
    }
    let mut corpora = Vec::with_capacity(manifest.categories.len());
    for entry in &manifest.categories {
        if entry.file.contains(['/', '\\']) {
            return Err(AppError::format(&path, format!("category file {} is not local", entry.file)));
        }
        let file = dir.join(&entry.file);
        let bytes = fs::read(&file).map_err(|e| AppError::io(&file, e))?;
        if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
            return Err(AppError::format(&file, "checksum mismatch"));
        }
        let tokens = decode_tokens(&bytes).ok_or_else(|| AppError::format(&file, "length is not a multiple of 4"))?;
        if tokens.len() != entry.tokens {
            return Err(AppError::format(
                &file,
                format!("expected {} tokens, found {}", entry.tokens, tokens.len()),
            ));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= entry.vocab_size) {
            return Err(AppError::format(
                &file,
                format!("token {bad} outside vocabulary {}", entry.vocab_size),
            ));
        }
        corpora.push(TokenCorpus {
            category_id: entry.category_id,
            vocab_size: entry.vocab_size,
            tokens,
        });
    }
    if content_hash(&corpora) != manifest.content_hash {
        return Err(AppError::format(&path, "content hash mismatch"));
    }
    Ok((manifest, corpora))
}

/// Pairwise multiset Jaccard matrix as CSV with a header row.
pub fn jaccard_csv(corpora: &[TokenCorpus]) -> Result<String> {
    let mut out = String::from("category");
    for c in corpora {
        out.push_str(&format!(",{}", c.category_id));
    }
    out.push('\n');
    for a in corpora {
        out.push_str(&a.category_id.to_string());
        for b in corpora {
            out.push_str(&format!(",{}", jaccard_index(&a.tokens, &b.tokens)?));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use trustgossip_core::corpus::{generate_corpora, CategorySpec};

    fn small() -> (CorpusConfig, Vec<TokenCorpus>) {
        let config = CorpusConfig {
            vocab_size: 64,
            shared_block_len: 16,
            tokens_per_category: 500,
            ..CorpusConfig::default()
        };
        let specs = CategorySpec::family(&config).unwrap();
        let corpora = generate_corpora(&specs, config.tokens_per_category, config.seed).unwrap();
        (config, corpora)
    }

    #[test]
    fn tokens_are_little_endian() {
        assert_eq!(encode_tokens(&[1, 0x0102_0304]), vec![1, 0, 0, 0, 4, 3, 2, 1]);
        assert_eq!(decode_tokens(&[4, 3, 2, 1]), Some(vec![0x0102_0304]));
        assert_eq!(decode_tokens(&[1, 2, 3]), None);
    }

    #[test]
    fn corpora_round_trip_and_tampering_is_caught() {
        let (config, corpora) = small();
        let dir = tempfile::tempdir().unwrap();
        let written = write_corpora(dir.path(), &config, &corpora).unwrap();
        assert_eq!(written.len(), 4);
        let (manifest, back) = read_corpora(dir.path()).unwrap();
        assert_eq!(back, corpora);
        assert_eq!(manifest.content_hash, content_hash(&corpora));
        assert_eq!(manifest.vocab_size, 64);

        let file = dir.path().join("category_1.u32");
        let mut bytes = fs::read(&file).unwrap();
        bytes[0] ^= 1;
        fs::write(&file, bytes).unwrap();
        assert!(read_corpora(dir.path()).is_err());
    }

    #[test]
    fn jaccard_csv_has_half_on_the_diagonal() {
        let (_, corpora) = small();
        let csv = jaccard_csv(&corpora).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "category,0,1,2");
        for (i, line) in lines[1..].iter().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[i + 1], "0.5");
        }
    }
}
