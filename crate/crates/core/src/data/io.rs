//! Line-delimited JSON records and binary packed-token shards.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::conversation::{ConversationTree, Message};
use super::pack::{DocSpan, PackedSample};
use super::tokenizer::Tokenizer;
use super::{DataError, Token};
use crate::model::checkpoint::sha256_hex;

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DataError::Record {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| DataError::Record {
            line: 0,
            detail: e.to_string(),
        })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMessage {
    pub id: u64,
    #[serde(default)]
    pub role: String,
    pub text: String,
    #[serde(default)]
    pub parent: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextTree {
    pub nodes: Vec<TextMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeRecord {
    #[serde(default)]
    pub id: String,
    /// Corpus the tree came from, for per-source statistics.
    #[serde(default)]
    pub source: String,
    pub tree: TextTree,
}

impl TextTree {
    pub fn tokenize(&self, tok: &dyn Tokenizer) -> ConversationTree {
        ConversationTree {
            nodes: self
                .nodes
                .iter()
                .map(|m| Message {
                    id: m.id,
                    role: m.role.clone(),
                    tokens: tok.encode(&m.text),
                    parent: m.parent,
                })
                .collect(),
        }
    }
}

pub const SHARD_FORMAT: &str = "desklm-shard";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub format: String,
    pub context_len: usize,
    pub samples: usize,
    pub sources: Vec<String>,
    pub docs: Vec<Vec<DocSpan>>,
    pub tokens_sha256: String,
    pub mask_sha256: String,
    pub segments_sha256: String,
}

fn u32_bytes(v: impl Iterator<Item = u32>) -> Vec<u8> {
    v.flat_map(u32::to_le_bytes).collect()
}

fn read_u32s(bytes: &[u8]) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

/// Writes `tokens.bin`, `mask.bin`, `segments.bin` and `manifest.json`.
pub fn write_shard(dir: &Path, samples: &[PackedSample], sources: &[String]) -> Result<ShardManifest, DataError> {
    let context_len = samples.first().map_or(0, PackedSample::context_len);
    if samples.iter().any(|s| s.context_len() != context_len) {
        return Err(DataError::Config("samples of differing lengths in one shard".into()));
    }
    fs::create_dir_all(dir)?;
    let tokens = u32_bytes(samples.iter().flat_map(|s| s.tokens.iter().copied()));
    let mask: Vec<u8> = samples.iter().flat_map(|s| s.mask.iter().map(|&m| m as u8)).collect();
    let segments = u32_bytes(samples.iter().flat_map(|s| s.segments.iter().copied()));
    let manifest = ShardManifest {
        format: SHARD_FORMAT.into(),
        context_len,
        samples: samples.len(),
        sources: sources.to_vec(),
        docs: samples.iter().map(|s| s.docs.clone()).collect(),
        tokens_sha256: sha256_hex(&tokens),
        mask_sha256: sha256_hex(&mask),
        segments_sha256: sha256_hex(&segments),
    };
    fs::write(dir.join("tokens.bin"), tokens)?;
    fs::write(dir.join("mask.bin"), mask)?;
    fs::write(dir.join("segments.bin"), segments)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| DataError::Record {
        line: 0,
        detail: e.to_string(),
    })?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn read_shard(dir: &Path) -> Result<(ShardManifest, Vec<PackedSample>), DataError> {
    let m: ShardManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
        .map_err(|e| DataError::Record {
            line: 0,
            detail: e.to_string(),
        })?;
    if m.format != SHARD_FORMAT {
        return Err(DataError::Config(format!("not a shard: format `{}`", m.format)));
    }
    let tokens = fs::read(dir.join("tokens.bin"))?;
    let mask = fs::read(dir.join("mask.bin"))?;
    let segments = fs::read(dir.join("segments.bin"))?;
    for (name, bytes, want) in [
        ("tokens", &tokens, &m.tokens_sha256),
        ("mask", &mask, &m.mask_sha256),
        ("segments", &segments, &m.segments_sha256),
    ] {
        if sha256_hex(bytes) != *want {
            return Err(DataError::Config(format!("{name}.bin checksum mismatch")));
        }
    }
    let n = m.context_len * m.samples;
    if tokens.len() != 4 * n || mask.len() != n || segments.len() != 4 * n || m.docs.len() != m.samples {
        return Err(DataError::Config("shard files disagree with manifest".into()));
    }
    let tokens: Vec<Token> = read_u32s(&tokens);
    let segments = read_u32s(&segments);
    let c = m.context_len;
    let samples = (0..m.samples)
        .map(|i| PackedSample {
            tokens: tokens[i * c..(i + 1) * c].to_vec(),
            mask: mask[i * c..(i + 1) * c].iter().map(|&b| b != 0).collect(),
            segments: segments[i * c..(i + 1) * c].to_vec(),
            docs: m.docs[i].clone(),
        })
        .collect();
    Ok((m, samples))
}
