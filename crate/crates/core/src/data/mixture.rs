//! Weighted multi-source document stream with an addressable, serializable
//! cursor (needed to skip data after a rollback).

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::pack::{Document, PackedSample, Packer};
use super::{DataError, Token};

/// Deterministic, indexable document source.
pub trait DocSource: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn doc(&self, index: u64) -> Document;
}

/// Finite list of documents, cycled.
#[derive(Debug, Clone)]
pub struct InMemorySource {
    pub name: String,
    pub docs: Vec<Document>,
}

impl DocSource for InMemorySource {
    fn name(&self) -> &str {
        &self.name
    }

    fn doc(&self, index: u64) -> Document {
        self.docs[(index % self.docs.len() as u64) as usize].clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub sources: Vec<(String, f64)>,
}

impl MixtureSpec {
    pub fn single(name: &str) -> Self {
        Self {
            sources: vec![(name.to_string(), 1.0)],
        }
    }

    /// Web English / web multilingual / code / other curated sources for
    /// stages 1-3; stage 4 is a single curated high-quality source.
    pub fn stage(stage: u8) -> Option<Self> {
        let w: [f64; 4] = match stage {
            1 => [0.691, 0.166, 0.022, 0.121],
            2 => [0.57, 0.158, 0.106, 0.166],
            3 => [0.61, 0.15, 0.105, 0.135],
            4 => return Some(Self::single("curated")),
            _ => return None,
        };
        Some(Self {
            sources: ["web_en", "web_multi", "code", "other"]
                .iter()
                .zip(w)
                .map(|(n, w)| (n.to_string(), w))
                .collect(),
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.sources.is_empty() {
            return Err(DataError::Config("mixture has no sources".into()));
        }
        if let Some((n, w)) = self.sources.iter().find(|(_, w)| !(*w >= 0.0)) {
            return Err(DataError::Config(format!("source `{n}` has weight {w}")));
        }
        let sum: f64 = self.sources.iter().map(|s| s.1).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DataError::Config(format!("mixture weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable per-index seed derivation shared by synthetic sources.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocCursor {
    pub source: usize,
    pub index: u64,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    /// Tokens taken or skipped so far.
    pub position: u64,
    /// Full document lengths assigned to each source when selected.
    pub assigned: Vec<u64>,
    /// Tokens actually taken from each source.
    pub taken: Vec<u64>,
    /// Documents started per source.
    pub docs: Vec<u64>,
    pub current: Option<DocCursor>,
}

/// Picks each next document from the source whose token share lags its
/// weight the most; documents within a source start at a seeded offset.
#[derive(Debug)]
pub struct MixtureStream {
    weights: Vec<f64>,
    sources: Vec<Arc<dyn DocSource>>,
    state: StreamState,
    cached: Option<Document>,
}

impl MixtureStream {
    pub fn new(spec: &MixtureSpec, sources: Vec<Arc<dyn DocSource>>, seed: u64) -> Result<Self, DataError> {
        spec.validate()?;
        let mut ordered = Vec::with_capacity(spec.sources.len());
        for (name, _) in &spec.sources {
            let s = sources
                .iter()
                .find(|s| s.name() == name)
                .ok_or_else(|| DataError::Config(format!("no source named `{name}`")))?;
            ordered.push(s.clone());
        }
        let n = ordered.len();
        Ok(Self {
            weights: spec.sources.iter().map(|s| s.1).collect(),
            sources: ordered,
            state: StreamState {
                seed,
                position: 0,
                assigned: vec![0; n],
                taken: vec![0; n],
                docs: vec![0; n],
                current: None,
            },
            cached: None,
        })
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn restore(&mut self, state: StreamState) -> Result<(), DataError> {
        if state.assigned.len() != self.sources.len() {
            return Err(DataError::Config(format!(
                "stream state has {} sources, stream has {}",
                state.assigned.len(),
                self.sources.len()
            )));
        }
        self.state = state;
        self.cached = None;
        Ok(())
    }

    pub fn position(&self) -> u64 {
        self.state.position
    }

    pub fn source_names(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.name().to_string()).collect()
    }

    /// Realized token share per source.
    pub fn realized_fractions(&self) -> Vec<f64> {
        let total: u64 = self.state.taken.iter().sum();
        self.state
            .taken
            .iter()
            .map(|&t| if total == 0 { 0.0 } else { t as f64 / total as f64 })
            .collect()
    }

    fn select_source(&self) -> usize {
        let total: u64 = self.state.assigned.iter().sum();
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &w) in self.weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let deficit = w * (total as f64 + 1.0) - self.state.assigned[i] as f64;
            if deficit > best.1 {
                best = (i, deficit);
            }
        }
        best.0
    }

    fn load(&mut self) -> &Document {
        if self.state.current.is_none() {
            loop {
                let s = self.select_source();
                let k = self.state.docs[s];
                let index = k.wrapping_add(derive_seed(self.state.seed, s as u64));
                let mut doc = self.sources[s].doc(index);
                doc.source = s as u16;
                self.state.docs[s] += 1;
                self.state.assigned[s] += doc.len() as u64;
                if doc.is_empty() {
                    continue;
                }
                self.state.current = Some(DocCursor {
                    source: s,
                    index,
                    offset: 0,
                    len: doc.len(),
                });
                self.cached = Some(doc);
                break;
            }
        }
        if self.cached.is_none() {
            let c = self.state.current.expect("set above");
            let mut doc = self.sources[c.source].doc(c.index);
            doc.source = c.source as u16;
            self.cached = Some(doc);
        }
        self.cached.as_ref().expect("loaded")
    }

    /// Tokens left in the current document, capped at `max`.
    pub fn peek_len(&mut self, max: usize) -> usize {
        self.load();
        let c = self.state.current.expect("loaded");
        (c.len - c.offset).min(max)
    }

    /// Takes `n` tokens (at most the rest of the current document).
    pub fn take(&mut self, n: usize) -> Document {
        let avail = self.peek_len(usize::MAX);
        let n = n.min(avail);
        let c = self.state.current.expect("loaded");
        let piece = self.cached.as_ref().expect("loaded").slice(c.offset, c.offset + n);
        self.advance(n);
        self.state.taken[c.source] += n as u64;
        piece
    }

    fn advance(&mut self, n: usize) {
        let c = self.state.current.as_mut().expect("loaded");
        c.offset += n;
        self.state.position += n as u64;
        if c.offset >= c.len {
            self.state.current = None;
            self.cached = None;
        }
    }

    /// Discards exactly `n` tokens of the stream.
    pub fn skip(&mut self, mut n: u64) {
        while n > 0 {
            let step = self.peek_len(usize::MAX).min(n.min(usize::MAX as u64) as usize);
            self.advance(step);
            n -= step as u64;
        }
    }

    /// Fills up to `samples` windows of `context_len` tokens, never taking
    /// more than `token_cap` tokens in total. Documents longer than the
    /// window arrive as window-sized pieces. Returns the samples and the
    /// number of tokens taken.
    pub fn next_batch(
        &mut self,
        samples: usize,
        context_len: usize,
        token_cap: u64,
        pad: Token,
    ) -> Result<(Vec<PackedSample>, u64), DataError> {
        let mut out = Vec::with_capacity(samples);
        let mut taken = 0u64;
        while out.len() < samples && taken < token_cap {
            let mut packer = Packer::new(context_len, pad)?;
            loop {
                let cap_left = (token_cap - taken).min(usize::MAX as u64) as usize;
                let room = packer.remaining().min(cap_left);
                if room == 0 {
                    break;
                }
                let piece = self.peek_len(context_len);
                let n = if piece <= room {
                    piece
                } else if packer.is_empty() || cap_left <= packer.remaining() {
                    room
                } else {
                    break;
                };
                let doc = self.take(n);
                taken += n as u64;
                let pushed = packer.try_push(&doc);
                debug_assert!(pushed);
            }
            out.extend(packer.flush());
        }
        Ok((out, taken))
    }
}
