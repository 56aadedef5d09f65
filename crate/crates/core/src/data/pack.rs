//! Splitting long documents and greedy packing into fixed-length samples.

use serde::{Deserialize, Serialize};

use super::{DataError, Token};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub tokens: Vec<Token>,
    /// Per-token loss weight; `false` for repeated conversation messages.
    pub mask: Vec<bool>,
    pub source: u16,
}

impl Document {
    pub fn new(tokens: Vec<Token>, source: u16) -> Self {
        let mask = vec![true; tokens.len()];
        Self {
            tokens,
            mask,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            tokens: self.tokens[start..end].to_vec(),
            mask: self.mask[start..end].to_vec(),
            source: self.source,
        }
    }
}

/// Consecutive pieces of at most `max_len` tokens whose concatenation is `doc`.
pub fn split_long_samples(doc: &Document, max_len: usize) -> Result<Vec<Document>, DataError> {
    if max_len == 0 {
        return Err(DataError::Config("max_len must be at least 1".into()));
    }
    if doc.len() <= max_len {
        return Ok(vec![doc.clone()]);
    }
    Ok((0..doc.len())
        .step_by(max_len)
        .map(|s| doc.slice(s, (s + max_len).min(doc.len())))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocSpan {
    pub start: usize,
    pub len: usize,
    pub source: u16,
}

/// One context window. Padding sits at the tail with mask `false` and its
/// own segment id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSample {
    pub tokens: Vec<Token>,
    pub mask: Vec<bool>,
    pub segments: Vec<u32>,
    pub docs: Vec<DocSpan>,
}

/// Next-token training view of a packed sample (padding trimmed).
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub target_mask: Vec<bool>,
    pub segments: Vec<u32>,
}

impl PackedSample {
    pub fn context_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn used(&self) -> usize {
        self.docs.last().map_or(0, |d| d.start + d.len)
    }

    pub fn padding(&self) -> usize {
        self.context_len() - self.used()
    }

    /// Position `i` predicts token `i + 1`; targets in another document or
    /// with a zero mask carry no loss. `None` if fewer than two tokens.
    pub fn lm_example(&self) -> Option<LmExample> {
        let used = self.used();
        if used < 2 {
            return None;
        }
        let n = used - 1;
        let target_mask = (0..n)
            .map(|i| self.mask[i + 1] && self.segments[i + 1] == self.segments[i])
            .collect();
        Some(LmExample {
            inputs: self.tokens[..n].iter().map(|&t| t as usize).collect(),
            targets: self.tokens[1..used].iter().map(|&t| t as usize).collect(),
            target_mask,
            segments: self.segments[..n].to_vec(),
        })
    }
}

#[derive(Debug)]
pub struct Packer {
    context_len: usize,
    pad: Token,
    current: PackedSample,
}

impl Packer {
    pub fn new(context_len: usize, pad: Token) -> Result<Self, DataError> {
        if context_len == 0 {
            return Err(DataError::Config("context length must be positive".into()));
        }
        Ok(Self {
            context_len,
            pad,
            current: Self::empty(context_len),
        })
    }

    fn empty(context_len: usize) -> PackedSample {
        PackedSample {
            tokens: Vec::with_capacity(context_len),
            mask: Vec::with_capacity(context_len),
            segments: Vec::with_capacity(context_len),
            docs: Vec::new(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.context_len - self.current.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.tokens.is_empty()
    }

    /// Appends `doc` if it fits in the current sample.
    pub fn try_push(&mut self, doc: &Document) -> bool {
        if doc.is_empty() || doc.len() > self.remaining() {
            return false;
        }
        let seg = self.current.docs.len() as u32;
        self.current.docs.push(DocSpan {
            start: self.current.tokens.len(),
            len: doc.len(),
            source: doc.source,
        });
        self.current.tokens.extend_from_slice(&doc.tokens);
        self.current.mask.extend_from_slice(&doc.mask);
        self.current.segments.extend(std::iter::repeat_n(seg, doc.len()));
        true
    }

    /// Pads and returns the current sample, or `None` if it is empty.
    pub fn flush(&mut self) -> Option<PackedSample> {
        if self.is_empty() {
            return None;
        }
        let mut s = std::mem::replace(&mut self.current, Self::empty(self.context_len));
        let pad = self.context_len - s.tokens.len();
        let seg = s.docs.len() as u32;
        s.tokens.extend(std::iter::repeat_n(self.pad, pad));
        s.mask.extend(std::iter::repeat_n(false, pad));
        s.segments.extend(std::iter::repeat_n(seg, pad));
        Some(s)
    }
}

/// Greedy first-fit-in-order packing. Documents longer than the window must
/// be split beforehand.
pub fn pack_sequences(docs: &[Document], context_len: usize, pad: Token) -> Result<Vec<PackedSample>, DataError> {
    let mut packer = Packer::new(context_len, pad)?;
    let mut out = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if d.len() > context_len {
            return Err(DataError::DocTooLong {
                index: i,
                len: d.len(),
                context_len,
            });
        }
        if d.is_empty() {
            continue;
        }
        if !packer.try_push(d) {
            out.extend(packer.flush());
            packer.try_push(d);
        }
    }
    out.extend(packer.flush());
    Ok(out)
}

/// Share of tokens that belong to documents longer than `threshold` tokens.
pub fn long_token_fraction(docs: &[Document], threshold: usize) -> f64 {
    let total: usize = docs.iter().map(Document::len).sum();
    if total == 0 {
        return 0.0;
    }
    let long: usize = docs.iter().filter(|d| d.len() > threshold).map(Document::len).sum();
    long as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(n: usize, start: Token) -> Document {
        Document::new((start..start + n as Token).collect(), 0)
    }

    #[test]
    fn split_arithmetic() {
        let d = doc(5000, 0);
        let parts = split_long_samples(&d, 2048).unwrap();
        assert_eq!(parts.iter().map(Document::len).collect::<Vec<_>>(), [2048, 2048, 904]);
        let joined: Vec<Token> = parts.iter().flat_map(|p| p.tokens.clone()).collect();
        assert_eq!(joined, d.tokens);
        assert_eq!(split_long_samples(&doc(10, 0), 2048).unwrap().len(), 1);
        assert!(split_long_samples(&d, 0).is_err());
    }

    #[test]
    fn full_docs_need_no_padding() {
        let docs = vec![doc(8, 0), doc(8, 100)];
        let packs = pack_sequences(&docs, 8, 0).unwrap();
        assert_eq!(packs.len(), 2);
        assert!(packs.iter().all(|p| p.padding() == 0 && p.docs.len() == 1));
    }

    #[test]
    fn greedy_packing_and_padding() {
        let docs = vec![doc(3, 0), doc(4, 10), doc(5, 20)];
        let packs = pack_sequences(&docs, 8, 999).unwrap();
        assert_eq!(packs.len(), 2);
        assert_eq!(packs[0].segments, [0, 0, 0, 1, 1, 1, 1, 2]);
        assert_eq!(packs[0].tokens[7], 999);
        assert!(!packs[0].mask[7]);
        assert_eq!(packs[1].used(), 5);
        let unmasked: usize = packs.iter().map(|p| p.mask.iter().filter(|&&m| m).count()).sum();
        assert_eq!(unmasked, 12);
    }

    #[test]
    fn lm_example_masks_document_boundaries() {
        let packs = pack_sequences(&[doc(3, 0), doc(2, 10)], 8, 0).unwrap();
        let ex = packs[0].lm_example().unwrap();
        assert_eq!(ex.inputs, [0, 1, 2, 10]);
        assert_eq!(ex.targets, [1, 2, 10, 11]);
        assert_eq!(ex.target_mask, [true, true, false, true]);
    }

    #[test]
    fn too_long_is_rejected() {
        assert!(matches!(
            pack_sequences(&[doc(9, 0)], 8, 0),
            Err(DataError::DocTooLong { len: 9, .. })
        ));
    }

    #[test]
    fn long_fraction() {
        let docs = vec![doc(3000, 0), doc(1000, 0)];
        assert_eq!(long_token_fraction(&docs, 2048), 0.75);
    }
}
