//! Seeded Markov-chain corpora standing in for real data at desk scale.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mixture::{derive_seed, DocSource};
use super::pack::Document;
use super::Token;

/// First-order Markov source. Each token has `branching` likely successors
/// with geometrically decaying probabilities, so the entropy is far below
/// `ln(vocab)` and a small model can learn it.
#[derive(Debug, Clone)]
pub struct MarkovSource {
    name: String,
    /// Seeds documents; the transition table uses the constructor seed.
    seed: u64,
    /// Tokens below this id are never generated (reserved for padding etc.).
    first_token: Token,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    successors: Vec<Vec<(Token, f64)>>,
}

impl MarkovSource {
    pub fn new(
        name: &str,
        seed: u64,
        first_token: Token,
        vocab: usize,
        branching: usize,
        len_range: (usize, usize),
    ) -> Self {
        assert!((first_token as usize) < vocab && len_range.0 >= 1 && len_range.0 <= len_range.1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
        let live = vocab - first_token as usize;
        let successors = (0..vocab)
            .map(|_| {
                let mut w = 1.0;
                let mut total = 0.0;
                let mut succ = Vec::with_capacity(branching);
                for _ in 0..branching.max(1) {
                    let t = first_token + rng.random_range(0..live) as Token;
                    succ.push((t, w));
                    total += w;
                    w *= 0.5;
                }
                let mut acc = 0.0;
                for s in &mut succ {
                    acc += s.1 / total;
                    s.1 = acc;
                }
                succ
            })
            .collect();
        Self {
            name: name.to_string(),
            seed,
            first_token,
            vocab,
            min_len: len_range.0,
            max_len: len_range.1,
            successors,
        }
    }

    /// Same chain, different documents.
    pub fn with_doc_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }
}

impl DocSource for MarkovSource {
    fn name(&self) -> &str {
        &self.name
    }

    fn doc(&self, index: u64) -> Document {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, index));
        let len = rng.random_range(self.min_len..=self.max_len);
        let live = self.vocab - self.first_token as usize;
        let mut t = self.first_token + rng.random_range(0..live) as Token;
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(t);
            let u: f64 = rng.random();
            let succ = &self.successors[t as usize];
            t = succ
                .iter()
                .find(|s| u < s.1)
                .unwrap_or(succ.last().expect("non-empty"))
                .0;
        }
        Document::new(tokens, 0)
    }
}

/// Sources named like the curriculum mixtures. They share one chain and
/// differ in the documents drawn from it, so a batch's loss does not hinge
/// on which sources it happened to sample.
pub fn curriculum_sources(seed: u64, vocab: usize, len_range: (usize, usize)) -> Vec<Arc<dyn DocSource>> {
    let chain = MarkovSource::new("chain", seed, 1, vocab, 3, len_range);
    ["web_en", "web_multi", "code", "other", "curated"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mut s = chain.clone().with_doc_seed(derive_seed(seed, i as u64));
            s.name = name.to_string();
            Arc::new(s) as Arc<dyn DocSource>
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let s = MarkovSource::new("x", 3, 1, 64, 3, (10, 20));
        let a = s.doc(5);
        assert_eq!(a, s.doc(5));
        assert_ne!(a, s.doc(6));
        assert!((10..=20).contains(&a.len()));
        assert!(a.tokens.iter().all(|&t| (1..64).contains(&t)));
    }
}
