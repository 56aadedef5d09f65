//! Corpus preparation: conversation flattening, quality and code filters,
//! deduplication, splitting, mixtures and packing.

pub mod code;
pub mod conversation;
pub mod dedup;
pub mod filters;
pub mod io;
pub mod mixture;
pub mod pack;
pub mod synthetic;
pub mod tokenizer;

pub use code::{code_filter, CodeFilterConfig, CodeReject, CodeSample, LanguageIdentifier, StopWordIdentifier};
pub use conversation::{weighted_overhead, ConversationTree, FlatThread, Message};
pub use dedup::exact_substring_dedup;
pub use filters::{
    filter_corpus, heuristic_filter, line_quality_filter, LanguageRuleSet, RawDoc, RejectReason,
    RemovalReport, RuleRegistry, Verdict,
};
pub use mixture::{DocSource, InMemorySource, MixtureSpec, MixtureStream, StreamState};
pub use pack::{long_token_fraction, pack_sequences, split_long_samples, Document, LmExample, PackedSample};
pub use tokenizer::{ByteTokenizer, Tokenizer};

use thiserror::Error;

pub type Token = u32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid conversation tree: {0}")]
    InvalidTree(String),
    #[error("no rule set for language `{0}`")]
    UnknownLanguage(String),
    #[error("rule file: {0}")]
    Rules(String),
    #[error("document {index} has {len} tokens, more than the context length {context_len}")]
    DocTooLong {
        index: usize,
        len: usize,
        context_len: usize,
    },
    #[error("{0}")]
    Config(String),
    #[error("record at line {line}: {detail}")]
    Record { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
