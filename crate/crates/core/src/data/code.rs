//! Source-code sample filtering: programming-language allow-list, natural
//! language identification score, and three text statistics.

use serde::{Deserialize, Serialize};

use super::filters::{mean_word_length, word_count, RuleRegistry};

/// Programming languages kept from the code corpus.
pub const PROGRAMMING_LANGUAGES: [&str; 43] = [
    "Assembly",
    "Batchfile",
    "C",
    "CMake",
    "C++",
    "C#",
    "CSS",
    "Dart",
    "Dockerfile",
    "Fortran",
    "Go",
    "Haskell",
    "HTML",
    "Java",
    "JavaScript",
    "Julia",
    "Kotlin",
    "Labview",
    "Lua",
    "Makefile",
    "Maple",
    "Markdown",
    "Mathematica",
    "Matlab",
    "Nix",
    "Objective-C++",
    "Octave",
    "Perl",
    "PHP",
    "Powershell",
    "Python",
    "R",
    "Ruby",
    "Rust",
    "SAS",
    "Scala",
    "Scilab",
    "Shell",
    "SQL",
    "Swift",
    "TeX",
    "TypeScript",
    "Visual Basic",
];

/// Natural languages of interest (ISO 639-1).
pub const NATURAL_LANGUAGES: [&str; 11] = [
    "en", "de", "es", "fr", "it", "nl", "pl", "pt", "cs", "ro", "sv",
];

pub fn is_registered_programming_language(name: &str) -> bool {
    PROGRAMMING_LANGUAGES
        .iter()
        .any(|l| l.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeFilterConfig {
    /// Natural-language score must be strictly above this.
    pub min_language_score: f64,
    pub min_words: usize,
    /// Alphanumeric characters over all characters, at least this.
    pub min_alnum_ratio: f64,
    /// Mean whitespace-separated word length, at most this.
    pub max_avg_word_length: f64,
    pub natural_languages: Vec<String>,
}

impl Default for CodeFilterConfig {
    fn default() -> Self {
        Self {
            min_language_score: 0.15,
            min_words: 50,
            min_alnum_ratio: 0.1,
            max_avg_word_length: 100.0,
            natural_languages: NATURAL_LANGUAGES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSample {
    pub text: String,
    pub programming_language: String,
    pub nl_language: String,
    pub nl_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CodeReject {
    ProgrammingLanguage(String),
    NaturalLanguage(String),
    Score(f64),
    WordCount(usize),
    AlnumRatio(f64),
    AvgWordLength(f64),
}

pub fn alnum_ratio(text: &str) -> f64 {
    let (mut alnum, mut total) = (0usize, 0usize);
    for c in text.chars() {
        total += 1;
        if c.is_alphanumeric() {
            alnum += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        alnum as f64 / total as f64
    }
}

/// Every gate must pass; the first failing one is reported.
pub fn code_filter(sample: &CodeSample, cfg: &CodeFilterConfig) -> Result<(), CodeReject> {
    if !is_registered_programming_language(&sample.programming_language) {
        return Err(CodeReject::ProgrammingLanguage(sample.programming_language.clone()));
    }
    if !cfg.natural_languages.contains(&sample.nl_language) {
        return Err(CodeReject::NaturalLanguage(sample.nl_language.clone()));
    }
    if !(sample.nl_score > cfg.min_language_score) {
        return Err(CodeReject::Score(sample.nl_score));
    }
    let words = word_count(&sample.text);
    if words < cfg.min_words {
        return Err(CodeReject::WordCount(words));
    }
    let ratio = alnum_ratio(&sample.text);
    if ratio < cfg.min_alnum_ratio {
        return Err(CodeReject::AlnumRatio(ratio));
    }
    let avg = mean_word_length(&sample.text).unwrap_or(0.0);
    if avg > cfg.max_avg_word_length {
        return Err(CodeReject::AvgWordLength(avg));
    }
    Ok(())
}

/// Natural-language identification: `(language code, score in [0, 1])`.
pub trait LanguageIdentifier: Send + Sync {
    fn identify(&self, text: &str) -> (String, f64);
}

const ENGLISH_STOP_WORDS: [&str; 12] = [
    "the", "of", "and", "to", "in", "is", "that", "for", "it", "with", "as", "on",
];

/// Deterministic identifier: picks the language whose stop words cover the
/// largest share of words; the score is that share.
#[derive(Debug, Clone)]
pub struct StopWordIdentifier {
    rules: RuleRegistry,
}

impl Default for StopWordIdentifier {
    fn default() -> Self {
        Self {
            rules: RuleRegistry::builtin(),
        }
    }
}

impl LanguageIdentifier for StopWordIdentifier {
    fn identify(&self, text: &str) -> (String, f64) {
        let words = word_count(text);
        if words == 0 {
            return ("und".into(), 0.0);
        }
        let english = text
            .split_whitespace()
            .filter(|w| {
                let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
                ENGLISH_STOP_WORDS.contains(&w.as_str())
            })
            .count();
        let mut best = ("en".to_string(), english);
        for lang in self.rules.languages() {
            let n = self.rules.get(lang).expect("listed").stop_word_count(text);
            if n > best.1 {
                best = (lang.to_string(), n);
            }
        }
        (best.0, best.1 as f64 / words as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(words: usize) -> CodeSample {
        CodeSample {
            text: vec!["token"; words].join(" "),
            programming_language: "Python".into(),
            nl_language: "en".into(),
            nl_score: 0.5,
        }
    }

    #[test]
    fn registry_has_43_unique_entries() {
        let mut v: Vec<_> = PROGRAMMING_LANGUAGES.iter().map(|s| s.to_lowercase()).collect();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), 43);
        assert!(is_registered_programming_language("rust"));
        assert!(!is_registered_programming_language("COBOL"));
    }

    #[test]
    fn thresholds_at_boundaries() {
        let cfg = CodeFilterConfig::default();
        assert_eq!(code_filter(&sample(50), &cfg), Ok(()));
        assert_eq!(code_filter(&sample(49), &cfg), Err(CodeReject::WordCount(49)));
        let mut s = sample(60);
        s.nl_score = 0.15;
        assert_eq!(code_filter(&s, &cfg), Err(CodeReject::Score(0.15)));
        s.nl_score = 0.14;
        assert!(matches!(code_filter(&s, &cfg), Err(CodeReject::Score(_))));
        s.nl_score = 0.1500001;
        assert_eq!(code_filter(&s, &cfg), Ok(()));
    }

    #[test]
    fn url_blob_rejected_by_word_length() {
        let cfg = CodeFilterConfig {
            min_words: 1,
            ..Default::default()
        };
        let s = CodeSample {
            text: format!("https://example.com/{}", "a".repeat(180)),
            ..sample(0)
        };
        assert!(matches!(code_filter(&s, &cfg), Err(CodeReject::AvgWordLength(_))));
    }

    #[test]
    fn stub_identifier_is_deterministic() {
        let id = StopWordIdentifier::default();
        let (lang, score) = id.identify("das Haus und der Hund mit dem Ball");
        assert_eq!(lang, "de");
        assert!(score > 0.15);
        assert_eq!(id.identify("the cat and the dog").0, "en");
    }
}
