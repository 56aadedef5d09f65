//! Language-tuned document heuristics (mean word length, stop-word count)
//! and line-wise boilerplate removal.

use std::collections::{BTreeMap, HashSet};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::par::{self, Exec};

const BUILTIN_RULES: [(&str, &str); 10] = [
    ("cs", include_str!("../../rules/cs.toml")),
    ("de", include_str!("../../rules/de.toml")),
    ("es", include_str!("../../rules/es.toml")),
    ("fr", include_str!("../../rules/fr.toml")),
    ("it", include_str!("../../rules/it.toml")),
    ("nl", include_str!("../../rules/nl.toml")),
    ("pl", include_str!("../../rules/pl.toml")),
    ("pt", include_str!("../../rules/pt.toml")),
    ("ro", include_str!("../../rules/ro.toml")),
    ("sv", include_str!("../../rules/sv.toml")),
];

/// Alternative language codes accepted on input.
const ALIASES: [(&str, &str); 2] = [("cz", "cs"), ("sw", "sv")];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFile {
    pub language: String,
    pub char_per_word_min: f64,
    pub char_per_word_max: f64,
    #[serde(default = "default_min_stop_words")]
    pub min_stop_words: usize,
    pub stop_words: Vec<String>,
    #[serde(default = "default_max_removed")]
    pub max_removed_fraction: f64,
    #[serde(default)]
    pub line_patterns: Vec<String>,
}

fn default_min_stop_words() -> usize {
    2
}

fn default_max_removed() -> f64 {
    0.05
}

/// Compiled rules for one language.
#[derive(Debug, Clone)]
pub struct LanguageRuleSet {
    pub language: String,
    pub char_per_word_min: f64,
    pub char_per_word_max: f64,
    pub min_stop_words: usize,
    pub stop_words: HashSet<String>,
    /// Drop the document when line removal deletes more than this fraction
    /// of its words.
    pub max_removed_fraction: f64,
    pub line_patterns: Vec<Regex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RejectReason {
    Empty,
    WordLength { mean: f64, min: f64, max: f64 },
    StopWords { found: usize, required: usize },
    LineFilter { removed_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Reject(RejectReason),
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

/// Words are whitespace-separated; for stop-word matching they are
/// lowercased and stripped of surrounding punctuation.
fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn mean_word_length(text: &str) -> Option<f64> {
    let (mut chars, mut words) = (0usize, 0usize);
    for w in text.split_whitespace() {
        chars += w.chars().count();
        words += 1;
    }
    (words > 0).then(|| chars as f64 / words as f64)
}

impl LanguageRuleSet {
    pub fn from_file(file: RuleFile) -> Result<Self, DataError> {
        let bad = |m: String| Err(DataError::Rules(format!("{}: {m}", file.language)));
        if !(file.char_per_word_min < file.char_per_word_max) || file.char_per_word_min < 0.0 {
            return bad(format!(
                "word length range {}..{} is empty",
                file.char_per_word_min, file.char_per_word_max
            ));
        }
        if file.stop_words.is_empty() {
            return bad("stop word list is empty".into());
        }
        if !(0.0..=1.0).contains(&file.max_removed_fraction) {
            return bad("max_removed_fraction outside [0, 1]".into());
        }
        let mut line_patterns = Vec::with_capacity(file.line_patterns.len());
        for p in &file.line_patterns {
            match Regex::new(p) {
                Ok(r) => line_patterns.push(r),
                Err(e) => return bad(format!("pattern `{p}`: {e}")),
            }
        }
        Ok(Self {
            stop_words: file.stop_words.iter().map(|s| s.to_lowercase()).collect(),
            language: file.language,
            char_per_word_min: file.char_per_word_min,
            char_per_word_max: file.char_per_word_max,
            min_stop_words: file.min_stop_words,
            max_removed_fraction: file.max_removed_fraction,
            line_patterns,
        })
    }

    pub fn parse(toml_text: &str) -> Result<Self, DataError> {
        let file: RuleFile =
            toml::from_str(toml_text).map_err(|e| DataError::Rules(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn stop_word_count(&self, text: &str) -> usize {
        text.split_whitespace()
            .filter(|w| self.stop_words.contains(&normalize_word(w)))
            .count()
    }

    /// Mean characters per word within `[min, max]` (inclusive) and at least
    /// `min_stop_words` stop-word occurrences.
    pub fn check(&self, text: &str) -> Verdict {
        let Some(mean) = mean_word_length(text) else {
            return Verdict::Reject(RejectReason::Empty);
        };
        if mean < self.char_per_word_min || mean > self.char_per_word_max {
            return Verdict::Reject(RejectReason::WordLength {
                mean,
                min: self.char_per_word_min,
                max: self.char_per_word_max,
            });
        }
        let found = self.stop_word_count(text);
        if found < self.min_stop_words {
            return Verdict::Reject(RejectReason::StopWords {
                found,
                required: self.min_stop_words,
            });
        }
        Verdict::Pass
    }

    /// Removes lines matching any pattern. `kept` is `None` when the
    /// document is dropped.
    pub fn filter_lines(&self, text: &str) -> LineFilterOutcome {
        let mut kept_lines = Vec::new();
        let (mut words_total, mut words_removed, mut lines_removed, mut lines_total) = (0, 0, 0, 0);
        for line in text.lines() {
            lines_total += 1;
            let wc = word_count(line);
            words_total += wc;
            if self.line_patterns.iter().any(|r| r.is_match(line)) {
                words_removed += wc;
                lines_removed += 1;
            } else {
                kept_lines.push(line);
            }
        }
        let removed_fraction = if words_total == 0 {
            if lines_removed > 0 { 1.0 } else { 0.0 }
        } else {
            words_removed as f64 / words_total as f64
        };
        let dropped = removed_fraction > self.max_removed_fraction
            || (lines_removed > 0 && kept_lines.iter().all(|l| l.trim().is_empty()));
        LineFilterOutcome {
            kept: (!dropped).then(|| kept_lines.join("\n")),
            lines_total,
            lines_removed,
            words_total,
            words_removed,
            removed_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineFilterOutcome {
    pub kept: Option<String>,
    pub lines_total: usize,
    pub lines_removed: usize,
    pub words_total: usize,
    pub words_removed: usize,
    pub removed_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct RuleRegistry {
    rules: BTreeMap<String, LanguageRuleSet>,
}

impl RuleRegistry {
    /// The ten shipped rule sets.
    pub fn builtin() -> Self {
        let rules = BUILTIN_RULES
            .iter()
            .map(|(code, text)| {
                let r = LanguageRuleSet::parse(text).expect("shipped rule files are valid");
                assert_eq!(&r.language, code);
                (code.to_string(), r)
            })
            .collect();
        Self { rules }
    }

    pub fn empty() -> Self {
        Self {
            rules: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, rules: LanguageRuleSet) {
        self.rules.insert(rules.language.clone(), rules);
    }

    /// Loads every `*.toml` file in `dir`, overriding languages already present.
    pub fn load_dir(&mut self, dir: &std::path::Path) -> Result<(), DataError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        for p in paths {
            let text = std::fs::read_to_string(&p)?;
            self.insert(LanguageRuleSet::parse(&text)?);
        }
        Ok(())
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.rules.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, lang: &str) -> Result<&LanguageRuleSet, DataError> {
        let code = ALIASES
            .iter()
            .find(|(a, _)| *a == lang)
            .map_or(lang, |(_, c)| c);
        self.rules
            .get(code)
            .ok_or_else(|| DataError::UnknownLanguage(lang.to_string()))
    }
}

/// Document-level heuristics for `lang`. Languages without a rule set
/// (English included) are an error for the caller to route elsewhere.
pub fn heuristic_filter(text: &str, lang: &str, registry: &RuleRegistry) -> Result<Verdict, DataError> {
    Ok(registry.get(lang)?.check(text))
}

pub fn line_quality_filter(
    text: &str,
    lang: &str,
    registry: &RuleRegistry,
) -> Result<LineFilterOutcome, DataError> {
    Ok(registry.get(lang)?.filter_lines(text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDoc {
    #[serde(default)]
    pub id: String,
    pub lang: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageRemoval {
    pub docs: usize,
    pub line_filter_removed: usize,
    pub heuristics_removed: usize,
}

impl LanguageRemoval {
    fn pct(&self, n: usize) -> f64 {
        if self.docs == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.docs as f64
        }
    }

    pub fn line_filter_pct(&self) -> f64 {
        self.pct(self.line_filter_removed)
    }

    pub fn heuristics_pct(&self) -> f64 {
        self.pct(self.heuristics_removed)
    }

    pub fn total_pct(&self) -> f64 {
        self.pct(self.line_filter_removed + self.heuristics_removed)
    }
}

/// Per-language document removal counts of one corpus pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub languages: BTreeMap<String, LanguageRemoval>,
    pub unknown_language: usize,
}

impl RemovalReport {
    /// CSV with columns language, docs, line-wise %, extra heuristics %, total %.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("language,docs,line_filter_pct,heuristics_pct,total_pct\n");
        for (lang, r) in &self.languages {
            s.push_str(&format!(
                "{lang},{},{:.2},{:.2},{:.2}\n",
                r.docs,
                r.line_filter_pct(),
                r.heuristics_pct(),
                r.total_pct()
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DocOutcome {
    Kept(RawDoc),
    LineFiltered(RejectReason),
    Heuristics(RejectReason),
    UnknownLanguage,
}

pub fn filter_doc(doc: &RawDoc, registry: &RuleRegistry) -> DocOutcome {
    let Ok(rules) = registry.get(&doc.lang) else {
        return DocOutcome::UnknownLanguage;
    };
    let lines = rules.filter_lines(&doc.text);
    let Some(text) = lines.kept else {
        return DocOutcome::LineFiltered(RejectReason::LineFilter {
            removed_fraction: lines.removed_fraction,
        });
    };
    match rules.check(&text) {
        Verdict::Pass => DocOutcome::Kept(RawDoc {
            text,
            ..doc.clone()
        }),
        Verdict::Reject(r) => DocOutcome::Heuristics(r),
    }
}

/// Line filter then heuristics over a corpus. Output keeps input order
/// whatever the execution mode.
pub fn filter_corpus(docs: &[RawDoc], registry: &RuleRegistry, exec: Exec) -> (Vec<RawDoc>, RemovalReport) {
    let outcomes = par::map(exec, docs, |d| filter_doc(d, registry));
    let mut kept = Vec::new();
    let mut report = RemovalReport::default();
    for (doc, outcome) in docs.iter().zip(outcomes) {
        if let DocOutcome::UnknownLanguage = outcome {
            report.unknown_language += 1;
            continue;
        }
        let lang = registry.get(&doc.lang).map(|r| r.language.clone()).unwrap_or_default();
        let entry = report.languages.entry(lang).or_default();
        entry.docs += 1;
        match outcome {
            DocOutcome::Kept(d) => kept.push(d),
            DocOutcome::LineFiltered(_) => entry.line_filter_removed += 1,
            DocOutcome::Heuristics(_) => entry.heuristics_removed += 1,
            DocOutcome::UnknownLanguage => unreachable!(),
        }
    }
    (kept, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spanish_prose_passes() {
        let reg = RuleRegistry::builtin();
        let text = "El perro de mi vecino corre por el parque todas las mañanas.";
        assert_eq!(heuristic_filter(text, "es", &reg).unwrap(), Verdict::Pass);
    }

    #[test]
    fn long_words_rejected() {
        let reg = RuleRegistry::builtin();
        // mean length 15 with plenty of stop words
        let w = "abcdefghijklmnopqrstuvwxyzabcdefghij";
        let text = format!("el de {w} {w}");
        let mean = mean_word_length(&text).unwrap();
        assert_eq!(mean, 19.0);
        assert!(matches!(
            heuristic_filter(&text, "es", &reg).unwrap(),
            Verdict::Reject(RejectReason::WordLength { .. })
        ));
    }

    #[test]
    fn unknown_language_is_an_error() {
        let reg = RuleRegistry::builtin();
        assert!(matches!(
            heuristic_filter("the cat", "en", &reg),
            Err(DataError::UnknownLanguage(_))
        ));
        assert!(reg.get("cz").is_ok());
    }

    #[test]
    fn empty_patterns_are_identity() {
        let mut r = RuleRegistry::builtin().get("de").unwrap().clone();
        r.line_patterns.clear();
        let text = "Startseite\nDas ist ein Satz.";
        let out = r.filter_lines(text);
        assert_eq!(out.kept.as_deref(), Some(text));
        assert_eq!(out.lines_removed, 0);
    }

    #[test]
    fn all_boilerplate_drops_document() {
        let reg = RuleRegistry::builtin();
        let out = line_quality_filter("Startseite\nImpressum\n© 2024 Firma", "de", &reg).unwrap();
        assert_eq!(out.kept, None);
        assert_eq!(out.lines_removed, 3);
    }

    #[test]
    fn invalid_rule_file() {
        let bad = r#"
            language = "xx"
            char_per_word_min = 5
            char_per_word_max = 3
            stop_words = ["a"]
        "#;
        assert!(LanguageRuleSet::parse(bad).is_err());
        let no_stops = r#"
            language = "xx"
            char_per_word_min = 1
            char_per_word_max = 3
            stop_words = []
        "#;
        assert!(LanguageRuleSet::parse(no_stops).is_err());
    }
}
