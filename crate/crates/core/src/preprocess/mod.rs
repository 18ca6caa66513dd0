//! Manifest text cleaning and the four-column dataset.

mod dataset;
mod synth;

use std::collections::BTreeSet;
use std::path::Path;

pub use dataset::{
    read_dataset, read_dataset_from, split_train_test, write_dataset, write_dataset_to, Category, DatasetRecord,
    PreprocessError,
};
pub use synth::{synthesize_corpus, synthesize_corpus_with_stats, CorpusStats, VocabProfile, N_CLASSES};

const DEFAULT_LEXICON: &str = include_str!("../../data/default_lexicon.txt");

/// Removal lexicon for [`clean_text`]. Punctuation always becomes a space;
/// case and digits are always kept.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CleaningConfig {
    lexicon: BTreeSet<String>,
}

impl CleaningConfig {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The bundled XML-boilerplate lexicon.
    pub fn default_lexicon() -> Self {
        Self::parse(DEFAULT_LEXICON)
    }

    pub fn from_terms<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            lexicon: terms.into_iter().map(Into::into).collect(),
        }
    }

    /// Newline-separated terms; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Self {
        Self::from_terms(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn lexicon(&self) -> &BTreeSet<String> {
        &self.lexicon
    }
}

/// Replaces every non-alphanumeric character with a space, drops lexicon
/// tokens and joins what is left with single spaces.
pub fn clean_text(raw: &str, config: &CleaningConfig) -> String {
    let spaced: String = raw.chars().map(|c| if c.is_alphanumeric() { c } else { ' ' }).collect();
    let mut out = String::with_capacity(spaced.len());
    for token in spaced.split_whitespace() {
        if config.lexicon.contains(token) {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

/// [`clean_text`] over many inputs on up to `threads` workers; output order
/// follows input order.
pub fn clean_all(raws: &[String], config: &CleaningConfig, threads: usize) -> Vec<String> {
    let threads = threads.max(1).min(raws.len().max(1));
    let chunk = raws.len().div_ceil(threads).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = raws
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|r| clean_text(r, config)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("cleaning worker panicked"))
            .collect()
    })
}
