use std::path::Path;

use super::{ClientError, ScanReport, Verdict};
use crate::preprocess::Category;

/// Ordered family-token aliases plus the positives threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasTable {
    entries: Vec<(String, Category)>,
    pub min_positives: u32,
}

impl AliasTable {
    pub fn default_table() -> Self {
        Self::parse(include_str!("../../data/category_aliases.txt")).expect("built-in alias table")
    }

    /// `token = category` lines, `#` comments; the reserved key
    /// `min_positives` sets the threshold.
    pub fn parse(text: &str) -> Result<Self, ClientError> {
        let mut entries = Vec::new();
        let mut min_positives = 1;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |reason: String| ClientError::BadAliasTable { line: i + 1, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected `token = category`".into()))?;
            let (key, value) = (key.trim().to_lowercase(), value.trim());
            if key == "min_positives" {
                min_positives = value
                    .parse()
                    .ok()
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| bad(format!("min_positives must be a positive integer, got `{value}`")))?;
                continue;
            }
            if key.is_empty() || !key.chars().all(char::is_alphanumeric) {
                return Err(bad(format!("token `{key}` must be alphanumeric")));
            }
            let category = value
                .parse::<Category>()
                .map_err(|v| bad(format!("unknown category `{v}`")))?;
            entries.push((key, category));
        }
        Ok(Self { entries, min_positives })
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn entries(&self) -> &[(String, Category)] {
        &self.entries
    }

    /// Category for a set of family strings, by table order.
    pub fn map_families<S: AsRef<str>>(&self, families: &[S]) -> Option<Category> {
        let tokens: Vec<Vec<String>> = families.iter().map(|f| family_tokens(f.as_ref())).collect();
        self.entries
            .iter()
            .find(|(key, _)| tokens.iter().any(|t| t.contains(key)))
            .map(|&(_, c)| c)
    }

    pub fn classify(&self, report: &ScanReport) -> Result<(Verdict, Option<Category>), ClientError> {
        if report.positives < self.min_positives {
            return Ok((Verdict::Benign, None));
        }
        match self.map_families(&report.families) {
            Some(c) => Ok((Verdict::Malware, Some(c))),
            None => Err(ClientError::UnmappableCategory(report.families.join(";"))),
        }
    }
}

fn family_tokens(family: &str) -> Vec<String> {
    family
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}
