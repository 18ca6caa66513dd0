use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("dataset is missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: label must be 0 or 1, got `{value}`")]
    BadLabel { row: u64, value: String },
    #[error("row {row}: unknown category `{value}`")]
    UnknownCategory { row: u64, value: String },
    #[error("row {row}: benign record carries a category")]
    CategoryOnBenign { row: u64 },
    #[error("row {row}: empty id")]
    EmptyId { row: u64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The eleven malware categories, in class-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Adware,
    Spyware,
    Ransomware,
    Clicker,
    Dropper,
    Downloader,
    Riskware,
    SmsSender,
    HorseTrojan,
    Backdoor,
    Banker,
}

impl Category {
    pub const ALL: [Category; 11] = [
        Category::Adware,
        Category::Spyware,
        Category::Ransomware,
        Category::Clicker,
        Category::Dropper,
        Category::Downloader,
        Category::Riskware,
        Category::SmsSender,
        Category::HorseTrojan,
        Category::Backdoor,
        Category::Banker,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Adware => "adware",
            Category::Spyware => "spyware",
            Category::Ransomware => "ransomware",
            Category::Clicker => "clicker",
            Category::Dropper => "dropper",
            Category::Downloader => "downloader",
            Category::Riskware => "riskware",
            Category::SmsSender => "sms-sender",
            Category::HorseTrojan => "horse-trojan",
            Category::Backdoor => "backdoor",
            Category::Banker => "banker",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn names() -> Vec<String> {
        Self::ALL.iter().map(|c| c.as_str().to_string()).collect()
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

/// One dataset row: `id,text,label,category`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    pub label: u8,
    pub category: Option<Category>,
}

impl DatasetRecord {
    pub fn benign(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: 0,
            category: None,
        }
    }

    pub fn malware(id: impl Into<String>, text: impl Into<String>, category: Option<Category>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            label: 1,
            category,
        }
    }

    /// Class index among benign + the eleven categories (0 = benign).
    pub fn class_index(&self) -> Option<usize> {
        match (self.label, self.category) {
            (0, None) => Some(0),
            (1, Some(c)) => Some(c.index() + 1),
            _ => None,
        }
    }
}

const COLUMNS: [&str; 4] = ["id", "text", "label", "category"];

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, PreprocessError> {
    read_dataset_from(std::fs::File::open(path)?)
}

pub fn read_dataset_from<R: Read>(reader: R) -> Result<Vec<DatasetRecord>, PreprocessError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut pos = [0usize; 4];
    for (slot, name) in pos.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| PreprocessError::MissingColumn(name.to_string()))?;
    }

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(pos[i]).unwrap_or("");
        let id = field(0).trim();
        if id.is_empty() {
            return Err(PreprocessError::EmptyId { row: line });
        }
        let label = match field(2).trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(PreprocessError::BadLabel {
                    row: line,
                    value: other.to_string(),
                })
            }
        };
        let category = match field(3).trim() {
            "" => None,
            name => Some(
                name.parse::<Category>()
                    .map_err(|value| PreprocessError::UnknownCategory { row: line, value })?,
            ),
        };
        if label == 0 && category.is_some() {
            return Err(PreprocessError::CategoryOnBenign { row: line });
        }
        out.push(DatasetRecord {
            id: id.to_string(),
            text: field(1).to_string(),
            label,
            category,
        });
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<(), PreprocessError> {
    let file = std::fs::File::create(path)?;
    write_dataset_to(std::io::BufWriter::new(file), records)
}

pub fn write_dataset_to<W: Write>(writer: W, records: &[DatasetRecord]) -> Result<(), PreprocessError> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::NonNumeric)
        .from_writer(writer);
    w.write_record(COLUMNS)?;
    for r in records {
        let label = r.label.to_string();
        let category = r.category.map_or("", Category::as_str);
        w.write_record([r.id.as_str(), r.text.as_str(), label.as_str(), category])?;
    }
    w.flush()?;
    Ok(())
}

/// Stratified split by `(label, category)`. Each stratum sends
/// `round(n * test_fraction)` records (at most `n - 1`) to the test side;
/// strata with fewer than two records go to train. Both halves keep the
/// input order.
pub fn split_train_test(
    records: &[DatasetRecord],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>), PreprocessError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(PreprocessError::InvalidFraction(test_fraction));
    }
    if records.is_empty() {
        return Err(PreprocessError::EmptyDataset);
    }
    let mut strata: BTreeMap<(u8, Option<Category>), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry((r.label, r.category)).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; records.len()];
    for ((label, category), mut members) in strata {
        let n = members.len();
        if n < 2 {
            warn!(
                "stratum (label {label}, category {}) has {n} record; kept in train",
                category.map_or("-", Category::as_str)
            );
            continue;
        }
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - 1);
        members.shuffle(&mut rng);
        for &i in &members[..n_test] {
            is_test[i] = true;
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (r, t) in records.iter().zip(is_test) {
        if t {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((train, test))
}
