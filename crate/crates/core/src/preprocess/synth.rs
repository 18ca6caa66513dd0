//! Seeded manifest-like corpus with class-specific signature tokens.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Category, DatasetRecord};

/// Benign plus the eleven malware categories.
pub const N_CLASSES: usize = 12;

const STEMS: [&str; N_CLASSES] = [
    "Gallery", "AdPush", "Tracker", "Locker", "Clicker", "Dropper", "Fetcher", "Risky", "SmsPay", "Horse", "Shell",
    "Bank",
];

const SUFFIXES: [&str; 6] = ["Service", "Receiver", "Activity", "Provider", "Module", "Task"];

const BOILERPLATE: [&str; 40] = [
    "manifest",
    "android",
    "package",
    "com",
    "versionCode",
    "versionName",
    "uses",
    "permission",
    "INTERNET",
    "ACCESS",
    "NETWORK",
    "STATE",
    "application",
    "activity",
    "name",
    "label",
    "icon",
    "theme",
    "intent",
    "filter",
    "action",
    "MAIN",
    "category",
    "LAUNCHER",
    "exported",
    "true",
    "false",
    "allowBackup",
    "sdk",
    "minSdkVersion",
    "targetSdkVersion",
    "21",
    "33",
    "1",
    "0",
    "meta",
    "data",
    "value",
    "supportsRtl",
    "AppTheme",
];

/// Shape of the synthetic vocabulary and records.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabProfile {
    pub signature_tokens_per_class: usize,
    /// Leading entries of the built-in boilerplate list to use (≤ 40).
    pub boilerplate_tokens: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a non-forced position carries a signature token.
    pub signature_share: f64,
}

impl Default for VocabProfile {
    fn default() -> Self {
        Self {
            signature_tokens_per_class: 12,
            boilerplate_tokens: BOILERPLATE.len(),
            min_tokens: 12,
            max_tokens: 24,
            signature_share: 0.4,
        }
    }
}

impl VocabProfile {
    pub fn signature_token(&self, class: usize, j: usize) -> String {
        let stem = STEMS[class];
        let suffix = SUFFIXES[j % SUFFIXES.len()];
        match j / SUFFIXES.len() {
            0 => format!("{stem}{suffix}"),
            k => format!("{stem}{suffix}{k}"),
        }
    }

    pub fn signature_tokens(&self, class: usize) -> Vec<String> {
        (0..self.signature_tokens_per_class)
            .map(|j| self.signature_token(class, j))
            .collect()
    }

    pub fn boilerplate(&self) -> Vec<String> {
        BOILERPLATE[..self.boilerplate_tokens.min(BOILERPLATE.len())]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    /// Every token the generator may emit: signatures by class, then boilerplate.
    pub fn global_vocab(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..N_CLASSES).flat_map(|c| self.signature_tokens(c)).collect();
        v.extend(self.boilerplate());
        v
    }
}

/// Token frequencies as counted while generating.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusStats {
    pub token_counts: BTreeMap<String, u64>,
}

pub fn class_record(class: usize, id: String, text: String) -> DatasetRecord {
    match class {
        0 => DatasetRecord::benign(id, text),
        c => DatasetRecord::malware(id, text, Category::from_index(c - 1)),
    }
}

pub fn synthesize_corpus(n_per_class: usize, profile: &VocabProfile, noise_rate: f64, seed: u64) -> Vec<DatasetRecord> {
    synthesize_corpus_with_stats(n_per_class, profile, noise_rate, seed).0
}

/// Records ordered by class, `n_per_class` each. Every record starts with
/// one signature token of its class; with `noise_rate` each token
/// (including that one) is then replaced by a uniform draw from the global
/// vocabulary.
pub fn synthesize_corpus_with_stats(
    n_per_class: usize,
    profile: &VocabProfile,
    noise_rate: f64,
    seed: u64,
) -> (Vec<DatasetRecord>, CorpusStats) {
    assert!(n_per_class >= 1, "n_per_class must be at least 1");
    assert!((0.0..1.0).contains(&noise_rate), "noise_rate must lie in [0, 1)");
    assert!(profile.signature_tokens_per_class >= 1 && profile.boilerplate_tokens >= 1);
    assert!(profile.min_tokens >= 1 && profile.min_tokens <= profile.max_tokens);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let global = profile.global_vocab();
    let boiler = profile.boilerplate();
    let mut stats = CorpusStats::default();
    let mut records = Vec::with_capacity(n_per_class * N_CLASSES);

    for class in 0..N_CLASSES {
        let sigs = profile.signature_tokens(class);
        for i in 0..n_per_class {
            let len = rng.random_range(profile.min_tokens..=profile.max_tokens);
            let mut tokens: Vec<&str> = Vec::with_capacity(len);
            tokens.push(&sigs[rng.random_range(0..sigs.len())]);
            while tokens.len() < len {
                let t = if rng.random_bool(profile.signature_share) {
                    &sigs[rng.random_range(0..sigs.len())]
                } else {
                    &boiler[rng.random_range(0..boiler.len())]
                };
                tokens.push(t);
            }
            if noise_rate > 0.0 {
                for t in tokens.iter_mut() {
                    if rng.random_bool(noise_rate) {
                        *t = &global[rng.random_range(0..global.len())];
                    }
                }
            }
            for t in &tokens {
                *stats.token_counts.entry((*t).to_string()).or_default() += 1;
            }
            let id = hex::encode(Sha256::digest(format!("synth:{seed}:{class}:{i}")));
            records.push(class_record(class, id, tokens.join(" ")));
        }
    }
    (records, stats)
}
