//! Word-level vocabulary, fixed-length encoding and MLM masking.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const N_SPECIALS: usize = SPECIALS.len();

pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary max size {0} leaves no room after the 5 special tokens")]
    MaxSizeTooSmall(usize),
    #[error("vocab file line {line}: {reason}")]
    BadVocabFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token ↔ id map with the special tokens at ids 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    pub max_size: usize,
    pub min_freq: u64,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, max_size: usize, min_freq: u64) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self {
            tokens,
            ids,
            max_size,
            min_freq,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id` lines, specials first.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self, TokenizerError> {
        let bad = |line: usize, reason: String| TokenizerError::BadVocabFile { line, reason };
        let mut by_id: BTreeMap<u32, String> = BTreeMap::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (n, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| bad(n, "expected `token<TAB>id`".into()))?;
            let id: u32 = id.trim().parse().map_err(|_| bad(n, format!("bad id `{id}`")))?;
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(bad(n, format!("invalid token `{tok}`")));
            }
            if let Some(prev) = seen.insert(tok.to_string(), n) {
                return Err(bad(n, format!("token `{tok}` already defined on line {prev}")));
            }
            if by_id.insert(id, tok.to_string()).is_some() {
                return Err(bad(n, format!("id {id} assigned twice")));
            }
        }
        let tokens: Vec<String> = by_id.values().cloned().collect();
        if by_id.keys().copied().ne(0..tokens.len() as u32) {
            return Err(bad(0, "ids are not contiguous from 0".into()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(bad(0, format!("special token {s} must have id {i}")));
            }
        }
        let n = tokens.len();
        Ok(Self::from_tokens(tokens, n, 1))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

/// Whitespace-split word vocabulary. Words seen fewer than `min_freq` times
/// are dropped; of the rest, the `max_size - 5` most frequent are kept, ties
/// broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize, min_freq: u64) -> Result<Vocab, TokenizerError> {
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if max_size < N_SPECIALS {
        return Err(TokenizerError::MaxSizeTooSmall(max_size));
    }
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for text in corpus {
        for w in text.as_ref().split_whitespace() {
            *freq.entry(w).or_default() += 1;
        }
    }
    let mut candidates: Vec<(&str, u64)> = freq
        .into_iter()
        .filter(|&(w, f)| f >= min_freq && !SPECIALS.contains(&w))
        .collect();
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    candidates.truncate(max_size - N_SPECIALS);

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(candidates.into_iter().map(|(w, _)| w.to_string()));
    Ok(Vocab::from_tokens(tokens, max_size, min_freq))
}

/// Fixed-length id sequence: `[CLS] words… [SEP] [PAD]…`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub original_length: usize,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens between `[CLS]` and `[SEP]`, `[UNK]` included.
    pub fn decode(&self, vocab: &Vocab) -> Vec<String> {
        self.ids[1..self.original_length.saturating_sub(1)]
            .iter()
            .map(|&id| vocab.token(id).unwrap_or(SPECIALS[UNK as usize]).to_string())
            .collect()
    }
}

/// Encodes `text`, keeping the first `max_seq_len - 2` words.
pub fn encode(text: &str, vocab: &Vocab, max_seq_len: usize) -> TokenizedSequence {
    assert!(max_seq_len >= 3, "max_seq_len must be at least 3");
    let mut ids = Vec::with_capacity(max_seq_len);
    ids.push(CLS);
    ids.extend(
        text.split_whitespace()
            .take(max_seq_len - 2)
            .map(|w| vocab.id(w).unwrap_or(UNK)),
    );
    ids.push(SEP);
    let original_length = ids.len();
    ids.resize(max_seq_len, PAD);
    let mut attention_mask = vec![1u8; original_length];
    attention_mask.resize(max_seq_len, 0);
    TokenizedSequence {
        ids,
        attention_mask,
        original_length,
    }
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < N_SPECIALS
}

/// Selects each word position (anything but `[CLS]`, `[SEP]`, `[PAD]`,
/// `[MASK]`) with probability `mask_rate`;
/// a selected position becomes `[MASK]` (80%), a random non-special id
/// (10%) or stays as is (10%). `labels[i]` holds the original id at
/// selected positions.
pub fn mask_for_mlm(
    seq: &TokenizedSequence,
    vocab_size: usize,
    mask_rate: f64,
    seed: u64,
) -> (TokenizedSequence, Vec<Option<u32>>) {
    assert!((0.0..1.0).contains(&mask_rate), "mask_rate must lie in [0, 1)");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = seq.clone();
    let mut labels = vec![None; seq.ids.len()];
    for (i, &id) in seq.ids.iter().enumerate().take(seq.original_length) {
        if is_special(id) && id != UNK {
            continue;
        }
        if !rng.random_bool(mask_rate) {
            continue;
        }
        labels[i] = Some(id);
        let roll: f64 = rng.random();
        masked.ids[i] = if roll < 0.8 {
            MASK
        } else if roll < 0.9 && vocab_size > N_SPECIALS {
            rng.random_range(N_SPECIALS as u32..vocab_size as u32)
        } else {
            id
        };
    }
    (masked, labels)
}
