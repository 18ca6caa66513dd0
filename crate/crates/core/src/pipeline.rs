//! Glue shared by the command line and the Python bindings.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::apk::{decode_axml, manifest_from_apk, ApkError};
use crate::model::EncoderModel;
use crate::preprocess::DatasetRecord;
use crate::tokenizer::{build_vocab, TokenizerError, Vocab};
use crate::train::{carve_validation, train, RunFile, Task, TrainError, TrainHistory, TrainedModel};

pub const DEFAULT_VOCAB_MAX_SIZE: usize = 30_000;
pub const DEFAULT_VOCAB_MIN_FREQ: u64 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("vocabulary hash {actual} does not match the checkpoint ({expected})")]
    VocabMismatch { expected: String, actual: String },
    #[error("no {0} records in dataset")]
    NoRecords(&'static str),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Apk(#[from] ApkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub fn vocab_sha256(vocab: &Vocab) -> String {
    hex::encode(Sha256::digest(vocab.to_tsv().as_bytes()))
}

pub fn vocab_for(records: &[DatasetRecord], max_size: usize, min_freq: u64) -> Result<Vocab> {
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    Ok(build_vocab(&texts, max_size, min_freq)?)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub vocab: Vocab,
    pub history: TrainHistory,
}

/// Selects the task's records, carves a validation set, builds the
/// vocabulary if none is given, and trains a fresh model.
pub fn train_on_dataset(
    records: &[DatasetRecord],
    task: Task,
    run: &RunFile,
    vocab: Option<Vocab>,
    vocab_ref: &str,
) -> Result<TrainOutcome> {
    let (config, shape) = run.apply(task);
    config.validate()?;
    let selected = task.select(records);
    if selected.is_empty() {
        return Err(PipelineError::NoRecords(task.as_str()));
    }
    let vocab = match vocab {
        Some(v) => v,
        None => vocab_for(
            &selected,
            run.vocab_max_size.unwrap_or(DEFAULT_VOCAB_MAX_SIZE),
            run.vocab_min_freq.unwrap_or(DEFAULT_VOCAB_MIN_FREQ),
        )?,
    };
    let (train_set, val_set) = carve_validation(&selected, config.validation_fraction, config.seed)?;
    let encoder = shape.encoder_config(vocab.len(), task.n_classes(), config.max_seq_len);
    let mut model = EncoderModel::new(encoder, config.seed).map_err(TrainError::from)?;
    let history = train(&mut model, &train_set, &val_set, &vocab, &config)?;
    Ok(TrainOutcome {
        model: TrainedModel {
            model,
            task,
            max_seq_len: config.max_seq_len,
            vocab_ref: vocab_ref.to_string(),
            vocab_sha256: vocab_sha256(&vocab),
        },
        vocab,
        history,
    })
}

/// Loads a checkpoint and its vocabulary (`vocab_override`, else the
/// `vocab_ref` file next to the checkpoint) and checks the vocabulary hash.
pub fn load_model(checkpoint: &Path, vocab_override: Option<&Path>) -> Result<(TrainedModel, Vocab)> {
    let model = TrainedModel::load(checkpoint)?;
    let vocab_path: PathBuf = match vocab_override {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(&model.vocab_ref),
    };
    let vocab = Vocab::load(&vocab_path)?;
    let actual = vocab_sha256(&vocab);
    if actual != model.vocab_sha256 {
        return Err(PipelineError::VocabMismatch {
            expected: model.vocab_sha256.clone(),
            actual,
        });
    }
    Ok((model, vocab))
}

/// Raw manifest text from an APK, a binary AXML file or a textual XML file.
pub fn manifest_text_from_path(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let doc = if bytes.starts_with(b"PK\x03\x04") || bytes.starts_with(b"PK\x05\x06") {
        manifest_from_apk(bytes.as_slice())?
    } else {
        decode_axml(&bytes)?
    };
    Ok(doc.xml_text)
}
