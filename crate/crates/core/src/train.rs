//! Fine-tuning loop, evaluation, inference and MLM pretraining.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::metrics::{MetricsError, MetricsReport};
use crate::model::{Batch, EncoderConfig, EncoderModel, ModelError};
use crate::preprocess::{clean_text, split_train_test, Category, CleaningConfig, DatasetRecord, PreprocessError};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, TensorError};
use crate::tokenizer::{encode, mask_for_mlm, TokenizedSequence, Vocab};

pub const BINARY_LR: f64 = 2e-5;
pub const MULTI_LR: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_MAX_SEQ_LEN: usize = 128;
pub const SUPPORTED_MAX_SEQ_LEN: usize = 512;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("record `{0}` has no category but the task is multi-category")]
    MissingCategory(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("unknown task `{0}` (expected binary or multi)")]
    UnknownTask(String),
    #[error("model checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Binary,
    MultiCategory,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "multi" | "multi-category" => Ok(Task::MultiCategory),
            other => Err(TrainError::UnknownTask(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Binary => "binary",
            Task::MultiCategory => "multi",
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            Task::Binary => 2,
            Task::MultiCategory => Category::ALL.len(),
        }
    }

    pub fn class_names(self) -> Vec<String> {
        match self {
            Task::Binary => vec!["benign".into(), "malware".into()],
            Task::MultiCategory => Category::names(),
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Task::Binary => BINARY_LR,
            Task::MultiCategory => MULTI_LR,
        }
    }

    /// Target class of `record` under this task.
    pub fn label(self, record: &DatasetRecord) -> Result<usize> {
        match self {
            Task::Binary => Ok(record.label as usize),
            Task::MultiCategory => record
                .category
                .map(Category::index)
                .ok_or_else(|| TrainError::MissingCategory(record.id.clone())),
        }
    }

    /// The records this task trains on: everything for binary, categorised
    /// malware for multi-category.
    pub fn select(self, records: &[DatasetRecord]) -> Vec<DatasetRecord> {
        match self {
            Task::Binary => records.to_vec(),
            Task::MultiCategory => records.iter().filter(|r| r.category.is_some()).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    /// Smallest loss decrease that counts as an improvement.
    pub min_delta: f64,
    /// Stop once the monitored loss is at or below this value.
    pub target_loss: Option<f64>,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub max_seq_len: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            lr: task.default_lr(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: 30,
            patience: 2,
            min_delta: 0.0,
            target_loss: None,
            clip_norm: Some(1.0),
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            validation_fraction: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(3..=SUPPORTED_MAX_SEQ_LEN).contains(&self.max_seq_len) {
            return bad(format!(
                "max_seq_len {} outside 3..={SUPPORTED_MAX_SEQ_LEN}",
                self.max_seq_len
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!(
                "validation fraction {} outside [0, 1)",
                self.validation_fraction
            ));
        }
        if self.min_delta.is_nan() || self.min_delta < 0.0 {
            return bad("min_delta must be non-negative".into());
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("clip norm must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Encoder shape knobs settable from a run file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = EncoderConfig::desk(1, 2);
        Self {
            n_layers: d.n_layers,
            hidden: d.hidden,
            n_heads: d.n_heads,
            ff: d.ff,
            dropout: d.dropout,
        }
    }
}

impl ModelShape {
    pub fn encoder_config(&self, vocab_size: usize, n_classes: usize, max_seq_len: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            hidden: self.hidden,
            n_heads: self.n_heads,
            ff: self.ff,
            vocab_size,
            max_positions: max_seq_len,
            n_classes,
            dropout: self.dropout,
            mlm_head: false,
        }
    }
}

/// Flat `key = value` run file; unset keys keep their defaults.
#[derive(Debug, Clone, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub min_delta: Option<f64>,
    pub target_loss: Option<f64>,
    pub clip_norm: Option<f64>,
    pub max_seq_len: Option<usize>,
    pub validation_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub n_layers: Option<usize>,
    pub hidden: Option<usize>,
    pub n_heads: Option<usize>,
    pub ff: Option<usize>,
    pub dropout: Option<f64>,
    pub vocab_max_size: Option<usize>,
    pub vocab_min_freq: Option<u64>,
}

impl RunFile {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn apply(&self, task: Task) -> (TrainConfig, ModelShape) {
        let mut c = TrainConfig::for_task(task);
        let mut m = ModelShape::default();
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(c.lr, self.lr);
        set!(c.beta1, self.beta1);
        set!(c.beta2, self.beta2);
        set!(c.batch_size, self.batch_size);
        set!(c.max_epochs, self.max_epochs);
        set!(c.patience, self.patience);
        set!(c.min_delta, self.min_delta);
        if self.target_loss.is_some() {
            c.target_loss = self.target_loss;
        }
        set!(c.max_seq_len, self.max_seq_len);
        set!(c.validation_fraction, self.validation_fraction);
        set!(c.seed, self.seed);
        if let Some(v) = self.clip_norm {
            c.clip_norm = (v > 0.0).then_some(v);
        }
        set!(m.n_layers, self.n_layers);
        set!(m.hidden, self.hidden);
        set!(m.n_heads, self.n_heads);
        set!(m.ff, self.ff);
        set!(m.dropout, self.dropout);
        (c, m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    TargetReached,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max-epochs",
            StopReason::EarlyStop => "early-stop",
            StopReason::TargetReached => "target-reached",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Tab-separated lines: `epoch train_loss val_loss val_acc seconds`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\tval_acc\tseconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.3}",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.seconds
            );
        }
        let _ = writeln!(s, "# stop = {}", self.stop_reason.as_str());
        let _ = writeln!(s, "# best_epoch = {}", self.best_epoch);
        s
    }
}

/// Shuffled batch index lists for one epoch; the permutation depends only
/// on `(seed, epoch)`.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn one_hot(labels: &[usize], n_classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * n_classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), n_classes], data).expect("one-hot shape")
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct Encoded {
    seqs: Vec<TokenizedSequence>,
    labels: Vec<usize>,
}

fn encode_records(records: &[DatasetRecord], vocab: &Vocab, task: Task, max_seq_len: usize) -> Result<Encoded> {
    let mut seqs = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        labels.push(task.label(r)?);
        seqs.push(encode(&r.text, vocab, max_seq_len));
    }
    Ok(Encoded { seqs, labels })
}

/// One optimisation step on `idx`; returns (loss, correct predictions).
fn step(
    model: &mut EncoderModel,
    adam: &mut AdamState,
    data: &Encoded,
    idx: &[usize],
    clip: Option<f64>,
    dropout_seed: u64,
) -> Result<(f64, usize)> {
    let seqs: Vec<&TokenizedSequence> = idx.iter().map(|&i| &data.seqs[i]).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let batch = Batch::from_sequences(&seqs);
    let mut g = Graph::training(dropout_seed);
    let logits = model.classify_logits(&mut g, &batch)?;
    let loss = g.cross_entropy(logits, &one_hot(&labels, model.config.n_classes))?;
    let correct = g
        .value(logits)
        .data()
        .chunks(model.config.n_classes)
        .zip(&labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let grads = g.backward(loss)?;
    model.store.zero_grad();
    model.store.accumulate(&g, &grads);
    if let Some(c) = clip {
        model.store.clip_grad_norm(c);
    }
    adam.step(&mut model.store)?;
    Ok((g.value(loss).item(), correct))
}

/// Mean loss, predictions and probabilities over `data` in eval mode.
fn score(model: &EncoderModel, data: &Encoded) -> Result<(f64, Vec<usize>, Vec<Vec<f64>>)> {
    let c = model.config.n_classes;
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(data.seqs.len());
    let mut probs = Vec::with_capacity(data.seqs.len());
    for start in (0..data.seqs.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(data.seqs.len());
        let seqs: Vec<&TokenizedSequence> = data.seqs[start..end].iter().collect();
        let mut g = Graph::new();
        let logits = model.classify_logits(&mut g, &Batch::from_sequences(&seqs))?;
        let loss = g.cross_entropy(logits, &one_hot(&data.labels[start..end], c))?;
        loss_sum += g.value(loss).item() * (end - start) as f64;
        let sm = g.softmax(logits, 1)?;
        for row in g.value(sm).data().chunks(c) {
            preds.push(argmax(row));
            probs.push(row.to_vec());
        }
    }
    Ok((loss_sum / data.seqs.len().max(1) as f64, preds, probs))
}

fn accuracy_of(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Carves a stratified validation set off `records` (see
/// [`split_train_test`]); returns `(train, validation)`.
pub fn carve_validation(
    records: &[DatasetRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    if fraction == 0.0 {
        return Ok((records.to_vec(), Vec::new()));
    }
    Ok(split_train_test(records, fraction, seed)?)
}

/// Fine-tunes `model` in place. After the loop the parameters of the epoch
/// with the lowest validation loss (training loss if `val_records` is
/// empty) are restored.
pub fn train(
    model: &mut EncoderModel,
    train_records: &[DatasetRecord],
    val_records: &[DatasetRecord],
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if model.config.n_classes != config.task.n_classes() {
        return Err(TrainError::BadConfig(format!(
            "model has {} classes, task {} needs {}",
            model.config.n_classes,
            config.task.as_str(),
            config.task.n_classes()
        )));
    }
    let train_data = encode_records(train_records, vocab, config.task, config.max_seq_len)?;
    let val_data = encode_records(val_records, vocab, config.task, config.max_seq_len)?;
    let mut adam = AdamState::new(config.adam(), &model.store)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for idx in epoch_batches(train_data.seqs.len(), config.batch_size, config.seed, epoch) {
            let (loss, hits) = step(model, &mut adam, &train_data, &idx, config.clip_norm, seeds.random())?;
            loss_sum += loss * idx.len() as f64;
            correct += hits;
        }
        let n = train_data.seqs.len() as f64;
        let (val_loss, val_accuracy) = if val_data.seqs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (l, p, _) = score(model, &val_data)?;
            (l, accuracy_of(&p, &val_data.labels))
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_loss,
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {} train_loss {:.5} train_acc {:.4} val_loss {:.5} val_acc {:.4} ({:.1}s)",
            record.epoch, record.train_loss, record.train_accuracy, val_loss, val_accuracy, record.seconds
        );
        let monitored = if val_data.seqs.is_empty() {
            record.train_loss
        } else {
            val_loss
        };
        epochs.push(record);

        if best.as_ref().is_none_or(|(b, _, _)| monitored < *b - config.min_delta) {
            let snapshot = model.store.iter().map(|(_, p)| p.value.clone()).collect();
            best = Some((monitored, epoch + 1, snapshot));
            since_best = 0;
            if config.target_loss.is_some_and(|t| monitored <= t) {
                stop_reason = StopReason::TargetReached;
                break;
            }
        } else {
            since_best += 1;
            if since_best >= config.patience {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, e, snapshot)) => {
            for (p, v) in model.store.iter_mut().zip(snapshot) {
                p.value = v;
            }
            e
        }
        None => 0,
    };
    for p in model.store.iter_mut() {
        p.grad = None;
    }
    Ok(TrainHistory {
        epochs,
        stop_reason,
        best_epoch,
    })
}

/// Repeats optimisation steps on one fixed set of records; returns the loss
/// of every step.
pub fn train_steps(
    model: &mut EncoderModel,
    records: &[DatasetRecord],
    vocab: &Vocab,
    config: &TrainConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let data = encode_records(records, vocab, config.task, config.max_seq_len)?;
    let idx: Vec<usize> = (0..records.len()).collect();
    let mut adam = AdamState::new(config.adam(), &model.store)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(step(model, &mut adam, &data, &idx, config.clip_norm, seeds.random())?.0);
    }
    Ok(losses)
}

/// Eval-mode metrics over `records`.
pub fn evaluate(
    model: &EncoderModel,
    records: &[DatasetRecord],
    vocab: &Vocab,
    task: Task,
    max_seq_len: usize,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let data = encode_records(records, vocab, task, max_seq_len)?;
    let (loss, preds, _) = score(model, &data)?;
    Ok(MetricsReport::from_predictions(
        task.as_str(),
        &task.class_names(),
        &data.labels,
        &preds,
        loss,
    )?)
}

/// Eval-mode predictions (argmax) for `records`, without metrics.
pub fn predict_records(
    model: &EncoderModel,
    records: &[DatasetRecord],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<Vec<usize>> {
    let data = Encoded {
        seqs: records.iter().map(|r| encode(&r.text, vocab, max_seq_len)).collect(),
        labels: vec![0; records.len()],
    };
    if model.config.n_classes == 0 {
        return Ok(Vec::new());
    }
    Ok(score(model, &data)?.1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub class_name: String,
    pub probabilities: Vec<f64>,
}

/// Cleans, encodes and classifies one raw manifest.
pub fn predict(
    model: &EncoderModel,
    raw_manifest_text: &str,
    vocab: &Vocab,
    task: Task,
    cleaning: &CleaningConfig,
    max_seq_len: usize,
) -> Result<Prediction> {
    let cleaned = clean_text(raw_manifest_text, cleaning);
    let seq = encode(&cleaned, vocab, max_seq_len);
    let logits = model.classify(&seq)?;
    let mut g = Graph::new();
    let l = g.constant(Tensor::vector(logits));
    let p = g.softmax(l, 0)?;
    let probabilities = g.value(p).data().to_vec();
    let label = argmax(&probabilities);
    Ok(Prediction {
        label,
        class_name: task.class_names()[label].clone(),
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            mask_rate: crate::tokenizer::DEFAULT_MASK_RATE,
            lr: MULTI_LR,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            seed: 0,
        }
    }
}

fn masked_batch(
    seqs: &[&TokenizedSequence],
    vocab_size: usize,
    mask_rate: f64,
    seed: u64,
) -> (Vec<TokenizedSequence>, Vec<usize>, Vec<usize>) {
    let mut masked = Vec::with_capacity(seqs.len());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let seq_len = seqs.iter().map(|s| s.original_length).max().unwrap_or(1);
    for (b, s) in seqs.iter().enumerate() {
        let (m, labels) = mask_for_mlm(s, vocab_size, mask_rate, seed.wrapping_add(b as u64));
        for (t, l) in labels.iter().enumerate() {
            if let Some(id) = l {
                rows.push(b * seq_len + t);
                targets.push(*id as usize);
            }
        }
        masked.push(m);
    }
    (masked, rows, targets)
}

/// Masked-language-model training on `texts`; returns the loss of every
/// step that had at least one masked position.
pub fn pretrain_mlm(model: &mut EncoderModel, texts: &[String], vocab: &Vocab, config: &MlmConfig) -> Result<Vec<f64>> {
    if texts.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if model.mlm.is_none() {
        return Err(ModelError::MlmHeadAbsent.into());
    }
    let seqs: Vec<TokenizedSequence> = texts.iter().map(|t| encode(t, vocab, config.max_seq_len)).collect();
    let v = model.config.vocab_size;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &model.store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::new();
    for _ in 0..config.steps {
        let idx: Vec<usize> = (0..config.batch_size.min(seqs.len()))
            .map(|_| rng.random_range(0..seqs.len()))
            .collect();
        let picked: Vec<&TokenizedSequence> = idx.iter().map(|&i| &seqs[i]).collect();
        let (masked, rows, targets) = masked_batch(&picked, v, config.mask_rate, rng.random());
        if rows.is_empty() {
            continue;
        }
        let refs: Vec<&TokenizedSequence> = masked.iter().collect();
        let batch = Batch::from_sequences(&refs);
        let mut g = Graph::training(rng.random());
        let logits = model.mlm_logits_var(&mut g, &batch)?;
        let picked_logits = g.gather_rows(logits, &rows)?;
        let loss = g.cross_entropy(picked_logits, &one_hot(&targets, v))?;
        let grads = g.backward(loss)?;
        model.store.zero_grad();
        model.store.accumulate(&g, &grads);
        model.store.clip_grad_norm(1.0);
        adam.step(&mut model.store)?;
        losses.push(g.value(loss).item());
    }
    for p in model.store.iter_mut() {
        p.grad = None;
    }
    Ok(losses)
}

/// Fraction of masked positions whose original token is the argmax of the
/// MLM logits, over one seeded masking of each text.
pub fn mlm_accuracy(
    model: &EncoderModel,
    texts: &[String],
    vocab: &Vocab,
    mask_rate: f64,
    max_seq_len: usize,
    seed: u64,
) -> Result<f64> {
    let v = model.config.vocab_size;
    let seqs: Vec<TokenizedSequence> = texts.iter().map(|t| encode(t, vocab, max_seq_len)).collect();
    let refs: Vec<&TokenizedSequence> = seqs.iter().collect();
    let (masked, rows, targets) = masked_batch(&refs, v, mask_rate, seed);
    if rows.is_empty() {
        return Ok(f64::NAN);
    }
    let refs: Vec<&TokenizedSequence> = masked.iter().collect();
    let mut g = Graph::new();
    let logits = model.mlm_logits_var(&mut g, &Batch::from_sequences(&refs))?;
    let picked = g.gather_rows(logits, &rows)?;
    let hits = g
        .value(picked)
        .data()
        .chunks(v)
        .zip(&targets)
        .filter(|(row, &t)| argmax(row) == t)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// A trained classifier plus what is needed to use it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: EncoderModel,
    pub task: Task,
    pub max_seq_len: usize,
    pub vocab_ref: String,
    pub vocab_sha256: String,
}

impl TrainedModel {
    pub fn class_names(&self) -> Vec<String> {
        self.task.class_names()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut extra = String::new();
        let _ = writeln!(extra, "task = {}", self.task.as_str());
        let _ = writeln!(extra, "classes = {}", self.class_names().join(","));
        let _ = writeln!(extra, "max_seq_len = {}", self.max_seq_len);
        let _ = writeln!(extra, "vocab_ref = {}", self.vocab_ref);
        let _ = writeln!(extra, "vocab_sha256 = {}", self.vocab_sha256);
        self.model.to_checkpoint(&extra)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)?;
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, header) = EncoderModel::from_checkpoint(ckpt)?;
        let field = |k: &str| {
            header
                .get(k)
                .cloned()
                .ok_or_else(|| TrainError::BadCheckpoint(format!("missing `{k}`")))
        };
        let task = Task::parse(&field("task")?)?;
        let max_seq_len = field("max_seq_len")?
            .parse()
            .map_err(|_| TrainError::BadCheckpoint("bad max_seq_len".into()))?;
        Ok(Self {
            model,
            task,
            max_seq_len,
            vocab_ref: field("vocab_ref")?,
            vocab_sha256: field("vocab_sha256")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}
