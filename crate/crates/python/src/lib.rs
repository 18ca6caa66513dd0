//! Python bindings: dataset records, cleaning, vocabulary, metrics and a
//! trainable classifier.

use std::path::PathBuf;

use droidformer::metrics::{self, ConfusionCounts, MetricsReport};
use droidformer::pipeline::{self, load_model, train_on_dataset, vocab_sha256};
use droidformer::preprocess::{self, Category, CleaningConfig, DatasetRecord, VocabProfile};
use droidformer::tokenizer::{self, Vocab};
use droidformer::train::{self, RunFile, Task, TrainConfig, TrainHistory, TrainedModel};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_task(task: &str) -> PyResult<Task> {
    Task::parse(task).map_err(value_err)
}

fn lexicon(path: Option<PathBuf>) -> PyResult<CleaningConfig> {
    match path {
        Some(p) => CleaningConfig::from_file(&p).map_err(io_err),
        None => Ok(CleaningConfig::default_lexicon()),
    }
}

/// One `id,text,label,category` row.
#[pyclass(name = "Record", module = "droidformer", from_py_object)]
#[derive(Clone)]
struct PyRecord {
    #[pyo3(get)]
    id: String,
    #[pyo3(get)]
    text: String,
    #[pyo3(get)]
    label: u8,
    #[pyo3(get)]
    category: Option<String>,
}

impl PyRecord {
    fn to_core(&self) -> PyResult<DatasetRecord> {
        let category = self
            .category
            .as_deref()
            .map(|c| c.parse::<Category>().map_err(value_err))
            .transpose()?;
        match self.label {
            0 if category.is_none() => Ok(DatasetRecord::benign(&self.id, &self.text)),
            0 => Err(value_err(format!("benign record `{}` has a category", self.id))),
            1 => Ok(DatasetRecord::malware(&self.id, &self.text, category)),
            l => Err(value_err(format!("label must be 0 or 1, got {l}"))),
        }
    }
}

impl From<&DatasetRecord> for PyRecord {
    fn from(r: &DatasetRecord) -> Self {
        Self {
            id: r.id.clone(),
            text: r.text.clone(),
            label: r.label,
            category: r.category.map(|c| c.as_str().to_string()),
        }
    }
}

#[pymethods]
impl PyRecord {
    #[new]
    #[pyo3(signature = (id, text, label, category=None))]
    fn new(id: String, text: String, label: u8, category: Option<String>) -> PyResult<Self> {
        let r = Self {
            id,
            text,
            label,
            category,
        };
        r.to_core()?;
        Ok(r)
    }

    fn __repr__(&self) -> String {
        format!(
            "Record(id={:?}, label={}, category={:?}, text={} chars)",
            self.id,
            self.label,
            self.category,
            self.text.len()
        )
    }
}

fn to_core(records: &[PyRecord]) -> PyResult<Vec<DatasetRecord>> {
    records.iter().map(PyRecord::to_core).collect()
}

fn to_py(records: &[DatasetRecord]) -> Vec<PyRecord> {
    records.iter().map(PyRecord::from).collect()
}

#[pyfunction]
#[pyo3(signature = (raw, lexicon_path=None))]
fn clean_text(raw: &str, lexicon_path: Option<PathBuf>) -> PyResult<String> {
    Ok(preprocess::clean_text(raw, &lexicon(lexicon_path)?))
}

/// Raw manifest XML from an APK, binary AXML or text XML file.
#[pyfunction]
fn manifest_text(path: PathBuf) -> PyResult<String> {
    pipeline::manifest_text_from_path(&path).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (per_class, noise=0.0, seed=0))]
fn synthesize_corpus(per_class: usize, noise: f64, seed: u64) -> PyResult<Vec<PyRecord>> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(value_err("noise must be in [0, 1]"));
    }
    Ok(to_py(&preprocess::synthesize_corpus(
        per_class,
        &VocabProfile::default(),
        noise,
        seed,
    )))
}

#[pyfunction]
#[pyo3(signature = (records, test_fraction=0.2, seed=0))]
fn split_train_test(records: Vec<PyRecord>, test_fraction: f64, seed: u64) -> PyResult<(Vec<PyRecord>, Vec<PyRecord>)> {
    let (a, b) = preprocess::split_train_test(&to_core(&records)?, test_fraction, seed).map_err(value_err)?;
    Ok((to_py(&a), to_py(&b)))
}

#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<Vec<PyRecord>> {
    Ok(to_py(&preprocess::read_dataset(&path).map_err(io_err)?))
}

#[pyfunction]
fn write_dataset(path: PathBuf, records: Vec<PyRecord>) -> PyResult<()> {
    preprocess::write_dataset(&path, &to_core(&records)?).map_err(io_err)
}

#[pyclass(name = "Vocab", module = "droidformer", from_py_object)]
#[derive(Clone)]
struct PyVocab {
    inner: Vocab,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    #[pyo3(signature = (texts, max_size=pipeline::DEFAULT_VOCAB_MAX_SIZE, min_freq=pipeline::DEFAULT_VOCAB_MIN_FREQ))]
    fn build(texts: Vec<String>, max_size: usize, min_freq: u64) -> PyResult<Self> {
        Ok(Self {
            inner: tokenizer::build_vocab(&texts, max_size, min_freq).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Vocab::load(&path).map_err(io_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(io_err)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn sha256(&self) -> String {
        vocab_sha256(&self.inner)
    }

    /// `(ids, attention_mask, original_length)`.
    #[pyo3(signature = (text, max_seq_len=train::DEFAULT_MAX_SEQ_LEN))]
    fn encode(&self, text: &str, max_seq_len: usize) -> PyResult<(Vec<u32>, Vec<u8>, usize)> {
        if max_seq_len < 2 {
            return Err(value_err("max_seq_len must be at least 2"));
        }
        let s = tokenizer::encode(text, &self.inner, max_seq_len);
        Ok((s.ids, s.attention_mask, s.original_length))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
    ConfusionCounts::new(tp, tn, fp, fn_)
}

#[pyfunction]
fn accuracy(tp: u64, tn: u64, fp: u64, fn_: u64) -> PyResult<f64> {
    metrics::accuracy(&counts(tp, tn, fp, fn_)).map_err(value_err)
}

#[pyfunction]
fn mcc(tp: u64, tn: u64, fp: u64, fn_: u64) -> PyResult<f64> {
    metrics::mcc(&counts(tp, tn, fp, fn_)).map_err(value_err)
}

#[pyfunction]
fn f1(tp: u64, tn: u64, fp: u64, fn_: u64) -> PyResult<f64> {
    metrics::f1(&counts(tp, tn, fp, fn_)).map_err(value_err)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("task", &r.task)?;
    d.set_item("n_samples", r.n_samples)?;
    d.set_item("accuracy", r.accuracy)?;
    d.set_item("mcc", r.mcc)?;
    d.set_item("f1_macro", r.f1_macro)?;
    d.set_item("f1_positive", r.f1_positive)?;
    d.set_item("loss", r.loss)?;
    let per_class = PyDict::new(py);
    for (name, v) in r.class_names.iter().zip(&r.f1_per_class) {
        per_class.set_item(name, v)?;
    }
    d.set_item("f1_per_class", per_class)?;
    Ok(d)
}

/// Metrics for label vectors; `task` picks the class names.
#[pyfunction]
#[pyo3(signature = (truth, predicted, task="binary", loss=0.0))]
fn evaluate_predictions<'py>(
    py: Python<'py>,
    truth: Vec<usize>,
    predicted: Vec<usize>,
    task: &str,
    loss: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let task = parse_task(task)?;
    let r = MetricsReport::from_predictions(task.as_str(), &task.class_names(), &truth, &predicted, loss)
        .map_err(value_err)?;
    report_dict(py, &r)
}

/// Default training hyperparameters for a task.
#[pyfunction]
fn default_train_config<'py>(py: Python<'py>, task: &str) -> PyResult<Bound<'py, PyDict>> {
    let c = TrainConfig::for_task(parse_task(task)?);
    let d = PyDict::new(py);
    d.set_item("lr", c.lr)?;
    d.set_item("beta1", c.beta1)?;
    d.set_item("beta2", c.beta2)?;
    d.set_item("adam_eps", c.adam_eps)?;
    d.set_item("batch_size", c.batch_size)?;
    d.set_item("max_epochs", c.max_epochs)?;
    d.set_item("patience", c.patience)?;
    d.set_item("clip_norm", c.clip_norm)?;
    d.set_item("max_seq_len", c.max_seq_len)?;
    d.set_item("validation_fraction", c.validation_fraction)?;
    d.set_item("seed", c.seed)?;
    Ok(d)
}

fn history_list<'py>(py: Python<'py>, h: &TrainHistory) -> PyResult<Vec<Bound<'py, PyDict>>> {
    h.epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("train_loss", e.train_loss)?;
            d.set_item("train_accuracy", e.train_accuracy)?;
            d.set_item("val_loss", e.val_loss)?;
            d.set_item("val_accuracy", e.val_accuracy)?;
            Ok(d)
        })
        .collect()
}

/// A fine-tuned encoder with its vocabulary.
#[pyclass(name = "Classifier", module = "droidformer")]
struct PyClassifier {
    trained: TrainedModel,
    vocab: Vocab,
    history: Option<TrainHistory>,
}

#[pymethods]
impl PyClassifier {
    /// Trains a fresh model. `config` is run-file TOML (the same keys the
    /// CLI's `--config` accepts).
    #[staticmethod]
    #[pyo3(signature = (records, task, config=None, vocab=None))]
    fn train(
        py: Python<'_>,
        records: Vec<PyRecord>,
        task: &str,
        config: Option<&str>,
        vocab: Option<PyVocab>,
    ) -> PyResult<Self> {
        let task = parse_task(task)?;
        let run = match config {
            Some(text) => RunFile::parse(text).map_err(value_err)?,
            None => RunFile::default(),
        };
        let records = to_core(&records)?;
        let outcome = py
            .detach(|| train_on_dataset(&records, task, &run, vocab.map(|v| v.inner), "vocab.tsv"))
            .map_err(value_err)?;
        Ok(Self {
            trained: outcome.model,
            vocab: outcome.vocab,
            history: Some(outcome.history),
        })
    }

    /// Loads a checkpoint; the vocabulary defaults to the file the
    /// checkpoint names, next to it.
    #[staticmethod]
    #[pyo3(signature = (path, vocab_path=None))]
    fn load(path: PathBuf, vocab_path: Option<PathBuf>) -> PyResult<Self> {
        let (trained, vocab) = load_model(&path, vocab_path.as_deref()).map_err(value_err)?;
        Ok(Self {
            trained,
            vocab,
            history: None,
        })
    }

    /// Writes the checkpoint and its vocabulary (`<path stem>.vocab.tsv`
    /// unless given).
    #[pyo3(signature = (path, vocab_path=None))]
    fn save(&mut self, path: PathBuf, vocab_path: Option<PathBuf>) -> PyResult<()> {
        let vocab_path = vocab_path.unwrap_or_else(|| path.with_extension("vocab.tsv"));
        self.trained.vocab_ref = vocab_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.vocab.save(&vocab_path).map_err(io_err)?;
        self.trained.save(&path).map_err(io_err)
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.trained.task.as_str()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.trained.class_names()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.trained.model.num_params()
    }

    #[getter]
    fn vocab(&self) -> PyVocab {
        PyVocab {
            inner: self.vocab.clone(),
        }
    }

    /// Per-epoch records of the training run, if this model was trained in
    /// this session.
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Option<Vec<Bound<'py, PyDict>>>> {
        self.history.as_ref().map(|h| history_list(py, h)).transpose()
    }

    /// Classifies raw manifest text (cleaned first) or, with
    /// `cleaned=True`, already-cleaned text.
    #[pyo3(signature = (text, cleaned=false, lexicon_path=None))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        text: &str,
        cleaned: bool,
        lexicon_path: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cleaning = if cleaned {
            CleaningConfig::empty()
        } else {
            lexicon(lexicon_path)?
        };
        let p = train::predict(
            &self.trained.model,
            text,
            &self.vocab,
            self.trained.task,
            &cleaning,
            self.trained.max_seq_len,
        )
        .map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("label", p.label)?;
        d.set_item("class_name", p.class_name)?;
        let probs = PyDict::new(py);
        for (name, v) in self.trained.class_names().iter().zip(&p.probabilities) {
            probs.set_item(name, v)?;
        }
        d.set_item("probabilities", probs)?;
        Ok(d)
    }

    fn evaluate<'py>(&self, py: Python<'py>, records: Vec<PyRecord>) -> PyResult<Bound<'py, PyDict>> {
        let task = self.trained.task;
        let records = task.select(&to_core(&records)?);
        let r = py
            .detach(|| {
                train::evaluate(
                    &self.trained.model,
                    &records,
                    &self.vocab,
                    task,
                    self.trained.max_seq_len,
                )
            })
            .map_err(value_err)?;
        report_dict(py, &r)
    }
}

#[pymodule]
#[pyo3(name = "droidformer")]
fn droidformer_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRecord>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(clean_text, m)?)?;
    m.add_function(wrap_pyfunction!(manifest_text, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(split_train_test, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(mcc, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_predictions, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add("CATEGORIES", Category::names())?;
    Ok(())
}
