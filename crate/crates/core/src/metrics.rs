//! Classification metrics: accuracy, Matthews correlation, F1 and macro-F1
//! over one-vs-rest confusion counts, plus the report type that carries them.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("confusion counts are all zero")]
    EmptyCounts,
    #[error("label vectors differ in length ({truth} vs {predicted})")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Binary (or one-vs-rest) confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    fn check(&self) -> Result<()> {
        if self.total() == 0 {
            Err(MetricsError::EmptyCounts)
        } else {
            Ok(())
        }
    }
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(c: &ConfusionCounts) -> Result<f64> {
    c.check()?;
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> Result<f64> {
    c.check()?;
    let (tp, tn, fp, fn_) = (c.tp as u128, c.tn as u128, c.fp as u128, c.fn_ as u128);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0) {
        return Ok(0.0);
    }
    let num = (tp * tn) as f64 - (fp * fn_) as f64;
    let den = ((factors[0] * factors[1]) as f64).sqrt() * ((factors[2] * factors[3]) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

/// `2TP / (2TP + FP + FN)`; 0 when the denominator is 0.
pub fn f1(c: &ConfusionCounts) -> Result<f64> {
    c.check()?;
    let den = 2 * c.tp + c.fp + c.fn_;
    if den == 0 {
        return Ok(0.0);
    }
    Ok((2 * c.tp) as f64 / den as f64)
}

/// Unweighted mean of per-class F1.
pub fn f1_macro(per_class: &[ConfusionCounts]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(MetricsError::EmptyCounts);
    }
    let mut total = 0.0;
    for c in per_class {
        total += f1(c)?;
    }
    Ok(total / per_class.len() as f64)
}

/// One-vs-rest counts for each class `0..n_classes`.
pub fn confusion_from_predictions(
    truth: &[usize],
    predicted: &[usize],
    n_classes: usize,
) -> Result<Vec<ConfusionCounts>> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    if let Some(&label) = truth.iter().chain(predicted).find(|&&l| l >= n_classes) {
        return Err(MetricsError::LabelOutOfRange { label, n_classes });
    }
    let mut counts = vec![ConfusionCounts::default(); n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        for (class, c) in counts.iter_mut().enumerate() {
            match (t == class, p == class) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
            }
        }
    }
    Ok(counts)
}

/// Fraction of exact matches across all classes.
pub fn multiclass_accuracy(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::EmptyCounts);
    }
    let hits = truth.iter().zip(predicted).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Evaluation summary in the column order ACC, F1, Loss, MCC.
///
/// `f1_macro` averages every class; `f1_positive` is the F1 of class 1 and
/// is only filled for binary tasks, alongside `mcc`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: String,
    pub class_names: Vec<String>,
    pub n_samples: usize,
    pub accuracy: f64,
    pub mcc: Option<f64>,
    pub f1_macro: f64,
    pub f1_positive: Option<f64>,
    pub f1_per_class: Vec<f64>,
    pub loss: f64,
}

impl MetricsReport {
    /// Builds a report from per-sample labels and the mean loss.
    pub fn from_predictions(
        task: &str,
        class_names: &[String],
        truth: &[usize],
        predicted: &[usize],
        loss: f64,
    ) -> Result<Self> {
        let n_classes = class_names.len();
        let counts = confusion_from_predictions(truth, predicted, n_classes)?;
        let accuracy = multiclass_accuracy(truth, predicted)?;
        let f1_per_class = counts.iter().map(f1).collect::<Result<Vec<_>>>()?;
        let binary = n_classes == 2;
        Ok(Self {
            task: task.to_string(),
            class_names: class_names.to_vec(),
            n_samples: truth.len(),
            accuracy,
            mcc: if binary { Some(mcc(&counts[1])?) } else { None },
            f1_macro: f1_macro(&counts)?,
            f1_positive: if binary { Some(f1_per_class[1]) } else { None },
            f1_per_class,
            loss,
        })
    }

    /// `key = value` lines, one metric per line.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "n_samples = {}", self.n_samples);
        let _ = writeln!(s, "accuracy = {}", self.accuracy);
        let _ = writeln!(s, "f1_macro = {}", self.f1_macro);
        if let Some(v) = self.f1_positive {
            let _ = writeln!(s, "f1_positive = {v}");
        }
        let _ = writeln!(s, "loss = {}", self.loss);
        if let Some(v) = self.mcc {
            let _ = writeln!(s, "mcc = {v}");
        }
        for (name, v) in self.class_names.iter().zip(&self.f1_per_class) {
            let _ = writeln!(s, "f1.{name} = {v}");
        }
        s
    }

    /// Aligned text table; the MCC column only appears for binary tasks.
    pub fn to_table(&self, model_name: &str) -> String {
        let width = model_name.len().max(8);
        let mut s = String::new();
        let _ = write!(s, "{:<width$}  {:>8}  {:>8}  {:>8}", "Model", "ACC", "F1", "Loss");
        if self.mcc.is_some() {
            let _ = write!(s, "  {:>8}", "MCC");
        }
        s.push('\n');
        let _ = write!(
            s,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
            model_name, self.accuracy, self.f1_macro, self.loss
        );
        if let Some(m) = self.mcc {
            let _ = write!(s, "  {m:>8.4}");
        }
        s.push('\n');
        s
    }
}
