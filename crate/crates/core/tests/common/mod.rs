//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

pub mod fidelity;
pub mod props;

use std::path::PathBuf;

use droidformer::metrics::{accuracy, f1, mcc, ConfusionCounts};
use droidformer::model::{Batch, EncoderConfig, EncoderModel};
use droidformer::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn randn(shape: &[usize], seed: u64, std: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
}

pub fn one_hot(labels: &[usize], c: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), c]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * c + l] = 1.0;
    }
    t
}

/// Relative error with a floor on the magnitude so that two near-zero
/// values compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Reduces a graph output to a scalar with a fixed random projection.
fn project(g: &mut Graph, out: Var) -> Var {
    if g.value(out).numel() == 1 && g.shape(out).is_empty() {
        return out;
    }
    let shape = g.shape(out).to_vec();
    let w = g.constant(randn(&shape, 4242, 1.0));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn scalar_of(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let s = project(&mut g, out);
    g.value(s).item()
}

/// Largest relative error between analytic and central-difference
/// gradients over every input element.
pub fn fd_check(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let s = project(&mut g, out);
    let grads = g.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (scalar_of(&plus, build) - scalar_of(&minus, build)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// `(op name, max relative error)` for every differentiable op.
pub fn op_gradient_suite() -> Vec<(&'static str, f64)> {
    let r = |shape: &[usize], seed| randn(shape, seed, 1.0);
    let mut out = Vec::new();
    let mut check = |name, inputs: Vec<Tensor>, f: Box<Build>| out.push((name, fd_check(&inputs, &*f)));

    check(
        "matmul",
        vec![r(&[3, 4], 1), r(&[4, 2], 2)],
        Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
    );
    check(
        "matmul_batched",
        vec![r(&[2, 3, 4], 3), r(&[2, 4, 5], 4)],
        Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
    );
    check(
        "add",
        vec![r(&[3, 4], 5), r(&[3, 4], 6)],
        Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
    );
    check(
        "add_row",
        vec![r(&[3, 4], 7), r(&[4], 8)],
        Box::new(|g, v| g.add_row(v[0], v[1]).unwrap()),
    );
    check(
        "mul",
        vec![r(&[3, 4], 9), r(&[3, 4], 10)],
        Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
    );
    check("scale", vec![r(&[3, 4], 11)], Box::new(|g, v| g.scale(v[0], -2.5)));
    check(
        "permute",
        vec![r(&[2, 3, 4], 12)],
        Box::new(|g, v| g.permute(v[0], &[2, 0, 1]).unwrap()),
    );
    check(
        "transpose",
        vec![r(&[2, 3, 4], 13)],
        Box::new(|g, v| g.transpose(v[0]).unwrap()),
    );
    check(
        "reshape",
        vec![r(&[3, 4], 14)],
        Box::new(|g, v| g.reshape(v[0], &[2, 6]).unwrap()),
    );
    check(
        "concat_axis0",
        vec![r(&[2, 3], 15), r(&[4, 3], 16)],
        Box::new(|g, v| g.concat(&[v[0], v[1]], 0).unwrap()),
    );
    check(
        "concat_axis1",
        vec![r(&[3, 2], 17), r(&[3, 1], 18)],
        Box::new(|g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
    );
    check(
        "slice",
        vec![r(&[4, 5], 19)],
        Box::new(|g, v| g.slice(v[0], 1, 1, 4).unwrap()),
    );
    check("sum", vec![r(&[3, 4], 20)], Box::new(|g, v| g.sum(v[0])));
    check("mean", vec![r(&[3, 4], 21)], Box::new(|g, v| g.mean(v[0])));
    check(
        "softmax_axis0",
        vec![r(&[3, 4], 22)],
        Box::new(|g, v| g.softmax(v[0], 0).unwrap()),
    );
    check(
        "softmax_axis1",
        vec![r(&[3, 4], 23)],
        Box::new(|g, v| g.softmax(v[0], 1).unwrap()),
    );
    check(
        "softmax_axis2",
        vec![r(&[2, 3, 4], 24)],
        Box::new(|g, v| g.softmax(v[0], 2).unwrap()),
    );
    check(
        "layer_norm",
        vec![r(&[3, 5], 25), r(&[5], 26), r(&[5], 27)],
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-12).unwrap()),
    );
    check("gelu", vec![r(&[3, 4], 28)], Box::new(|g, v| g.gelu(v[0])));
    check("tanh", vec![r(&[3, 4], 29)], Box::new(|g, v| g.tanh(v[0])));
    check(
        "gather_rows",
        vec![r(&[5, 3], 30)],
        Box::new(|g, v| g.gather_rows(v[0], &[0, 2, 2, 4]).unwrap()),
    );
    check(
        "embedding_lookup",
        vec![r(&[6, 3], 31)],
        Box::new(|g, v| g.embedding_lookup(v[0], &[5, 1, 1, 1, 0]).unwrap()),
    );
    check(
        "dropout",
        vec![r(&[4, 5], 32)],
        Box::new(|g, v| g.dropout_seeded(v[0], 0.3, 5, true).unwrap()),
    );
    let labels = [0, 3, 1, 2, 2, 0, 1, 3];
    check(
        "cross_entropy_onehot",
        vec![r(&[8, 4], 33)],
        Box::new(move |g, v| g.cross_entropy(v[0], &one_hot(&labels, 4)).unwrap()),
    );
    let soft = {
        let mut g = Graph::new();
        let x = g.constant(randn(&[3, 4], 34, 1.0));
        let s = g.softmax(x, 1).unwrap();
        g.value(s).clone()
    };
    check(
        "cross_entropy_soft",
        vec![r(&[3, 4], 35)],
        Box::new(move |g, v| g.cross_entropy(v[0], &soft).unwrap()),
    );
    check(
        "composed",
        vec![r(&[4, 3], 36), r(&[3, 5], 37), r(&[5], 38), r(&[5], 39), r(&[5], 40)],
        Box::new(|g, v| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add_row(h, v[2]).unwrap();
            let a = g.gelu(h);
            let n = g.layer_norm(a, v[3], v[4], 1e-12).unwrap();
            let t = g.tanh(n);
            let m = g.mul(t, h).unwrap();
            let s = g.softmax(m, 1).unwrap();
            let p = g.permute(s, &[1, 0]).unwrap();
            let top = g.slice(p, 0, 0, 2).unwrap();
            let c = g.concat(&[top, p], 0).unwrap();
            let rows = g.gather_rows(c, &[0, 3, 6, 3]).unwrap();
            let sc = g.scale(rows, 3.0);
            g.mean(sc)
        }),
    );
    out
}

pub fn tiny_grad_config() -> EncoderConfig {
    EncoderConfig {
        n_layers: 1,
        hidden: 8,
        n_heads: 2,
        ff: 16,
        vocab_size: 12,
        max_positions: 4,
        n_classes: 3,
        dropout: 0.1,
        mlm_head: false,
    }
}

/// Model with O(1) weights so no gradient is vanishingly small.
pub fn rescaled_model(config: EncoderConfig, seed: u64) -> EncoderModel {
    let mut model = EncoderModel::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let normal = Normal::new(0.0, 0.5).unwrap();
    for p in model.store.iter_mut() {
        let is_gamma = p.name.ends_with("gamma");
        for v in p.value.data_mut() {
            *v = normal.sample(&mut rng) + if is_gamma { 1.0 } else { 0.0 };
        }
    }
    model
}

/// Two length-4 sequences, the second padded by one position.
pub fn grad_batch() -> Batch {
    Batch {
        ids: vec![2, 5, 6, 3, 2, 7, 3, 0],
        mask: vec![1, 1, 1, 1, 1, 1, 1, 0],
        batch: 2,
        seq_len: 4,
    }
}

fn encoder_loss(model: &EncoderModel, batch: &Batch, targets: &Tensor) -> (Graph, Var) {
    let mut g = Graph::training(11);
    let logits = model.classify_logits(&mut g, batch).unwrap();
    let loss = g.cross_entropy(logits, targets).unwrap();
    (g, loss)
}

/// End-to-end check of the classification loss against every parameter
/// scalar; returns the largest relative error.
pub fn encoder_gradient_check() -> f64 {
    let mut model = rescaled_model(tiny_grad_config(), 3);
    let batch = grad_batch();
    let targets = one_hot(&[0, 2], 3);
    let (g, loss) = encoder_loss(&model, &batch, &targets);
    let grads = g.backward(loss).unwrap();
    model.store.zero_grad();
    model.store.accumulate(&g, &grads);

    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = model.store.grad(id).unwrap().clone();
        for j in 0..analytic.numel() {
            let orig = model.store.value(id).data()[j];
            model.store.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let (gp, lp) = encoder_loss(&model, &batch, &targets);
            model.store.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let (gm, lm) = encoder_loss(&model, &batch, &targets);
            model.store.value_mut(id).data_mut()[j] = orig;
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Direct evaluation of the metric definitions in exact integer arithmetic,
/// converted to floating point only at the final division.
pub struct MetricOracle {
    pub accuracy: f64,
    pub mcc: f64,
    pub f1: f64,
}

pub fn metric_oracle(tp: u64, tn: u64, fp: u64, fn_: u64) -> MetricOracle {
    let (tp, tn, fp, fn_) = (tp as i128, tn as i128, fp as i128, fn_ as i128);
    let total = tp + tn + fp + fn_;
    let accuracy = (tp + tn) as f64 / total as f64;
    let product = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    let mcc = if product == 0 {
        0.0
    } else {
        (tp * tn - fp * fn_) as f64 / (product as f64).sqrt()
    };
    let f1_den = 2 * tp + fp + fn_;
    let f1 = if f1_den == 0 {
        0.0
    } else {
        (2 * tp) as f64 / f1_den as f64
    };
    MetricOracle { accuracy, mcc, f1 }
}

/// Max deviation over every count tuple in `[0, 6]^4` except all-zero.
pub fn exhaustive_metric_check() -> f64 {
    let mut worst: f64 = 0.0;
    for tp in 0..=6 {
        for tn in 0..=6 {
            for fp in 0..=6 {
                for fn_ in 0..=6 {
                    if tp + tn + fp + fn_ == 0 {
                        continue;
                    }
                    let c = ConfusionCounts::new(tp, tn, fp, fn_);
                    let o = metric_oracle(tp, tn, fp, fn_);
                    worst = worst
                        .max((accuracy(&c).unwrap() - o.accuracy).abs())
                        .max((mcc(&c).unwrap() - o.mcc).abs())
                        .max((f1(&c).unwrap() - o.f1).abs());
                }
            }
        }
    }
    worst
}

/// Compensated sum.
pub fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s = neumaier_sum(e.iter().copied());
    e.iter().map(|v| v / s).collect()
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn naive_layer_norm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + eps).sqrt() * gamma[j] + beta[j])
        .collect()
}

pub fn random_ids(rng: &mut impl Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Untrained one-layer binary classifier over a small synthetic vocabulary.
pub fn tiny_trained_model() -> (droidformer::train::TrainedModel, droidformer::tokenizer::Vocab) {
    use droidformer::preprocess::{synthesize_corpus, VocabProfile};
    let records = synthesize_corpus(2, &VocabProfile::default(), 0.0, 3);
    let vocab = droidformer::pipeline::vocab_for(&records, 1000, 1).unwrap();
    let config = EncoderConfig {
        n_layers: 1,
        hidden: 8,
        n_heads: 2,
        ff: 16,
        vocab_size: vocab.len(),
        max_positions: 16,
        n_classes: 2,
        dropout: 0.1,
        mlm_head: false,
    };
    let model = droidformer::train::TrainedModel {
        model: EncoderModel::new(config, 5).unwrap(),
        task: droidformer::train::Task::Binary,
        max_seq_len: 16,
        vocab_ref: "vocab.tsv".into(),
        vocab_sha256: droidformer::pipeline::vocab_sha256(&vocab),
    };
    (model, vocab)
}

pub const SMALL_RUN_FILE: &str = "\
n_layers = 1
hidden = 32
n_heads = 2
ff = 64
lr = 1e-3
max_epochs = 20
patience = 3
target_loss = 0.05
max_seq_len = 32
seed = 1
";

pub fn droidformer_cli(args: &[&std::ffi::OsStr]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_droidformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

/// Runs `droidformer <args>` and panics with its stderr on failure.
#[macro_export]
macro_rules! cli {
    ($($arg:expr),* $(,)?) => {{
        let out = $crate::common::droidformer_cli(&[$(::std::ffi::OsStr::new(&$arg)),*]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }};
}

/// Files written by one synth → split → build-vocab → train → eval run.
pub struct PipelineArtifacts {
    pub checkpoint: Vec<u8>,
    pub vocab: Vec<u8>,
    pub report: Vec<u8>,
    pub eval_stdout: String,
}

pub fn cli_pipeline(dir: &std::path::Path) -> PipelineArtifacts {
    let p = |name: &str| dir.join(name).into_os_string();
    std::fs::write(dir.join("run.toml"), SMALL_RUN_FILE).unwrap();
    cli!("synth", "--per-class", "40", "--seed", "3", "--out", p("all.csv"));
    cli!(
        "split",
        p("all.csv"),
        "--seed",
        "1",
        "--train-out",
        p("train.csv"),
        "--test-out",
        p("test.csv")
    );
    cli!("build-vocab", p("train.csv"), "--out", p("vocab.tsv"));
    cli!(
        "train",
        p("train.csv"),
        "--task",
        "binary",
        "--config",
        p("run.toml"),
        "--vocab",
        p("vocab.tsv"),
        "--out",
        p("model.ckpt"),
        "--history",
        p("history.tsv")
    );
    let eval_stdout = cli!(
        "eval",
        p("test.csv"),
        p("model.ckpt"),
        "--task",
        "binary",
        "--report",
        p("report.txt")
    );
    PipelineArtifacts {
        checkpoint: std::fs::read(dir.join("model.ckpt")).unwrap(),
        vocab: std::fs::read(dir.join("vocab.tsv")).unwrap(),
        report: std::fs::read(dir.join("report.txt")).unwrap(),
        eval_stdout,
    }
}

/// `key = value` lines as a map.
pub fn key_values(text: &str) -> std::collections::BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
