//! Property suites as plain runners so both the test targets and the
//! acceptance report can execute them.

use droidformer::metrics::{accuracy, confusion_from_predictions, f1, mcc, multiclass_accuracy, ConfusionCounts};
use droidformer::model::{Batch, EncoderConfig, EncoderModel};
use droidformer::preprocess::{clean_text, split_train_test, CleaningConfig, DatasetRecord};
use droidformer::tensor::{Graph, Tensor};
use droidformer::tokenizer::{build_vocab, encode, CLS, PAD, SEP};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub const CASES: u32 = 1000;

pub type Outcome = Result<(), String>;

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

fn run<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Outcome
where
    S::Value: std::fmt::Debug,
{
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

pub fn softmax_normalised_and_shift_invariant() -> Outcome {
    run(
        (prop::collection::vec(-50.0f64..50.0, 1..16), -100.0f64..100.0),
        |(x, c)| {
            let n = x.len();
            let mut g = Graph::new();
            let a = g.constant(Tensor::vector(x.clone()));
            let b = g.constant(Tensor::vector(x.iter().map(|v| v + c).collect()));
            let sa = g.softmax(a, 0).unwrap();
            let sb = g.softmax(b, 0).unwrap();
            let (pa, pb) = (g.value(sa).data(), g.value(sb).data());
            prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for i in 0..n {
                prop_assert!((pa[i] - pb[i]).abs() < 1e-9);
                prop_assert!(pa[i] >= 0.0);
            }
            Ok(())
        },
    )
}

fn tiny(seed: u64) -> EncoderModel {
    EncoderModel::new(
        EncoderConfig {
            n_layers: 1,
            hidden: 8,
            n_heads: 2,
            ff: 16,
            vocab_size: 20,
            max_positions: 12,
            n_classes: 3,
            dropout: 0.1,
            mlm_head: false,
        },
        seed,
    )
    .unwrap()
}

/// Random real lengths (≥ 1) per sequence, padded to a common length.
fn batch_strategy() -> impl Strategy<Value = (u64, Vec<Vec<usize>>, usize)> {
    (
        any::<u64>(),
        prop::collection::vec(prop::collection::vec(5usize..20, 1..8), 1..4),
        0usize..4,
    )
}

fn pack(seqs: &[Vec<usize>], extra_pad: usize, pad_id: impl Fn(usize) -> usize) -> Batch {
    let t = seqs.iter().map(Vec::len).max().unwrap() + extra_pad;
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for s in seqs {
        for i in 0..t {
            if i < s.len() {
                ids.push(s[i]);
                mask.push(1);
            } else {
                ids.push(pad_id(i));
                mask.push(0);
            }
        }
    }
    Batch {
        ids,
        mask,
        batch: seqs.len(),
        seq_len: t,
    }
}

pub fn attention_rows_normalised() -> Outcome {
    run(batch_strategy(), |(seed, seqs, extra)| {
        let model = tiny(seed);
        let batch = pack(&seqs, extra, |_| PAD as usize);
        let mut g = Graph::new();
        let x = model.embed(&mut g, &batch).unwrap();
        let (_, w) = model.multi_head_attention(&mut g, x, &batch, &model.layers[0]).unwrap();
        let t = batch.seq_len;
        for (r, row) in g.value(w).data().chunks(t).enumerate() {
            let b = r / (t * model.config.n_heads);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (j, &p) in row.iter().enumerate() {
                if batch.mask[b * t + j] == 0 {
                    prop_assert_eq!(p, 0.0);
                }
            }
        }
        Ok(())
    })
}

fn logits(model: &EncoderModel, batch: &Batch) -> Vec<f64> {
    let mut g = Graph::new();
    let l = model.classify_logits(&mut g, batch).unwrap();
    g.value(l).data().to_vec()
}

pub fn pad_content_insensitive() -> Outcome {
    run((batch_strategy(), any::<u64>()), |((seed, seqs, extra), fill)| {
        let model = tiny(seed);
        let base = logits(&model, &pack(&seqs, extra, |_| PAD as usize));
        let noisy = logits(
            &model,
            &pack(&seqs, extra, |i| ((fill as usize).wrapping_add(i * 7919)) % 20),
        );
        for (a, b) in base.iter().zip(&noisy) {
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
        let shorter = logits(&model, &pack(&seqs, 0, |_| PAD as usize));
        for (a, b) in base.iter().zip(&shorter) {
            prop_assert!((a - b).abs() < 1e-9, "pad length: {} vs {}", a, b);
        }
        Ok(())
    })
}

fn lexicon() -> CleaningConfig {
    CleaningConfig::default_lexicon()
}

pub fn clean_text_idempotent() -> Outcome {
    let lex = lexicon();
    run(
        prop_oneof![any::<String>(), "[a-zA-Z0-9 .:/=\"<>_-]{0,80}", "\\PC{0,40}"],
        |raw| {
            let once = clean_text(&raw, &lex);
            prop_assert_eq!(clean_text(&once, &lex), once.clone());
            prop_assert!(once.chars().all(|c| c.is_alphanumeric() || c == ' '));
            prop_assert!(!once.contains("  ") && !once.starts_with(' ') && !once.ends_with(' '));
            Ok(())
        },
    )
}

pub fn clean_text_keeps_case_and_digits() -> Outcome {
    let lex = lexicon();
    run(
        ("[ .:/=\"<>_@#,;\t\n-]{0,10}", "[ .:/=\"<>_@#,;\t\n-]{1,10}"),
        |(pre, post)| {
            let out = clean_text(&format!("{pre}Ab3{post}"), &lex);
            prop_assert!(out.split(' ').any(|t| t == "Ab3"));
            Ok(())
        },
    )
}

pub fn tokenizer_round_trip() -> Outcome {
    run(
        (
            prop::collection::vec("[a-z]{1,6}", 1..30),
            prop::collection::vec(0usize..30, 0..60),
            3usize..40,
        ),
        |(words, picks, max_len)| {
            let vocab = build_vocab(&[words.join(" ")], 10_000, 1).unwrap();
            let text: Vec<&str> = picks.iter().map(|&i| words[i % words.len()].as_str()).collect();
            let joined = text.join("  ");
            let seq = encode(&joined, &vocab, max_len);
            prop_assert_eq!(&seq, &encode(&joined, &vocab, max_len));
            let kept = text.len().min(max_len - 2);
            prop_assert_eq!(
                seq.decode(&vocab),
                text[..kept].iter().map(|s| s.to_string()).collect::<Vec<_>>()
            );
            prop_assert_eq!(seq.ids.len(), max_len);
            prop_assert_eq!(seq.attention_mask.len(), max_len);
            prop_assert_eq!(seq.original_length, kept + 2);
            prop_assert_eq!(seq.ids[0], CLS);
            prop_assert_eq!(seq.ids[kept + 1], SEP);
            for i in 0..max_len {
                prop_assert_eq!(seq.attention_mask[i] == 1, i < seq.original_length);
                if i >= seq.original_length {
                    prop_assert_eq!(seq.ids[i], PAD);
                }
            }
            Ok(())
        },
    )
}

pub fn build_vocab_stable() -> Outcome {
    run(prop::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,8}", 1..10), |corpus| {
        let a = build_vocab(&corpus, 12, 1).unwrap();
        let b = build_vocab(&corpus, 12, 1).unwrap();
        prop_assert_eq!(a.tokens(), b.tokens());
        Ok(())
    })
}

fn counts() -> impl Strategy<Value = (u64, u64, u64, u64)> {
    (0u64..200, 0u64..200, 0u64..200, 0u64..200).prop_filter("non-empty", |(a, b, c, d)| a + b + c + d > 0)
}

pub fn mcc_class_swap_invariant() -> Outcome {
    run(counts(), |(tp, tn, fp, fn_)| {
        let c = ConfusionCounts::new(tp, tn, fp, fn_);
        let swapped = ConfusionCounts::new(tn, tp, fn_, fp);
        prop_assert!((mcc(&c).unwrap() - mcc(&swapped).unwrap()).abs() < 1e-12);
        prop_assert_eq!(accuracy(&c).unwrap(), accuracy(&swapped).unwrap());
        Ok(())
    })
}

pub fn mcc_bounded_and_scale_invariant() -> Outcome {
    run((counts(), 1u64..50), |((tp, tn, fp, fn_), k)| {
        let c = ConfusionCounts::new(tp, tn, fp, fn_);
        let s = ConfusionCounts::new(k * tp, k * tn, k * fp, k * fn_);
        let m = mcc(&c).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m));
        prop_assert!((m - mcc(&s).unwrap()).abs() < 1e-12);
        prop_assert!((accuracy(&c).unwrap() - accuracy(&s).unwrap()).abs() < 1e-12);
        prop_assert!((f1(&c).unwrap() - f1(&s).unwrap()).abs() < 1e-12);
        Ok(())
    })
}

pub fn binary_one_vs_rest_accuracy() -> Outcome {
    run(prop::collection::vec((0usize..2, 0usize..2), 1..100), |pairs| {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let per_class = confusion_from_predictions(&t, &p, 2).unwrap();
        let overall = multiclass_accuracy(&t, &p).unwrap();
        for c in &per_class {
            prop_assert!((accuracy(c).unwrap() - overall).abs() < 1e-12);
        }
        Ok(())
    })
}

pub fn split_partitions_records() -> Outcome {
    run(
        (prop::collection::vec(0usize..4, 1..80), 0.05f64..0.95, any::<u64>()),
        |(classes, frac, seed)| {
            let records: Vec<DatasetRecord> = classes
                .iter()
                .enumerate()
                .map(|(i, &c)| match c {
                    0 => DatasetRecord::benign(format!("r{i}"), "t"),
                    c => DatasetRecord::malware(format!("r{i}"), "t", droidformer::preprocess::Category::from_index(c)),
                })
                .collect();
            let (train, test) = split_train_test(&records, frac, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), records.len());
            let mut ids: Vec<&str> = train.iter().chain(&test).map(|r| r.id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), records.len());
            prop_assert_eq!(split_train_test(&records, frac, seed).unwrap(), (train, test));
            Ok(())
        },
    )
}

/// Every suite with its name.
pub type Suite = (&'static str, fn() -> Outcome);

pub fn all() -> Vec<Suite> {
    vec![
        (
            "softmax normalisation and shift invariance",
            softmax_normalised_and_shift_invariant,
        ),
        ("attention row normalisation", attention_rows_normalised),
        ("pad-content and pad-length insensitivity", pad_content_insensitive),
        ("clean_text idempotence", clean_text_idempotent),
        ("tokenizer round trip", tokenizer_round_trip),
        ("MCC class-swap invariance", mcc_class_swap_invariant),
    ]
}
