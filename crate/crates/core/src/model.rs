//! Post-LN transformer encoder with a pooled classification head and an
//! optional masked-language-model head.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use crate::tokenizer::TokenizedSequence;

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad encoder config: {0}")]
    BadConfig(String),
    #[error("model has no MLM head")]
    MlmHeadAbsent,
    #[error("sequence length {len} exceeds {max} positions")]
    TooLong { len: usize, max: usize },
    #[error("checkpoint header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub mlm_head: bool,
}

impl EncoderConfig {
    /// L=2, d=128, h=4, d_ff=512, 128 positions, dropout 0.1.
    pub fn desk(vocab_size: usize, n_classes: usize) -> Self {
        Self {
            n_layers: 2,
            hidden: 128,
            n_heads: 4,
            ff: 512,
            vocab_size,
            max_positions: 128,
            n_classes,
            dropout: 0.1,
            mlm_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.n_heads == 0 || self.hidden == 0 || !self.hidden.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.ff == 0 {
            return bad("layers and feed-forward size must be positive".into());
        }
        if self.vocab_size == 0 || self.max_positions == 0 {
            return bad("vocab size and positions must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Number of scalars in a model built from this config.
    pub fn param_count(&self) -> usize {
        let (d, f, v, p, c) = (
            self.hidden,
            self.ff,
            self.vocab_size,
            self.max_positions,
            self.n_classes,
        );
        let embeddings = v * d + p * d + 2 * d + 2 * d;
        let layer = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
        let heads = (d * d + d) + (d * c + c);
        let mlm = if self.mlm_head { d * v + v } else { 0 };
        embeddings + self.n_layers * layer + heads + mlm
    }

    pub fn to_header(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_layers = {}", self.n_layers);
        let _ = writeln!(s, "hidden = {}", self.hidden);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "ff = {}", self.ff);
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "max_positions = {}", self.max_positions);
        let _ = writeln!(s, "n_classes = {}", self.n_classes);
        let _ = writeln!(s, "dropout = {}", self.dropout);
        let _ = writeln!(s, "mlm_head = {}", self.mlm_head);
        s
    }

    pub fn from_header(fields: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(f: &BTreeMap<String, String>, k: &str) -> Result<T> {
            f.get(k)
                .ok_or_else(|| ModelError::BadHeader(format!("missing `{k}`")))?
                .parse()
                .map_err(|_| ModelError::BadHeader(format!("bad value for `{k}`")))
        }
        let cfg = Self {
            n_layers: get(fields, "n_layers")?,
            hidden: get(fields, "hidden")?,
            n_heads: get(fields, "n_heads")?,
            ff: get(fields, "ff")?,
            vocab_size: get(fields, "vocab_size")?,
            max_positions: get(fields, "max_positions")?,
            n_classes: get(fields, "n_classes")?,
            dropout: get(fields, "dropout")?,
            mlm_head: get(fields, "mlm_head")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines; later keys win.
pub fn parse_header(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub attn_norm: Norm,
    pub ff_in: Dense,
    pub ff_out: Dense,
    pub ff_norm: Norm,
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub token_emb: ParamId,
    pub position_emb: ParamId,
    pub segment_emb: ParamId,
    pub emb_norm: Norm,
    pub layers: Vec<LayerParams>,
    pub pooler: Dense,
    pub classifier: Dense,
    pub mlm: Option<Dense>,
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn weight(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }
}

fn dense(store: &mut ParamStore, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Dense {
    Dense {
        weight: store.add(format!("{name}.weight"), init.weight(&[d_in, d_out])),
        bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
    }
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Norm {
    Norm {
        gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d])),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
    }
}

/// Sequences packed row-major as `[batch * seq_len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Batch {
    /// Packs sequences, trimming the shared padding down to the longest
    /// real length in the batch.
    pub fn from_sequences(seqs: &[&TokenizedSequence]) -> Self {
        let seq_len = seqs.iter().map(|s| s.original_length).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend(s.ids[..seq_len].iter().map(|&i| i as usize));
            mask.extend_from_slice(&s.attention_mask[..seq_len]);
        }
        Self {
            ids,
            mask,
            batch: seqs.len(),
            seq_len,
        }
    }

    /// One sequence at its full padded length.
    pub fn single(seq: &TokenizedSequence) -> Self {
        Self {
            ids: seq.ids.iter().map(|&i| i as usize).collect(),
            mask: seq.attention_mask.clone(),
            batch: 1,
            seq_len: seq.ids.len(),
        }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

impl EncoderModel {
    /// Weights ~ N(0, 0.02²); biases and LayerNorm β zero, γ one.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let (d, f) = (config.hidden, config.ff);
        let mut store = ParamStore::new();
        let token_emb = store.add("embeddings.token", init.weight(&[config.vocab_size, d]));
        let position_emb = store.add("embeddings.position", init.weight(&[config.max_positions, d]));
        let segment_emb = store.add("embeddings.segment", init.weight(&[2, d]));
        let emb_norm = norm(&mut store, "embeddings.norm", d);
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("layer{l}");
                LayerParams {
                    query: dense(&mut store, &mut init, &format!("{p}.attn.query"), d, d),
                    key: dense(&mut store, &mut init, &format!("{p}.attn.key"), d, d),
                    value: dense(&mut store, &mut init, &format!("{p}.attn.value"), d, d),
                    output: dense(&mut store, &mut init, &format!("{p}.attn.output"), d, d),
                    attn_norm: norm(&mut store, &format!("{p}.attn.norm"), d),
                    ff_in: dense(&mut store, &mut init, &format!("{p}.ff.in"), d, f),
                    ff_out: dense(&mut store, &mut init, &format!("{p}.ff.out"), f, d),
                    ff_norm: norm(&mut store, &format!("{p}.ff.norm"), d),
                }
            })
            .collect();
        let pooler = dense(&mut store, &mut init, "pooler", d, d);
        let classifier = dense(&mut store, &mut init, "classifier", d, config.n_classes);
        let mlm = config
            .mlm_head
            .then(|| dense(&mut store, &mut init, "mlm", d, config.vocab_size));
        Ok(Self {
            config,
            store,
            token_emb,
            position_emb,
            segment_emb,
            emb_norm,
            layers,
            pooler,
            classifier,
            mlm,
        })
    }

    fn linear(&self, g: &mut Graph, x: Var, p: Dense) -> Result<Var> {
        let w = g.param(&self.store, p.weight);
        let b = g.param(&self.store, p.bias);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, p: Norm) -> Result<Var> {
        let gamma = g.param(&self.store, p.gamma);
        let beta = g.param(&self.store, p.beta);
        Ok(g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)?)
    }

    /// Token + position + segment-0 embeddings, normalised, with dropout in
    /// training graphs. Output `[batch * seq_len, d]`.
    pub fn embed(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        if batch.seq_len > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: batch.seq_len,
                max: self.config.max_positions,
            });
        }
        let tok_table = g.param(&self.store, self.token_emb);
        let pos_table = g.param(&self.store, self.position_emb);
        let seg_table = g.param(&self.store, self.segment_emb);
        let positions: Vec<usize> = (0..batch.rows()).map(|r| r % batch.seq_len).collect();
        let tok = g.embedding_lookup(tok_table, &batch.ids)?;
        let pos = g.embedding_lookup(pos_table, &positions)?;
        let seg = g.embedding_lookup(seg_table, &vec![0; batch.rows()])?;
        let sum = g.add(tok, pos)?;
        let sum = g.add(sum, seg)?;
        let normed = self.layer_norm(g, sum, self.emb_norm)?;
        Ok(g.dropout(normed, self.config.dropout)?)
    }

    fn split_heads(&self, g: &mut Graph, x: Var, batch: &Batch) -> Result<Var> {
        let (h, dh) = (self.config.n_heads, self.config.head_dim());
        let x = g.reshape(x, &[batch.batch, batch.seq_len, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[batch.batch * h, batch.seq_len, dh])?)
    }

    /// Additive key mask `[batch * heads, T, T]`: `-inf` on padded keys.
    fn key_mask(&self, batch: &Batch) -> Tensor {
        let (t, h) = (batch.seq_len, self.config.n_heads);
        let mut data = Vec::with_capacity(batch.batch * h * t * t);
        for b in 0..batch.batch {
            let row: Vec<f64> = batch.mask[b * t..(b + 1) * t]
                .iter()
                .map(|&m| if m == 0 { f64::NEG_INFINITY } else { 0.0 })
                .collect();
            for _ in 0..h * t {
                data.extend_from_slice(&row);
            }
        }
        Tensor::new(&[batch.batch * h, t, t], data).expect("mask shape")
    }

    /// Scaled dot-product attention over all heads. Returns the projected
    /// output `[batch * T, d]` and the weights `[batch * heads, T, T]`.
    pub fn multi_head_attention(
        &self,
        g: &mut Graph,
        x: Var,
        batch: &Batch,
        layer: &LayerParams,
    ) -> Result<(Var, Var)> {
        let (d, dh) = (self.config.hidden, self.config.head_dim());
        if g.shape(x) != [batch.rows(), d] {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!("x {:?}, expected [{}, {d}]", g.shape(x), batch.rows()),
            }
            .into());
        }
        let q = self.linear(g, x, layer.query)?;
        let k = self.linear(g, x, layer.key)?;
        let v = self.linear(g, x, layer.value)?;
        let q = self.split_heads(g, q, batch)?;
        let k = self.split_heads(g, k, batch)?;
        let v = self.split_heads(g, v, batch)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let mask = g.constant(self.key_mask(batch));
        let scores = g.add(scores, mask)?;
        let weights = g.softmax(scores, 2)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.reshape(ctx, &[batch.batch, self.config.n_heads, batch.seq_len, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[batch.rows(), d])?;
        let out = self.linear(g, ctx, layer.output)?;
        Ok((out, weights))
    }

    /// `x' = LN(x + drop(attn(x)))`, `out = LN(x' + drop(ffn(x')))`.
    pub fn encoder_layer(&self, g: &mut Graph, x: Var, batch: &Batch, layer: &LayerParams) -> Result<Var> {
        let (attn, _) = self.multi_head_attention(g, x, batch, layer)?;
        let attn = g.dropout(attn, self.config.dropout)?;
        let x1 = g.add(x, attn)?;
        let x1 = self.layer_norm(g, x1, layer.attn_norm)?;
        let h = self.linear(g, x1, layer.ff_in)?;
        let h = g.gelu(h);
        let h = self.linear(g, h, layer.ff_out)?;
        let h = g.dropout(h, self.config.dropout)?;
        let x2 = g.add(x1, h)?;
        self.layer_norm(g, x2, layer.ff_norm)
    }

    /// Final hidden states `[batch * T, d]`.
    pub fn hidden_states(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let mut x = self.embed(g, batch)?;
        for layer in &self.layers {
            x = self.encoder_layer(g, x, batch, layer)?;
        }
        Ok(x)
    }

    /// Class logits `[batch, C]` via the tanh pooler on `[CLS]`.
    pub fn classify_logits(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let hidden = self.hidden_states(g, batch)?;
        let cls_rows: Vec<usize> = (0..batch.batch).map(|b| b * batch.seq_len).collect();
        let cls = g.gather_rows(hidden, &cls_rows)?;
        let pooled = self.linear(g, cls, self.pooler)?;
        let pooled = g.tanh(pooled);
        self.linear(g, pooled, self.classifier)
    }

    /// Per-position vocabulary logits `[batch * T, V]`.
    pub fn mlm_logits_var(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let head = self.mlm.ok_or(ModelError::MlmHeadAbsent)?;
        let hidden = self.hidden_states(g, batch)?;
        self.linear(g, hidden, head)
    }

    /// Eval-mode logits for one sequence.
    pub fn classify(&self, seq: &TokenizedSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let batch = Batch::from_sequences(&[seq]);
        let logits = self.classify_logits(&mut g, &batch)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Eval-mode logits for many sequences in one pass, `[n, C]`.
    pub fn classify_many(&self, seqs: &[&TokenizedSequence]) -> Result<Tensor> {
        let mut g = Graph::new();
        let batch = Batch::from_sequences(seqs);
        let logits = self.classify_logits(&mut g, &batch)?;
        Ok(g.value(logits).clone())
    }

    /// Eval-mode `[max_seq_len, V]` logits for one padded sequence.
    pub fn mlm_logits(&self, seq: &TokenizedSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let logits = self.mlm_logits_var(&mut g, &Batch::single(seq))?;
        Ok(g.value(logits).clone())
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Config lines, then `extra_header`, then every parameter.
    pub fn to_checkpoint(&self, extra_header: &str) -> Checkpoint {
        Checkpoint {
            header: format!("{}{extra_header}", self.config.to_header()),
            tensors: self
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds a model from a checkpoint, returning the parsed header.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, BTreeMap<String, String>)> {
        let header = parse_header(&ckpt.header);
        let config = EncoderConfig::from_header(&header)?;
        let mut model = Self::new(config, 0)?;
        if ckpt.tensors.len() != model.store.len() {
            return Err(ModelError::BadHeader(format!(
                "checkpoint holds {} tensors, config needs {}",
                ckpt.tensors.len(),
                model.store.len()
            )));
        }
        for (name, t) in &ckpt.tensors {
            let id = model
                .store
                .find(name)
                .ok_or_else(|| ModelError::BadHeader(format!("unexpected tensor `{name}`")))?;
            if model.store.value(id).shape() != t.shape() {
                return Err(ModelError::BadHeader(format!("tensor `{name}` has wrong shape")));
            }
            *model.store.value_mut(id) = t.clone();
        }
        Ok((model, header))
    }
}
