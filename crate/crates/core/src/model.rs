//! Encoder-decoder transformer with tied embeddings and sinusoidal positions.
//!
//! Layers are pre-norm: each sublayer reads a layer-normalized copy of the
//! residual stream and adds its output back. Both stacks end with a final
//! layer norm; the output projection reuses the embedding table.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{Real, Tape, Tensor, TensorError, Var};
use crate::subword::{BOS_ID, PAD_ID};

/// Additive attention mask for disallowed positions; large enough that
/// `exp` underflows to exactly zero after the row maximum is subtracted.
const MASKED: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    IdOutOfRange { id: u32, vocab_size: usize },
    #[error("batch has no target tokens to predict")]
    EmptyBatch,
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("target prefix must start with BOS")]
    MissingBos,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Layers per stack.
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 128,
            d_ff: 256,
            vocab_size: 1000,
            max_len: 64,
            dropout: 0.1,
            label_smoothing: 0.0,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layers, heads, d_model and d_ff must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must be divisible by heads");
        }
        if self.vocab_size < 5 {
            return fail("vocab_size must be at least 5");
        }
        if self.max_len == 0 {
            return fail("max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)");
        }
        Ok(())
    }

    /// Closed-form parameter count of the architecture.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let attention = 4 * (d * d + d);
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let norm = 2 * d;
        let encoder_layer = attention + ffn + 2 * norm;
        let decoder_layer = 2 * attention + ffn + 3 * norm;
        self.vocab_size * d + self.layers * (encoder_layer + decoder_layer) + 2 * norm
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Parameters<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> + '_ {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Parameter names and shapes in canonical order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![("embed".to_string(), vec![cfg.vocab_size, d])];
    let attention = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        for w in ["q", "k", "v", "o"] {
            out.push((format!("{p}.w{w}"), vec![d, d]));
            out.push((format!("{p}.b{w}"), vec![d]));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.g"), vec![d]));
        out.push((format!("{p}.b"), vec![d]));
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.w1"), vec![d, f]));
        out.push((format!("{p}.b1"), vec![f]));
        out.push((format!("{p}.w2"), vec![f, d]));
        out.push((format!("{p}.b2"), vec![d]));
    };
    for l in 0..cfg.layers {
        norm(&mut out, &format!("enc.{l}.ln1"));
        attention(&mut out, &format!("enc.{l}.self"));
        norm(&mut out, &format!("enc.{l}.ln2"));
        ffn(&mut out, &format!("enc.{l}.ffn"));
    }
    norm(&mut out, "enc.ln");
    for l in 0..cfg.layers {
        norm(&mut out, &format!("dec.{l}.ln1"));
        attention(&mut out, &format!("dec.{l}.self"));
        norm(&mut out, &format!("dec.{l}.ln2"));
        attention(&mut out, &format!("dec.{l}.cross"));
        norm(&mut out, &format!("dec.{l}.ln3"));
        ffn(&mut out, &format!("dec.{l}.ffn"));
    }
    norm(&mut out, "dec.ln");
    out
}

/// Teacher-forcing batch. Each target sequence starts with `BOS` and
/// normally ends with `EOS`; the decoder reads `tgt[..n-1]` and predicts
/// `tgt[1..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
}

impl Batch {
    pub fn new(src: Vec<Vec<u32>>, tgt: Vec<Vec<u32>>) -> Self {
        assert_eq!(src.len(), tgt.len(), "batch sides differ in length");
        Self { src, tgt }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Number of predicted (non-`PAD`) target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt
            .iter()
            .map(|t| t.iter().skip(1).filter(|&&id| id != PAD_ID).count())
            .sum()
    }
}

/// Source sentence run through the encoder, reusable across decoder steps.
#[derive(Debug, Clone)]
pub struct EncodedSource<T> {
    memory: Tensor<T>,
    src: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationModel<T> {
    config: ModelConfig,
    params: Parameters<T>,
}

struct Attn {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

/// Sinusoidal position table, `[max_len, d]`.
fn positions<T: Real>(max_len: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(max_len * d);
    for pos in 0..max_len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            out.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

struct Graph<'a, T: Real> {
    model: &'a TranslationModel<T>,
    tape: &'a mut Tape<T>,
    vars: &'a [Var],
    index: HashMap<&'a str, usize>,
    dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a, T: Real> Graph<'a, T> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn attn(&self, prefix: &str) -> Attn {
        let i = |s: &str| self.index[format!("{prefix}.{s}").as_str()];
        Attn {
            wq: i("wq"),
            bq: i("bq"),
            wk: i("wk"),
            bk: i("bk"),
            wv: i("wv"),
            bv: i("bv"),
            wo: i("wo"),
            bo: i("bo"),
        }
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Result<Var, TensorError> {
        let y = self.tape.matmul(x, self.vars[w])?;
        self.tape.add(y, self.vars[b])
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var, TensorError> {
        let (g, b) = (self.p(&format!("{prefix}.g")), self.p(&format!("{prefix}.b")));
        self.tape.layer_norm(x, g, b)
    }

    fn dropout(&mut self, x: Var) -> Result<Var, TensorError> {
        let p = self.model.config.dropout;
        let Some(rng) = self.dropout.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = T::of(1.0 / (1.0 - p));
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = self.tape.constant(&shape, mask)?;
        self.tape.mul(x, m)
    }

    /// Token embeddings scaled by `sqrt(d)` plus positions: `[B*L, d]`.
    fn embed(&mut self, ids: &[u32], batch: usize, len: usize) -> Result<Var, TensorError> {
        let d = self.model.config.d_model;
        let e = self.tape.embedding(self.p("embed"), ids)?;
        let e = self.tape.scale(e, T::of((d as f64).sqrt()))?;
        let table = positions::<T>(len, d);
        let mut pos = Vec::with_capacity(batch * len * d);
        for _ in 0..batch {
            pos.extend_from_slice(&table);
        }
        let pos = self.tape.constant(&[batch * len, d], pos)?;
        let x = self.tape.add(e, pos)?;
        self.dropout(x)
    }

    fn split_heads(&mut self, x: Var, batch: usize, len: usize) -> Result<Var, TensorError> {
        let (h, d) = (self.model.config.heads, self.model.config.d_model);
        let x = self.tape.reshape(x, &[batch, len, h, d / h])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        self.tape.reshape(x, &[batch * h, len, d / h])
    }

    fn merge_heads(&mut self, x: Var, batch: usize, len: usize) -> Result<Var, TensorError> {
        let (h, d) = (self.model.config.heads, self.model.config.d_model);
        let x = self.tape.reshape(x, &[batch, h, len, d / h])?;
        let x = self.tape.permute(x, &[0, 2, 1, 3])?;
        self.tape.reshape(x, &[batch * len, d])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        a: &Attn,
        query: Var,
        memory: Var,
        batch: usize,
        lq: usize,
        lk: usize,
        mask: Var,
    ) -> Result<Var, TensorError> {
        let dh = self.model.config.d_model / self.model.config.heads;
        let q = self.linear(query, a.wq, a.bq)?;
        let k = self.linear(memory, a.wk, a.bk)?;
        let v = self.linear(memory, a.wv, a.bv)?;
        let q = self.split_heads(q, batch, lq)?;
        let k = self.split_heads(k, batch, lk)?;
        let v = self.split_heads(v, batch, lk)?;
        let scores = self.tape.bmm(q, k, true)?;
        let scores = self.tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()))?;
        let scores = self.tape.add(scores, mask)?;
        let probs = self.tape.softmax(scores)?;
        let ctx = self.tape.bmm(probs, v, false)?;
        let ctx = self.merge_heads(ctx, batch, lq)?;
        self.linear(ctx, a.wo, a.bo)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var, TensorError> {
        let i = |s: &str| self.index[format!("{prefix}.{s}").as_str()];
        let (w1, b1, w2, b2) = (i("w1"), i("b1"), i("w2"), i("b2"));
        let hidden = self.linear(x, w1, b1)?;
        let hidden = self.tape.relu(hidden)?;
        self.linear(hidden, w2, b2)
    }

    /// `[B*h, lq, lk]` mask: key padding, plus causality when `causal`.
    fn mask(&mut self, keys: &[u32], batch: usize, lq: usize, lk: usize, causal: bool) -> Result<Var, TensorError> {
        let h = self.model.config.heads;
        let mut m = Vec::with_capacity(batch * h * lq * lk);
        for b in 0..batch {
            let row_keys = &keys[b * lk..(b + 1) * lk];
            let mut block = Vec::with_capacity(lq * lk);
            for i in 0..lq {
                for (j, &key) in row_keys.iter().enumerate() {
                    let blocked = key == PAD_ID || (causal && j > i);
                    block.push(if blocked { T::of(MASKED) } else { T::zero() });
                }
            }
            for _ in 0..h {
                m.extend_from_slice(&block);
            }
        }
        self.tape.constant(&[batch * h, lq, lk], m)
    }

    fn encoder(&mut self, src: &[u32], batch: usize, len: usize) -> Result<Var, TensorError> {
        let mut x = self.embed(src, batch, len)?;
        let mask = self.mask(src, batch, len, len, false)?;
        for l in 0..self.model.config.layers {
            let h = self.norm(x, &format!("enc.{l}.ln1"))?;
            let a = self.attn(&format!("enc.{l}.self"));
            let h = self.attention(&a, h, h, batch, len, len, mask)?;
            let h = self.dropout(h)?;
            x = self.tape.add(x, h)?;
            let h = self.norm(x, &format!("enc.{l}.ln2"))?;
            let h = self.ffn(h, &format!("enc.{l}.ffn"))?;
            let h = self.dropout(h)?;
            x = self.tape.add(x, h)?;
        }
        self.norm(x, "enc.ln")
    }

    /// Returns logits `[B*lt, V]`.
    #[allow(clippy::too_many_arguments)]
    fn decoder(
        &mut self,
        tgt: &[u32],
        memory: Var,
        src: &[u32],
        batch: usize,
        lt: usize,
        ls: usize,
    ) -> Result<Var, TensorError> {
        let mut y = self.embed(tgt, batch, lt)?;
        let self_mask = self.mask(tgt, batch, lt, lt, true)?;
        let cross_mask = self.mask(src, batch, lt, ls, false)?;
        for l in 0..self.model.config.layers {
            let h = self.norm(y, &format!("dec.{l}.ln1"))?;
            let a = self.attn(&format!("dec.{l}.self"));
            let h = self.attention(&a, h, h, batch, lt, lt, self_mask)?;
            let h = self.dropout(h)?;
            y = self.tape.add(y, h)?;
            let h = self.norm(y, &format!("dec.{l}.ln2"))?;
            let a = self.attn(&format!("dec.{l}.cross"));
            let h = self.attention(&a, h, memory, batch, lt, ls, cross_mask)?;
            let h = self.dropout(h)?;
            y = self.tape.add(y, h)?;
            let h = self.norm(y, &format!("dec.{l}.ln3"))?;
            let h = self.ffn(h, &format!("dec.{l}.ffn"))?;
            let h = self.dropout(h)?;
            y = self.tape.add(y, h)?;
        }
        let y = self.norm(y, "dec.ln")?;
        self.tape.matmul_nt(y, self.p("embed"))
    }
}

fn pad_rows(rows: &[&[u32]]) -> (Vec<u32>, usize) {
    let len = rows.iter().map(|r| r.len()).max().unwrap_or(0).max(1);
    let mut out = Vec::with_capacity(rows.len() * len);
    for r in rows {
        out.extend_from_slice(r);
        out.extend(std::iter::repeat_n(PAD_ID, len - r.len()));
    }
    (out, len)
}

/// Log-softmax of one row.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
    let mut z = 0.0;
    for &v in row {
        z += (v.to_f64() - max).exp();
    }
    let lse = max + z.ln();
    row.iter().map(|&v| v.to_f64() - lse).collect()
}

impl<T: Real> TranslationModel<T> {
    /// Xavier-uniform weights from a generator seeded with `config.seed`;
    /// layer-norm gains 1, all biases 0.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let entries = parameter_layout(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = if shape.len() == 2 {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
                } else if name.ends_with(".g") {
                    vec![T::one(); n]
                } else {
                    vec![T::zero(); n]
                };
                let t = Tensor::new(shape, data).unwrap().with_grad(true);
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params: Parameters::new(entries),
        })
    }

    /// Wraps existing parameters, checking them against the layout.
    pub fn from_parameters(config: ModelConfig, params: Parameters<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = parameter_layout(&config);
        let matches = layout.len() == params.len()
            && layout
                .iter()
                .zip(params.iter())
                .all(|((n, s), (pn, t))| n == pn && s.as_slice() == t.shape());
        if !matches {
            return Err(ModelError::InvalidConfig(
                "parameters do not match the configured architecture".into(),
            ));
        }
        let mut params = params;
        for t in params.tensors_mut() {
            *t = t.clone().with_grad(true);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    pub fn into_parameters(self) -> Parameters<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> TranslationModel<U> {
        TranslationModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Records every parameter as a tape leaf, in layout order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.leaf(t)).collect()
    }

    fn graph<'a>(
        &'a self,
        tape: &'a mut Tape<T>,
        vars: &'a [Var],
        dropout: Option<&'a mut ChaCha8Rng>,
    ) -> Graph<'a, T> {
        let index = self
            .params
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        Graph {
            model: self,
            tape,
            vars,
            index,
            dropout,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::IdOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.config.max_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max_len: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Builds the teacher-forced loss on `tape`. `vars` must come from
    /// [`TranslationModel::bind`] on the same tape. Passing a generator
    /// enables dropout.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        batch: &Batch,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        if batch.is_empty() || batch.target_tokens() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let n = batch.len();
        let src_rows: Vec<&[u32]> = batch.src.iter().map(Vec::as_slice).collect();
        let dec_rows: Vec<&[u32]> = batch.tgt.iter().map(|t| &t[..t.len().saturating_sub(1)]).collect();
        let label_rows: Vec<&[u32]> = batch.tgt.iter().map(|t| t.get(1..).unwrap_or(&[])).collect();
        for r in src_rows.iter().chain(&label_rows) {
            self.check_ids(r)?;
        }
        if batch.tgt.iter().any(|t| t.first() != Some(&BOS_ID)) {
            return Err(ModelError::MissingBos);
        }
        let (src, ls) = pad_rows(&src_rows);
        let (dec_in, lt) = pad_rows(&dec_rows);
        let (labels, _) = pad_rows(&label_rows);
        self.check_len(ls)?;
        self.check_len(lt)?;

        let smoothing = T::of(self.config.label_smoothing);
        let mut g = self.graph(tape, vars, dropout);
        let memory = g.encoder(&src, n, ls)?;
        let logits = g.decoder(&dec_in, memory, &src, n, lt, ls)?;
        match g.tape.cross_entropy(logits, &labels, Some(PAD_ID), smoothing) {
            Err(TensorError::NoTargets) => Err(ModelError::EmptyBatch),
            other => Ok(other?),
        }
    }

    /// Mean token cross-entropy of `batch`, without dropout.
    pub fn forward_loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let loss = self.loss_on_tape(&mut tape, &vars, batch, None)?;
        Ok(tape.value(loss)[0].to_f64())
    }

    /// Runs the encoder once for repeated decoding.
    pub fn encode_source(&self, src: &[u32]) -> Result<EncodedSource<T>, ModelError> {
        self.check_ids(src)?;
        self.check_len(src.len().max(1))?;
        let src: Vec<u32> = if src.is_empty() { vec![PAD_ID] } else { src.to_vec() };
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mut g = self.graph(&mut tape, &vars, None);
        let memory = g.encoder(&src, 1, src.len())?;
        Ok(EncodedSource {
            memory: tape.tensor(memory),
            src,
        })
    }

    /// Log-probabilities of the token following `prefix`.
    pub fn next_log_probs(&self, enc: &EncodedSource<T>, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        Ok(self.next_log_probs_batch(enc, &[prefix])?.remove(0))
    }

    /// [`TranslationModel::next_log_probs`] for several prefixes of one
    /// source in a single decoder pass. Rows do not interact, so each result
    /// equals the single-prefix call exactly.
    pub fn next_log_probs_batch(
        &self,
        enc: &EncodedSource<T>,
        prefixes: &[&[u32]],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        for prefix in prefixes {
            if prefix.first() != Some(&BOS_ID) {
                return Err(ModelError::MissingBos);
            }
            self.check_ids(prefix)?;
        }
        let (tgt, lt) = pad_rows(prefixes);
        self.check_len(lt)?;
        let n = prefixes.len();
        let ls = enc.src.len();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let memory = if n == 1 {
            tape.leaf(&enc.memory)
        } else {
            let mut tiled = Vec::with_capacity(n * enc.memory.numel());
            for _ in 0..n {
                tiled.extend_from_slice(enc.memory.data());
            }
            tape.constant(&[n * ls, self.config.d_model], tiled)?
        };
        let src: Vec<u32> = enc.src.iter().copied().cycle().take(n * ls).collect();
        let mut g = self.graph(&mut tape, &vars, None);
        let logits = g.decoder(&tgt, memory, &src, n, lt, ls)?;
        let v = self.config.vocab_size;
        let values = tape.value(logits);
        Ok(prefixes
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let row = b * lt + p.len() - 1;
                log_softmax(&values[row * v..(row + 1) * v])
            })
            .collect())
    }

    /// Log-probabilities over the vocabulary for the position after `prefix`.
    pub fn logits_step(&self, src: &[u32], prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
        let enc = self.encode_source(src)?;
        self.next_log_probs(&enc, prefix)
    }
}
