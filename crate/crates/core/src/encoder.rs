//! BERT-style post-LN transformer encoder with MLM, [CLS]-classification and
//! per-token emission heads, plus the CRF transition parameters consumed by
//! the sequence-tagging loss.
//!
//! Parameter names are stable and double as checkpoint keys:
//!
//! ```text
//! embeddings.token  embeddings.position  embeddings.ln.{gamma,beta}
//! layer.{i}.attn.{q,k,v,o}.{w,b}  layer.{i}.attn.ln.{gamma,beta}
//! layer.{i}.ffn.{in,out}.{w,b}    layer.{i}.ffn.ln.{gamma,beta}
//! heads.mlm.{w,b}  heads.pooler.{w,b}  heads.cls.{w,b}  heads.emission.{w,b}
//! crf.transitions  crf.start  crf.end
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub num_tags: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    /// Reuse the token embedding as the MLM output projection.
    pub tie_mlm: bool,
    /// Dense + tanh on [CLS] before the classifier.
    pub pooler: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            hidden: 64,
            heads: 4,
            ffn_mult: 4,
            max_seq_len: 64,
            vocab_size: 128,
            num_classes: 8,
            num_tags: 5,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            tie_mlm: false,
            pooler: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return bad(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.ffn_mult == 0 || self.max_seq_len == 0 || self.vocab_size == 0 {
            return bad("ffn_mult, max_seq_len and vocab_size must be positive".into());
        }
        if self.num_classes == 0 || self.num_tags == 0 {
            return bad("num_classes and num_tags must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    attn_ln: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_ln: Norm,
}

#[derive(Clone, Debug, PartialEq)]
struct Index {
    token: usize,
    position: usize,
    emb_ln: Norm,
    layers: Vec<Layer>,
    mlm: Linear,
    pooler: Option<Linear>,
    cls: Linear,
    emission: Linear,
    transitions: usize,
    start: usize,
    end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub params: ParamStore<T>,
    idx: Index,
}

/// Token ids and attention mask for `batch` rows of `seq` positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Stacks rows, dropping trailing columns that are padding in every row.
    pub fn from_rows(rows: &[&[usize]], masks: &[&[u8]]) -> Result<Self> {
        let full = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || rows.len() != masks.len() {
            return Err(Error::contract("batch needs matching, non-empty id and mask rows"));
        }
        if rows.iter().any(|r| r.len() != full) || masks.iter().any(|m| m.len() != full)
        {
            return Err(Error::contract("batch rows differ in length"));
        }
        let seq = masks
            .iter()
            .map(|m| m.iter().rposition(|&x| x != 0).map_or(1, |p| p + 1))
            .max()
            .unwrap_or(1);
        let mut ids = Vec::with_capacity(rows.len() * seq);
        let mut mask = Vec::with_capacity(rows.len() * seq);
        for (r, m) in rows.iter().zip(masks) {
            ids.extend_from_slice(&r[..seq]);
            mask.extend_from_slice(&m[..seq]);
        }
        Ok(Self {
            ids,
            mask,
            batch: rows.len(),
            seq,
        })
    }
}

/// Encoder output on a tape: `[batch, seq, hidden]` plus each layer's
/// attention probabilities `[batch, heads, seq, seq]`.
#[derive(Clone, Debug)]
pub struct Hidden {
    pub states: Var,
    pub attention: Vec<Var>,
    pub batch: usize,
    pub seq: usize,
}

/// Closed-form parameter count.
pub fn parameter_count(c: &EncoderConfig) -> usize {
    let (h, f, v, t) = (c.hidden, c.hidden * c.ffn_mult, c.vocab_size, c.num_tags);
    let embeddings = v * h + c.max_seq_len * h + 2 * h;
    let layer = 4 * (h * h + h) + 2 * h + (h * f + f) + (f * h + h) + 2 * h;
    let mlm = if c.tie_mlm { v } else { h * v + v };
    let pooler = if c.pooler { h * h + h } else { 0 };
    embeddings + c.num_layers * layer + mlm + pooler + (h * c.num_classes + c.num_classes) + (h * t + t) + t * t + 2 * t
}

struct Init<'a, R: Rng> {
    store: ParamStore<f64>,
    rng: &'a mut R,
    normal: Normal<f64>,
}

impl<R: Rng> Init<'_, R> {
    fn trunc_normal(&mut self, name: &str, shape: &[usize]) -> usize {
        let sigma = self.normal.std_dev();
        let t = Tensor::from_fn(shape, |_| loop {
            let x = self.normal.sample(self.rng);
            if x.abs() <= 2.0 * sigma {
                break x;
            }
        });
        self.store.register(name, t, true)
    }

    fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> usize {
        self.store.register(name, Tensor::full(shape, value), false)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.trunc_normal(&format!("{name}.w"), &[fan_in, fan_out]),
            b: self.constant(&format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, n: usize) -> Norm {
        Norm {
            gamma: self.constant(&format!("{name}.gamma"), &[n], 1.0),
            beta: self.constant(&format!("{name}.beta"), &[n], 0.0),
        }
    }
}

/// Seeded random initialization: truncated normal (σ = 0.02, cut at 2σ)
/// weights and embeddings, zero biases, unit layer-norm scale, zero CRF scores.
pub fn init_model<T: Float>(config: &EncoderConfig, seed: u64) -> Result<EncoderModel<T>> {
    config.validate()?;
    let mut r = rng::stream(seed, "init");
    let mut init = Init {
        store: ParamStore::new(),
        rng: &mut r,
        normal: Normal::new(0.0, 0.02).expect("valid normal"),
    };
    let (h, f) = (config.hidden, config.hidden * config.ffn_mult);
    let token = init.trunc_normal("embeddings.token", &[config.vocab_size, h]);
    let position = init.trunc_normal("embeddings.position", &[config.max_seq_len, h]);
    let emb_ln = init.norm("embeddings.ln", h);
    let layers = (0..config.num_layers)
        .map(|i| Layer {
            q: init.linear(&format!("layer.{i}.attn.q"), h, h),
            k: init.linear(&format!("layer.{i}.attn.k"), h, h),
            v: init.linear(&format!("layer.{i}.attn.v"), h, h),
            o: init.linear(&format!("layer.{i}.attn.o"), h, h),
            attn_ln: init.norm(&format!("layer.{i}.attn.ln"), h),
            ffn_in: init.linear(&format!("layer.{i}.ffn.in"), h, f),
            ffn_out: init.linear(&format!("layer.{i}.ffn.out"), f, h),
            ffn_ln: init.norm(&format!("layer.{i}.ffn.ln"), h),
        })
        .collect();
    let mlm = if config.tie_mlm {
        Linear {
            w: token,
            b: init.constant("heads.mlm.b", &[config.vocab_size], 0.0),
        }
    } else {
        init.linear("heads.mlm", h, config.vocab_size)
    };
    let pooler = config.pooler.then(|| init.linear("heads.pooler", h, h));
    let cls = init.linear("heads.cls", h, config.num_classes);
    let emission = init.linear("heads.emission", h, config.num_tags);
    let t = config.num_tags;
    let transitions = init.store.register("crf.transitions", Tensor::zeros(&[t, t]), false);
    let start = init.store.register("crf.start", Tensor::zeros(&[t]), false);
    let end = init.store.register("crf.end", Tensor::zeros(&[t]), false);
    let idx = Index {
        token,
        position,
        emb_ln,
        layers,
        mlm,
        pooler,
        cls,
        emission,
        transitions,
        start,
        end,
    };
    Ok(EncoderModel {
        config: config.clone(),
        params: init.store.cast(),
        idx,
    })
}

impl<T: Float> EncoderModel<T> {
    pub fn cast<U: Float>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            params: self.params.cast(),
            idx: self.idx.clone(),
        }
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, l: &Linear) -> Result<Var> {
        let w = self.params.var(tape, l.w);
        let b = self.params.var(tape, l.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, n: &Norm) -> Result<Var> {
        let g = self.params.var(tape, n.gamma);
        let b = self.params.var(tape, n.beta);
        tape.layer_norm(x, g, b, T::lit(self.config.layer_norm_eps))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch,
        training: bool,
        rng: &mut R,
    ) -> Result<Hidden> {
        let c = &self.config;
        let (b, s, h) = (batch.batch, batch.seq, c.hidden);
        if s > c.max_seq_len {
            return Err(Error::contract(format!(
                "sequence length {s} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        if batch.ids.len() != b * s || batch.mask.len() != b * s {
            return Err(Error::contract("batch ids/mask do not match batch x seq"));
        }
        if batch.mask.iter().any(|&m| m > 1) {
            return Err(Error::contract("attention mask must be 0/1"));
        }
        let p = c.dropout;
        let tok = self.params.var(tape, self.idx.token);
        let pos = self.params.var(tape, self.idx.position);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let te = tape.embedding(tok, &batch.ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        x = self.norm(tape, x, &self.idx.emb_ln)?;
        x = tape.dropout(x, p, training, rng)?;

        let (nh, d) = (c.heads, c.head_dim());
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let mut attention = Vec::with_capacity(c.num_layers);
        for layer in &self.idx.layers {
            let split = |tape: &mut Tape<T>, l: &Linear| -> Result<Var> {
                let y = self.linear(tape, x, l)?;
                let y = tape.reshape(y, &[b, s, nh, d])?;
                tape.swap_axes12(y)
            };
            let q = split(tape, &layer.q)?;
            let k = split(tape, &layer.k)?;
            let v = split(tape, &layer.v)?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.mask_keys(scores, &batch.mask)?;
            let probs = tape.softmax(scores);
            attention.push(probs);
            let probs = tape.dropout(probs, p, training, rng)?;
            let ctx = tape.bmm(probs, v, false)?;
            let ctx = tape.swap_axes12(ctx)?;
            let ctx = tape.reshape(ctx, &[b * s, h])?;
            let a = self.linear(tape, ctx, &layer.o)?;
            let a = tape.dropout(a, p, training, rng)?;
            let res = tape.add(x, a)?;
            x = self.norm(tape, res, &layer.attn_ln)?;

            let f = self.linear(tape, x, &layer.ffn_in)?;
            let f = tape.gelu(f);
            let f = self.linear(tape, f, &layer.ffn_out)?;
            let f = tape.dropout(f, p, training, rng)?;
            let res = tape.add(x, f)?;
            x = self.norm(tape, res, &layer.ffn_ln)?;
        }
        let states = tape.reshape(x, &[b, s, h])?;
        Ok(Hidden {
            states,
            attention,
            batch: b,
            seq: s,
        })
    }

    fn check_hidden(&self, tape: &Tape<T>, hidden: &Hidden) -> Result<()> {
        let expected = [hidden.batch, hidden.seq, self.config.hidden];
        if tape.shape(hidden.states) != expected {
            return Err(Error::Shape {
                op: "head input",
                left: tape.shape(hidden.states).to_vec(),
                right: expected.to_vec(),
            });
        }
        Ok(())
    }

    /// `[batch, num_classes]` from the [CLS] position.
    pub fn cls_logits(&self, tape: &mut Tape<T>, hidden: &Hidden) -> Result<Var> {
        self.check_hidden(tape, hidden)?;
        let rows: Vec<usize> = (0..hidden.batch).map(|i| i * hidden.seq).collect();
        let mut x = tape.gather_rows(hidden.states, &rows)?;
        if let Some(p) = &self.idx.pooler {
            x = self.linear(tape, x, p)?;
            x = tape.tanh(x);
        }
        self.linear(tape, x, &self.idx.cls)
    }

    /// `[batch, seq, num_tags]` emission scores.
    pub fn token_logits(&self, tape: &mut Tape<T>, hidden: &Hidden) -> Result<Var> {
        self.check_hidden(tape, hidden)?;
        self.linear(tape, hidden.states, &self.idx.emission)
    }

    /// `[batch, seq, vocab_size]`.
    pub fn mlm_logits(&self, tape: &mut Tape<T>, hidden: &Hidden) -> Result<Var> {
        self.check_hidden(tape, hidden)?;
        if self.config.tie_mlm {
            let (b, s, h, v) = (hidden.batch, hidden.seq, self.config.hidden, self.config.vocab_size);
            let emb = self.params.var(tape, self.idx.mlm.w);
            let emb = tape.reshape(emb, &[1, v, h])?;
            let x = tape.reshape(hidden.states, &[1, b * s, h])?;
            let y = tape.bmm(x, emb, true)?;
            let y = tape.reshape(y, &[b, s, v])?;
            let bias = self.params.var(tape, self.idx.mlm.b);
            tape.add_bias(y, bias)
        } else {
            self.linear(tape, hidden.states, &self.idx.mlm)
        }
    }

    /// CRF transition, start and end score variables.
    pub fn crf_vars(&self, tape: &mut Tape<T>) -> (Var, Var, Var) {
        (
            self.params.var(tape, self.idx.transitions),
            self.params.var(tape, self.idx.start),
            self.params.var(tape, self.idx.end),
        )
    }

    /// Current CRF scores as plain arrays: `(transitions, start, end)`.
    pub fn crf_scores(&self) -> (&[T], &[T], &[T]) {
        (
            self.params.get(self.idx.transitions).data(),
            self.params.get(self.idx.start).data(),
            self.params.get(self.idx.end).data(),
        )
    }
}
