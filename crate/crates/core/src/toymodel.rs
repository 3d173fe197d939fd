//! A tiny deterministic decoder-only transformer.
//!
//! Weights are drawn from ChaCha8 in declaration order. All reductions run
//! in ascending index order (input features for mat-vecs, key positions for
//! attention, features for layer norm), so the same weights and tokens give
//! bit-identical logits on every platform. `exp`/`sqrt` come from `libm`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("invalid model shape: {0}")]
    Shape(String),
    #[error("sequence of {len} tokens exceeds max context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("prefix must contain at least one token")]
    EmptyPrefix,
    #[error("token {token} is outside the vocabulary of {vocab}")]
    Token { token: u32, vocab: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_context: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            dim: 64,
            layers: 4,
            heads: 4,
            max_context: 512,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: String| Err(ToyError::Shape(m));
        if self.vocab < 2 {
            return bad(format!("vocab {} must be at least 2", self.vocab));
        }
        if self.vocab > u32::MAX as usize {
            return bad("vocab does not fit in u32 token ids".into());
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.max_context == 0 {
            return bad("max_context must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    ln1: (Vec<f64>, Vec<f64>),
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ln2: (Vec<f64>, Vec<f64>),
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Layer {
    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 12] {
        [
            &mut self.ln1.0,
            &mut self.ln1.1,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2.0,
            &mut self.ln2.1,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    config: ToyConfig,
    seed: u64,
    tok_emb: Vec<f64>,
    pos_emb: Vec<f64>,
    layers: Vec<Layer>,
    ln_f: (Vec<f64>, Vec<f64>),
    head: Vec<f64>,
}

const MLP_RATIO: usize = 4;

fn uniform<R: Rng + ?Sized>(rng: &mut R, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
}

/// `x (len in) · w (in × out, row-major)`, accumulating inputs in order.
fn matvec(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, &xi) in x.iter().enumerate() {
        for (yo, wo) in y.iter_mut().zip(&w[i * out..(i + 1) * out]) {
            *yo += xi * wo;
        }
    }
    y
}

fn layer_norm(x: &[f64], (gain, bias): &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / libm::sqrt(var + 1e-5);
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

/// Lowest index among the maxima.
pub fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

impl ToyLm {
    pub fn build(seed: u64, config: ToyConfig) -> Result<Self, ToyError> {
        config.validate()?;
        let ToyConfig {
            vocab: v,
            dim: d,
            layers,
            max_context,
            ..
        } = config;
        let hidden = MLP_RATIO * d;
        let mut rng = crate::rng::seeded(seed);
        let a_d = 1.0 / libm::sqrt(d as f64);
        let a_h = 1.0 / libm::sqrt(hidden as f64);
        let tok_emb = uniform(&mut rng, v * d, 1.0);
        let pos_emb = uniform(&mut rng, max_context * d, 0.5);
        let mut stack = Vec::with_capacity(layers);
        for _ in 0..layers {
            stack.push(Layer {
                ln1: (vec![1.0; d], vec![0.0; d]),
                wq: uniform(&mut rng, d * d, a_d),
                wk: uniform(&mut rng, d * d, a_d),
                wv: uniform(&mut rng, d * d, a_d),
                wo: uniform(&mut rng, d * d, a_d),
                ln2: (vec![1.0; d], vec![0.0; d]),
                w1: uniform(&mut rng, d * hidden, a_d),
                b1: uniform(&mut rng, hidden, 0.1),
                w2: uniform(&mut rng, hidden * d, a_h),
                b2: uniform(&mut rng, d, 0.1),
            });
        }
        let head = uniform(&mut rng, d * v, a_d * 4.0);
        Ok(Self {
            config,
            seed,
            tok_emb,
            pos_emb,
            layers: stack,
            ln_f: (vec![1.0; d], vec![0.0; d]),
            head,
        })
    }

    /// A draft model correlated with `target`: every weight `w` becomes
    /// `w + noise · max|t| · u`, where `t` is the tensor holding `w` and `u` is
    /// uniform in [-1, 1] drawn from `seed`.
    pub fn perturbed(target: &ToyLm, noise: f64, seed: u64) -> Self {
        let mut lm = target.clone();
        lm.seed = seed;
        let mut rng = crate::rng::seeded(seed);
        let mut jitter = |t: &mut Vec<f64>| {
            let scale = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for w in t.iter_mut() {
                *w += noise * scale * (rng.random::<f64>() * 2.0 - 1.0);
            }
        };
        jitter(&mut lm.tok_emb);
        jitter(&mut lm.pos_emb);
        for layer in &mut lm.layers {
            for t in layer.tensors_mut() {
                jitter(t);
            }
        }
        jitter(&mut lm.head);
        lm
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// SHA-256 over the little-endian bytes of the first layer's weights.
    pub fn first_layer_checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut layer = self.layers.first().cloned();
        if let Some(layer) = layer.as_mut() {
            for t in layer.tensors_mut() {
                for w in t.iter() {
                    h.update(w.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ToyError> {
        if let Some(&token) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(ToyError::Token {
                token,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Logits for every position of `tokens`, shape `(len, V)`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<Vec<f64>>, ToyError> {
        if tokens.is_empty() {
            return Err(ToyError::EmptyPrefix);
        }
        let mut s = Session::new(self);
        s.keep_logits = true;
        s.extend(tokens)?;
        Ok(s.logits)
    }

    /// Appends `steps` argmax tokens to `prompt`.
    pub fn greedy_decode(&self, prompt: &[u32], steps: usize) -> Result<Vec<u32>, ToyError> {
        if prompt.is_empty() {
            return Err(ToyError::EmptyPrefix);
        }
        self.check_tokens(prompt)?;
        let total = prompt.len() + steps;
        if total > self.config.max_context {
            return Err(ToyError::ContextOverflow {
                len: total,
                max: self.config.max_context,
            });
        }
        let mut s = Session::new(self);
        s.extend(prompt)?;
        for _ in 0..steps {
            let next = s.next_token();
            s.extend(&[next])?;
        }
        Ok(s.tokens)
    }
}

/// Incremental decoding state. Cached keys and values are exactly the ones a
/// full [`ToyLm::forward`] would compute, so predictions agree bit for bit.
#[derive(Debug, Clone)]
pub struct Session<'a> {
    lm: &'a ToyLm,
    tokens: Vec<u32>,
    /// `[layer][position] -> d` keys and values.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
    preds: Vec<u32>,
    keep_logits: bool,
    logits: Vec<Vec<f64>>,
    positions_computed: u64,
}

impl<'a> Session<'a> {
    pub fn new(lm: &'a ToyLm) -> Self {
        Self {
            lm,
            tokens: Vec::new(),
            keys: vec![Vec::new(); lm.layers.len()],
            values: vec![Vec::new(); lm.layers.len()],
            preds: Vec::new(),
            keep_logits: false,
            logits: Vec::new(),
            positions_computed: 0,
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Greedy prediction after position `i`.
    pub fn prediction(&self, i: usize) -> u32 {
        self.preds[i]
    }

    /// Greedy prediction after the last token.
    pub fn next_token(&self) -> u32 {
        *self.preds.last().expect("session holds at least one token")
    }

    /// Total positions evaluated since creation (a work counter).
    pub fn positions_computed(&self) -> u64 {
        self.positions_computed
    }

    /// Appends tokens and returns the greedy predictions at the new positions.
    pub fn extend(&mut self, tokens: &[u32]) -> Result<&[u32], ToyError> {
        self.lm.check_tokens(tokens)?;
        let len = self.tokens.len() + tokens.len();
        if len > self.lm.config.max_context {
            return Err(ToyError::ContextOverflow {
                len,
                max: self.lm.config.max_context,
            });
        }
        let start = self.tokens.len();
        for &t in tokens {
            self.step(t);
        }
        Ok(&self.preds[start..])
    }

    pub fn truncate(&mut self, len: usize) {
        self.tokens.truncate(len);
        self.preds.truncate(len);
        self.logits.truncate(len);
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(len);
            v.truncate(len);
        }
    }

    fn step(&mut self, token: u32) {
        let lm = self.lm;
        let ToyConfig { dim: d, heads, vocab, .. } = lm.config;
        let dh = d / heads;
        let pos = self.tokens.len();
        let inv_sqrt = 1.0 / libm::sqrt(dh as f64);
        let mut x: Vec<f64> = (0..d)
            .map(|e| lm.tok_emb[token as usize * d + e] + lm.pos_emb[pos * d + e])
            .collect();
        for (li, layer) in lm.layers.iter().enumerate() {
            let h = layer_norm(&x, &layer.ln1);
            let q = matvec(&h, &layer.wq, d);
            self.keys[li].push(matvec(&h, &layer.wk, d));
            self.values[li].push(matvec(&h, &layer.wv, d));
            let (keys, values) = (&self.keys[li], &self.values[li]);
            let mut attn = vec![0.0; d];
            for head in 0..heads {
                let span = head * dh..(head + 1) * dh;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| q[span.clone()].iter().zip(&k[span.clone()]).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt)
                    .collect();
                let peak = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| libm::exp(s - peak)).collect();
                let total: f64 = weights.iter().sum();
                for (w, v) in weights.iter().zip(values) {
                    for (o, vv) in attn[span.clone()].iter_mut().zip(&v[span.clone()]) {
                        *o += w / total * vv;
                    }
                }
            }
            for (xi, o) in x.iter_mut().zip(matvec(&attn, &layer.wo, d)) {
                *xi += o;
            }
            let h = layer_norm(&x, &layer.ln2);
            let mut hidden = matvec(&h, &layer.w1, MLP_RATIO * d);
            for (a, b) in hidden.iter_mut().zip(&layer.b1) {
                *a = (*a + b).max(0.0);
            }
            for ((xi, o), b) in x.iter_mut().zip(matvec(&hidden, &layer.w2, d)).zip(&layer.b2) {
                *xi += o + b;
            }
        }
        let logits = matvec(&layer_norm(&x, &lm.ln_f), &lm.head, vocab);
        self.tokens.push(token);
        self.preds.push(argmax(&logits));
        if self.keep_logits {
            self.logits.push(logits);
        }
        self.positions_computed += 1;
    }
}
