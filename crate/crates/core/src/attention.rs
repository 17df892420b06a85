//! Multi-head self-attention with two interchangeable score functions.
//!
//! The spectral variant scores tokens with `softmax(Q diag(sigma) K^T / sqrt(d_k))`
//! where `Q` and `K` are the row-wise unit-normalized projections and `sigma`
//! is a learnable per-head vector. The baseline is ordinary scaled dot-product
//! attention on the raw projections.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::numerics::{normalize_rows_raw, Tape, Tensor, Var, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Svda,
    Baseline,
}

impl Mechanism {
    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Svda => "svda",
            Mechanism::Baseline => "baseline",
        }
    }

    pub fn has_sigma(self) -> bool {
        matches!(self, Mechanism::Svda)
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_capture() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_k: usize,
    pub mechanism: Mechanism,
    #[serde(default = "default_capture")]
    pub capture_diagnostics: bool,
}

impl AttentionConfig {
    pub fn new(d_model: usize, num_heads: usize, mechanism: Mechanism) -> Result<Self> {
        if num_heads == 0 || d_model % num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {d_model} is not divisible into {num_heads} heads"
            )));
        }
        let cfg = Self {
            d_model,
            num_heads,
            d_k: d_model / num_heads,
            mechanism,
            capture_diagnostics: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || self.d_k == 0 {
            return Err(Error::InvalidConfig("attention dimensions must be positive".into()));
        }
        if self.num_heads * self.d_k != self.d_model {
            return Err(Error::InvalidConfig(format!(
                "num_heads * d_k = {} * {} != d_model {}",
                self.num_heads, self.d_k, self.d_model
            )));
        }
        Ok(())
    }

    pub fn with_mechanism(&self, mechanism: Mechanism) -> Self {
        Self {
            mechanism,
            ..self.clone()
        }
    }
}

/// Number of learnable scalars in one multi-head attention layer.
///
/// Both mechanisms share `H` query/key/value projections of `d_model x d_k`
/// and a `d_model x d_model` output projection; the spectral variant adds the
/// `H * d_k` entries of its diagonal vectors.
pub fn param_count(config: &AttentionConfig) -> usize {
    let projections = config.num_heads * 3 * config.d_model * config.d_k;
    let output = config.d_model * config.d_model;
    let spectral = if config.mechanism.has_sigma() {
        config.num_heads * config.d_k
    } else {
        0
    };
    projections + output + spectral
}

/// One head's weights. `sigma` is present only for the spectral mechanism.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = Tensor> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub sigma: Option<T>,
}

impl<T> HeadParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> HeadParams<U> {
        HeadParams {
            w_q: f(&self.w_q),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            sigma: self.sigma.as_ref().map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        if let Some(s) = &self.sigma {
            f(format!("{prefix}.sigma"), s);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        if let Some(s) = &mut self.sigma {
            f(format!("{prefix}.sigma"), s);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams<T = Tensor> {
    pub heads: Vec<HeadParams<T>>,
    pub w_o: T,
}

impl<T> MultiHeadParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MultiHeadParams<U> {
        MultiHeadParams {
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
            w_o: f(&self.w_o),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("{prefix}.heads.{i}"), f);
        }
        f(format!("{prefix}.w_o"), &self.w_o);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.heads.{i}"), f);
        }
        f(format!("{prefix}.w_o"), &mut self.w_o);
    }
}

impl MultiHeadParams<Tensor> {
    /// Fan-in uniform projections; spectral vectors start at all-ones, so the
    /// spectral mechanism begins as cosine-similarity attention. The ones are
    /// not drawn from `rng`, so both mechanisms consume identical random streams.
    pub fn init(config: &AttentionConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, dk) = (config.d_model, config.d_k);
        let heads = (0..config.num_heads)
            .map(|_| HeadParams {
                w_q: fan_in_uniform(&[d, dk], d, rng),
                w_k: fan_in_uniform(&[d, dk], d, rng),
                w_v: fan_in_uniform(&[d, dk], d, rng),
                sigma: config.mechanism.has_sigma().then(|| Tensor::ones(&[dk])),
            })
            .collect();
        Self {
            heads,
            w_o: fan_in_uniform(&[d, d], d, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> MultiHeadParams<Var> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

/// Per-head quantities captured for the interpretability indicators.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer_index: usize,
    pub head_index: usize,
    pub q_normalized: Tensor,
    pub k_normalized: Tensor,
    pub sigma_snapshot: Option<Tensor>,
    pub attention: Tensor,
}

/// Where a captured record sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordSite {
    pub layer: usize,
    pub head: usize,
}

fn head_dim(tape: &Tape, p: &HeadParams<Var>) -> Result<usize> {
    tape.value(p.w_q).dims2().map(|(_, dk)| dk).map_err(Error::from)
}

/// Spectral head: `A = softmax(Q diag(sigma) K^T / sqrt(d_k))`, `y = A (x W_v)`.
pub fn svda_head_forward(
    tape: &mut Tape,
    x: Var,
    p: &HeadParams<Var>,
    capture: Option<RecordSite>,
) -> Result<(Var, Option<AttentionRecord>)> {
    let sigma = p
        .sigma
        .ok_or_else(|| Error::InvalidConfig("spectral head is missing its sigma vector".into()))?;
    let d_k = head_dim(tape, p)?;
    if tape.value(sigma).len() != d_k {
        return Err(Error::ShapeMismatch(format!(
            "sigma has {} entries, expected d_k = {d_k}",
            tape.value(sigma).len()
        )));
    }
    let q_raw = tape.matmul(x, p.w_q)?;
    let k_raw = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let q = tape.l2_normalize_rows(q_raw, NORM_EPS)?;
    let k = tape.l2_normalize_rows(k_raw, NORM_EPS)?;
    let q_sigma = tape.mul_row(q, sigma)?;
    let k_t = tape.transpose(k)?;
    let logits = tape.matmul(q_sigma, k_t)?;
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let attn = tape.softmax_rows(scaled)?;
    let y = tape.matmul(attn, v)?;
    let rec = capture.map(|site| AttentionRecord {
        layer_index: site.layer,
        head_index: site.head,
        q_normalized: tape.value(q).detached(),
        k_normalized: tape.value(k).detached(),
        sigma_snapshot: Some(tape.value(sigma).detached()),
        attention: tape.value(attn).detached(),
    });
    Ok((y, rec))
}

/// Standard scaled dot-product head on unnormalized projections.
///
/// The captured `q_normalized`/`k_normalized` are normalized outside the
/// graph purely for the alignment indicator.
pub fn baseline_head_forward(
    tape: &mut Tape,
    x: Var,
    p: &HeadParams<Var>,
    capture: Option<RecordSite>,
) -> Result<(Var, Option<AttentionRecord>)> {
    let d_k = head_dim(tape, p)?;
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let k_t = tape.transpose(k)?;
    let logits = tape.matmul(q, k_t)?;
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    let attn = tape.softmax_rows(scaled)?;
    let y = tape.matmul(attn, v)?;
    let rec = match capture {
        Some(site) => {
            let normalize = |t: &Tensor| -> Result<Tensor> {
                let (_, cols) = t.dims2()?;
                Ok(Tensor::new(t.shape().to_vec(), normalize_rows_raw(t.values(), cols, NORM_EPS))?)
            };
            Some(AttentionRecord {
                layer_index: site.layer,
                head_index: site.head,
                q_normalized: normalize(tape.value(q))?,
                k_normalized: normalize(tape.value(k))?,
                sigma_snapshot: None,
                attention: tape.value(attn).detached(),
            })
        }
        None => None,
    };
    Ok((y, rec))
}

pub fn head_forward(
    mechanism: Mechanism,
    tape: &mut Tape,
    x: Var,
    p: &HeadParams<Var>,
    capture: Option<RecordSite>,
) -> Result<(Var, Option<AttentionRecord>)> {
    match mechanism {
        Mechanism::Svda => svda_head_forward(tape, x, p, capture),
        Mechanism::Baseline => baseline_head_forward(tape, x, p, capture),
    }
}

/// Runs every head, concatenates outputs in head order and applies `W_o`.
/// Records are captured for layer `capture_layer` when given.
pub fn multi_head_forward(
    mechanism: Mechanism,
    tape: &mut Tape,
    x: Var,
    params: &MultiHeadParams<Var>,
    capture_layer: Option<usize>,
) -> Result<(Var, Vec<AttentionRecord>)> {
    let mut outputs = Vec::with_capacity(params.heads.len());
    let mut records = Vec::new();
    for (h, head) in params.heads.iter().enumerate() {
        let site = capture_layer.map(|layer| RecordSite { layer, head: h });
        let (y, rec) = head_forward(mechanism, tape, x, head, site)?;
        outputs.push(y);
        records.extend(rec);
    }
    let concat = tape.concat_cols(&outputs)?;
    let y = tape.matmul(concat, params.w_o)?;
    Ok((y, records))
}
