//! Miniature ViT-style dense depth regressor.
//!
//! Image -> non-overlapping `P x P` patches -> linear patch projection plus
//! learnable positional embeddings -> `L` pre-norm encoder blocks ->
//! per-token linear head producing `P^2` depths per patch -> sigmoid.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_forward, param_count, AttentionConfig, AttentionRecord, Mechanism, MultiHeadParams};
use crate::error::{Error, Result};
use crate::init::fan_in_uniform;
use crate::numerics::{Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    NearestUpsampleLinear,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub attention: AttentionConfig,
    pub mlp_hidden: usize,
    #[serde(default)]
    pub head: HeadKind,
}

impl ModelConfig {
    /// 64x64 grayscale, P = 8 (64 tokens), d_model = 64, 4 heads of 16, 4 layers.
    pub fn toy_default(mechanism: Mechanism) -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            channels: 1,
            patch_size: 8,
            d_model: 64,
            num_layers: 4,
            attention: AttentionConfig::new(64, 4, mechanism).expect("valid toy attention"),
            mlp_hidden: 256,
            head: HeadKind::NearestUpsampleLinear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 {
            return bad("image dimensions must be positive".into());
        }
        if self.patch_size == 0 || self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return bad(format!(
                "patch size {} does not divide image {}x{}",
                self.patch_size, self.image_h, self.image_w
            ));
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive".into());
        }
        if self.attention.d_model != self.d_model {
            return bad(format!(
                "attention.d_model {} != d_model {}",
                self.attention.d_model, self.d_model
            ));
        }
        self.attention.validate()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn token_count(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mechanism(&self) -> Mechanism {
        self.attention.mechanism
    }

    pub fn with_mechanism(&self, mechanism: Mechanism) -> Self {
        Self {
            attention: self.attention.with_mechanism(mechanism),
            ..self.clone()
        }
    }

    /// Closed-form scalar parameter count of the instantiated model.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d + param_count(&self.attention) + d * self.mlp_hidden + self.mlp_hidden + self.mlp_hidden * d + d;
        let p2 = self.patch_size * self.patch_size;
        self.patch_dim() * d + self.token_count() * d + self.num_layers * per_layer + 2 * d + d * p2 + p2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<T = Tensor> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub attention: MultiHeadParams<T>,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub mlp_w1: T,
    pub mlp_b1: T,
    pub mlp_w2: T,
    pub mlp_b2: T,
}

impl<T> EncoderBlock<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderBlock<U> {
        EncoderBlock {
            ln1_gamma: f(&self.ln1_gamma),
            ln1_beta: f(&self.ln1_beta),
            attention: self.attention.map(f),
            ln2_gamma: f(&self.ln2_gamma),
            ln2_beta: f(&self.ln2_beta),
            mlp_w1: f(&self.mlp_w1),
            mlp_b1: f(&self.mlp_b1),
            mlp_w2: f(&self.mlp_w2),
            mlp_b2: f(&self.mlp_b2),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.ln1_gamma"), &self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &self.ln1_beta);
        self.attention.visit(&format!("{prefix}.attention"), f);
        f(format!("{prefix}.ln2_gamma"), &self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &self.ln2_beta);
        f(format!("{prefix}.mlp_w1"), &self.mlp_w1);
        f(format!("{prefix}.mlp_b1"), &self.mlp_b1);
        f(format!("{prefix}.mlp_w2"), &self.mlp_w2);
        f(format!("{prefix}.mlp_b2"), &self.mlp_b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(format!("{prefix}.ln1_gamma"), &mut self.ln1_gamma);
        f(format!("{prefix}.ln1_beta"), &mut self.ln1_beta);
        self.attention.visit_mut(&format!("{prefix}.attention"), f);
        f(format!("{prefix}.ln2_gamma"), &mut self.ln2_gamma);
        f(format!("{prefix}.ln2_beta"), &mut self.ln2_beta);
        f(format!("{prefix}.mlp_w1"), &mut self.mlp_w1);
        f(format!("{prefix}.mlp_b1"), &mut self.mlp_b1);
        f(format!("{prefix}.mlp_w2"), &mut self.mlp_w2);
        f(format!("{prefix}.mlp_b2"), &mut self.mlp_b2);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Tensor> {
    pub patch_proj: T,
    pub pos_embed: T,
    pub layers: Vec<EncoderBlock<T>>,
    pub final_ln_gamma: T,
    pub final_ln_beta: T,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ModelParams<T> {
    /// Applies `f` to every parameter in [`ModelParams::visit`] order.
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            patch_proj: f(&self.patch_proj),
            pos_embed: f(&self.pos_embed),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            final_ln_gamma: f(&self.final_ln_gamma),
            final_ln_beta: f(&self.final_ln_beta),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("patch_proj".into(), &self.patch_proj);
        f("pos_embed".into(), &self.pos_embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}"), f);
        }
        f("final_ln_gamma".into(), &self.final_ln_gamma);
        f("final_ln_beta".into(), &self.final_ln_beta);
        f("head_w".into(), &self.head_w);
        f("head_b".into(), &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        f("patch_proj".into(), &mut self.patch_proj);
        f("pos_embed".into(), &mut self.pos_embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}"), f);
        }
        f("final_ln_gamma".into(), &mut self.final_ln_gamma);
        f("final_ln_beta".into(), &mut self.final_ln_beta);
        f("head_w".into(), &mut self.head_w);
        f("head_b".into(), &mut self.head_b);
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }
}

impl ModelParams<Tensor> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.d_model;
        let p2 = config.patch_size * config.patch_size;
        let patch_proj = fan_in_uniform(&[config.patch_dim(), d], config.patch_dim(), rng);
        let pos_embed = fan_in_uniform(&[config.token_count(), d], d, rng);
        let layers = (0..config.num_layers)
            .map(|_| EncoderBlock {
                ln1_gamma: Tensor::ones(&[d]),
                ln1_beta: Tensor::zeros(&[d]),
                attention: MultiHeadParams::init(&config.attention, rng),
                ln2_gamma: Tensor::ones(&[d]),
                ln2_beta: Tensor::zeros(&[d]),
                mlp_w1: fan_in_uniform(&[d, config.mlp_hidden], d, rng),
                mlp_b1: Tensor::zeros(&[config.mlp_hidden]),
                mlp_w2: fan_in_uniform(&[config.mlp_hidden, d], config.mlp_hidden, rng),
                mlp_b2: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            patch_proj,
            pos_embed,
            layers,
            final_ln_gamma: Tensor::ones(&[d]),
            final_ln_beta: Tensor::zeros(&[d]),
            head_w: fan_in_uniform(&[d, p2], d, rng),
            head_b: Tensor::zeros(&[p2]),
        }
    }

    /// Records every parameter as a leaf; `trainable` controls gradient tracking.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.map(&mut |t| tape.leaf(t.detached().with_requires_grad(trainable)))
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

/// Flat-index map taking a `C x H x W` image to `n x (P*P*C)` patch rows.
/// Tokens are in row-major patch order; features are `(c, dy, dx)` ordered.
pub fn patch_indices(config: &ModelConfig) -> Vec<usize> {
    let p = config.patch_size;
    let (gh, gw) = config.grid();
    let (h, w) = (config.image_h, config.image_w);
    let mut idx = Vec::with_capacity(config.token_count() * config.patch_dim());
    for pr in 0..gh {
        for pc in 0..gw {
            for c in 0..config.channels {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(c * h * w + (pr * p + dy) * w + pc * p + dx);
                    }
                }
            }
        }
    }
    idx
}

/// Flat-index map from per-token `n x P^2` head outputs to an `H x W` image.
pub fn unpatch_indices(config: &ModelConfig) -> Vec<usize> {
    let p = config.patch_size;
    let gw = config.grid().1;
    let mut idx = Vec::with_capacity(config.image_h * config.image_w);
    for y in 0..config.image_h {
        for x in 0..config.image_w {
            let token = (y / p) * gw + x / p;
            idx.push(token * p * p + (y % p) * p + x % p);
        }
    }
    idx
}

pub fn patch_embed(tape: &mut Tape, image: Var, params: &ModelParams<Var>, config: &ModelConfig) -> Result<Var> {
    let shape = tape.shape(image).to_vec();
    if shape != [config.channels, config.image_h, config.image_w] {
        if shape.len() == 3 && (shape[1] % config.patch_size != 0 || shape[2] % config.patch_size != 0) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} is not divisible into {p}x{p} patches",
                shape[1],
                shape[2],
                p = config.patch_size
            )));
        }
        return Err(Error::ShapeMismatch(format!(
            "image shape {shape:?} does not match configured [{}, {}, {}]",
            config.channels, config.image_h, config.image_w
        )));
    }
    let patches = tape.gather(image, patch_indices(config), &[config.token_count(), config.patch_dim()])?;
    let projected = tape.matmul(patches, params.patch_proj)?;
    Ok(tape.add(projected, params.pos_embed)?)
}

fn encoder_block(
    tape: &mut Tape,
    x: Var,
    block: &EncoderBlock<Var>,
    mechanism: Mechanism,
    capture_layer: Option<usize>,
) -> Result<(Var, Vec<AttentionRecord>)> {
    let normed = tape.layer_norm_rows(x, block.ln1_gamma, block.ln1_beta, LAYER_NORM_EPS)?;
    let (attn, recs) = multi_head_forward(mechanism, tape, normed, &block.attention, capture_layer)?;
    let h = tape.add(x, attn)?;
    let normed = tape.layer_norm_rows(h, block.ln2_gamma, block.ln2_beta, LAYER_NORM_EPS)?;
    let hidden = tape.matmul(normed, block.mlp_w1)?;
    let hidden = tape.add_row(hidden, block.mlp_b1)?;
    let hidden = tape.gelu(hidden)?;
    let out = tape.matmul(hidden, block.mlp_w2)?;
    let out = tape.add_row(out, block.mlp_b2)?;
    Ok((tape.add(h, out)?, recs))
}

/// Applies every encoder block; with `capture`, returns `L * H` records.
pub fn encoder_forward(
    tape: &mut Tape,
    tokens: Var,
    params: &ModelParams<Var>,
    mechanism: Mechanism,
    capture: bool,
) -> Result<(Var, Vec<AttentionRecord>)> {
    let mut x = tokens;
    let mut records = Vec::new();
    for (l, block) in params.layers.iter().enumerate() {
        let (y, recs) = encoder_block(tape, x, block, mechanism, capture.then_some(l))?;
        x = y;
        records.extend(recs);
    }
    Ok((x, records))
}

/// Final layer norm, then a per-token linear map to `P^2` values placed back
/// on the patch grid, then sigmoid.
pub fn depth_head(tape: &mut Tape, tokens: Var, params: &ModelParams<Var>, config: &ModelConfig) -> Result<Var> {
    let normed = tape.layer_norm_rows(tokens, params.final_ln_gamma, params.final_ln_beta, LAYER_NORM_EPS)?;
    let per_token = tape.matmul(normed, params.head_w)?;
    let per_token = tape.add_row(per_token, params.head_b)?;
    let image = tape.gather(per_token, unpatch_indices(config), &[config.image_h, config.image_w])?;
    Ok(tape.sigmoid(image)?)
}

pub struct ForwardOutput {
    pub depth: Var,
    pub tokens: Var,
    pub records: Vec<AttentionRecord>,
}

/// Mean absolute error between two equally shaped tensors on the tape.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff)?;
    Ok(tape.mean(abs)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    pub fn mechanism(&self) -> Mechanism {
        self.config.mechanism()
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn forward_bound(&self, tape: &mut Tape, params: &ModelParams<Var>, image: &Tensor, capture: bool) -> Result<ForwardOutput> {
        let image = tape.constant(image.clone());
        let tokens = patch_embed(tape, image, params, &self.config)?;
        let (encoded, records) = encoder_forward(tape, tokens, params, self.mechanism(), capture)?;
        let depth = depth_head(tape, encoded, params, &self.config)?;
        Ok(ForwardOutput { depth, tokens, records })
    }

    /// Depth prediction without gradient tracking.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let out = self.forward_bound(&mut tape, &params, image, false)?;
        Ok(tape.value(out.depth).detached())
    }

    /// Prediction plus attention records for every layer and head.
    pub fn predict_with_records(&self, image: &Tensor) -> Result<(Tensor, Tensor, Vec<AttentionRecord>)> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let out = self.forward_bound(&mut tape, &params, image, true)?;
        Ok((
            tape.value(out.depth).detached(),
            tape.value(out.tokens).detached(),
            out.records,
        ))
    }

    /// Attention matrices of all layers/heads, in `(layer, head)` order, for
    /// an encoder input given directly as tokens.
    pub fn attention_from_tokens(&self, tokens: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let t = tape.constant(tokens.clone());
        let (_, records) = encoder_forward(&mut tape, t, &params, self.mechanism(), true)?;
        Ok(records.into_iter().map(|r| r.attention).collect())
    }

    /// L1 loss against `target` without gradients.
    pub fn loss(&self, image: &Tensor, target: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let out = self.forward_bound(&mut tape, &params, image, false)?;
        let t = tape.constant(target.clone());
        let loss = l1_loss(&mut tape, out.depth, t)?;
        Ok(tape.value(loss).values()[0])
    }

    /// L1 loss and its gradient for every parameter, in visit order.
    pub fn loss_and_grads(&self, image: &Tensor, target: &Tensor) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, true);
        let out = self.forward_bound(&mut tape, &params, image, false)?;
        let t = tape.constant(target.clone());
        let loss = l1_loss(&mut tape, out.depth, t)?;
        tape.backward(loss)?;
        let mut grads = Vec::new();
        params.visit(&mut |_, v| {
            grads.push(tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).len()]));
        });
        Ok((tape.value(loss).values()[0], grads))
    }
}

/// Collapses a parameter name to its kind, e.g.
/// `layers.2.attention.heads.1.sigma` -> `attention.sigma`.
pub fn param_group(name: &str) -> String {
    name.split('.')
        .filter(|part| part.parse::<usize>().is_err() && *part != "layers" && *part != "heads")
        .collect::<Vec<_>>()
        .join(".")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::numerics::NumericsError;
    use rand::Rng;

    fn small_config(mechanism: Mechanism) -> ModelConfig {
        ModelConfig {
            image_h: 8,
            image_w: 8,
            channels: 1,
            patch_size: 4,
            d_model: 8,
            num_layers: 2,
            attention: AttentionConfig::new(8, 2, mechanism).unwrap(),
            mlp_hidden: 16,
            head: HeadKind::NearestUpsampleLinear,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn embed(model: &Model, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, false);
        let img = tape.constant(image.clone());
        let t = patch_embed(&mut tape, img, &params, &model.config)?;
        Ok(tape.value(t).clone())
    }

    #[test]
    fn single_patch_gives_one_token() {
        let mut cfg = small_config(Mechanism::Svda);
        cfg.image_h = 4;
        cfg.image_w = 4;
        let model = Model::init(cfg, 0).unwrap();
        let img = Tensor::ones(&[1, 4, 4]);
        assert_eq!(embed(&model, &img).unwrap().shape(), &[1, 8]);
    }

    #[test]
    fn patch_order_is_row_major() {
        let cfg = small_config(Mechanism::Svda);
        let idx = patch_indices(&cfg);
        // first pixel of each patch: (0,0), (0,4), (4,0), (4,4)
        let firsts: Vec<usize> = (0..4).map(|t| idx[t * 16]).collect();
        assert_eq!(firsts, vec![0, 4, 32, 36]);

        let mut model = Model::init(cfg, 1).unwrap();
        model.params.pos_embed = Tensor::zeros(&[4, 8]);
        // patch_proj column 0 reads the top-left pixel of the patch
        let mut proj = Tensor::zeros(&[16, 8]);
        proj.values_mut()[0] = 1.0;
        model.params.patch_proj = proj;
        let mut img = Tensor::zeros(&[1, 8, 8]);
        for (t, &(y, x)) in [(0, 0), (0, 4), (4, 0), (4, 4)].iter().enumerate() {
            img.values_mut()[y * 8 + x] = (t + 1) as f64;
        }
        let tokens = embed(&model, &img).unwrap();
        let col0: Vec<f64> = (0..4).map(|t| tokens.at(t, 0)).collect();
        assert_eq!(col0, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_image_zero_pos_gives_zero_tokens() {
        let mut model = Model::init(small_config(Mechanism::Svda), 2).unwrap();
        model.params.pos_embed = Tensor::zeros(&[4, 8]);
        let tokens = embed(&model, &Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(tokens.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let mut cfg = small_config(Mechanism::Svda);
        cfg.image_w = 10;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let model = Model::init(small_config(Mechanism::Svda), 0).unwrap();
        let err = embed(&model, &Tensor::zeros(&[1, 8, 10])).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn encoder_with_no_layers_is_identity() {
        let mut cfg = small_config(Mechanism::Svda);
        cfg.num_layers = 0;
        let model = Model::init(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[4, 8], &mut rng, -1.0, 1.0);
        let mut tape = Tape::new();
        let params = model.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (y, recs) = encoder_forward(&mut tape, xv, &params, Mechanism::Svda, true).unwrap();
        assert_eq!(tape.value(y), &x);
        assert!(recs.is_empty());
    }

    #[test]
    fn capture_yields_one_record_per_head() {
        let mut cfg = small_config(Mechanism::Svda);
        cfg.num_layers = 1;
        let model = Model::init(cfg, 4).unwrap();
        let (_, _, recs) = model.predict_with_records(&Tensor::filled(&[1, 8, 8], 0.3)).unwrap();
        assert_eq!(recs.len(), 2);
        let model = Model::init(small_config(Mechanism::Baseline), 4).unwrap();
        let (_, _, recs) = model.predict_with_records(&Tensor::filled(&[1, 8, 8], 0.3)).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| r.sigma_snapshot.is_none()));
    }

    #[test]
    fn forward_is_finite_and_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mech in [Mechanism::Svda, Mechanism::Baseline] {
            let model = Model::init(ModelConfig::toy_default(mech), 5).unwrap();
            let img = random(&[1, 64, 64], &mut rng, 0.0, 1.0);
            let depth = model.predict(&img).unwrap();
            assert_eq!(depth.shape(), &[64, 64]);
            assert!(depth.values().iter().all(|&v| v.is_finite() && v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_head_weights_predict_one_half() {
        let mut model = Model::init(small_config(Mechanism::Svda), 6).unwrap();
        model.params.head_w = Tensor::zeros(&[8, 16]);
        let depth = model.predict(&Tensor::filled(&[1, 8, 8], 0.7)).unwrap();
        assert_eq!(depth.shape(), &[8, 8]);
        assert!(depth.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let cfg = small_config(Mechanism::Svda);
        let model = Model::init(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tokens = random(&[4, 8], &mut rng, -1.0, 1.0);
        let target = random(&[8, 8], &mut rng, 0.1, 0.9);
        let inputs = vec![model.params.head_w.clone(), model.params.head_b.clone()];
        let err = check_gradient(&inputs, 1e-5, |tape, v| {
            let mut params = model.params.map(&mut |t| tape.constant(t.clone()));
            params.head_w = v[0];
            params.head_b = v[1];
            let t = tape.constant(tokens.clone());
            let depth = depth_head(tape, t, &params, &cfg).map_err(|_| NumericsError::NonFinite { op: "depth_head" })?;
            let g = tape.constant(target.clone());
            let diff = tape.sub(depth, g)?;
            let abs = tape.abs(diff)?;
            tape.mean(abs)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        for mech in [Mechanism::Svda, Mechanism::Baseline] {
            let model = Model::init(small_config(mech), 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let img = random(&[1, 8, 8], &mut rng, 0.0, 1.0);
            let target = random(&[8, 8], &mut rng, 0.05, 0.95);
            let inputs: Vec<Tensor> = model.params.named().into_iter().map(|(_, t)| t.clone()).collect();
            let err = check_gradient(&inputs, 1e-5, |tape, vars| {
                let mut it = vars.iter().copied();
                let params = model.params.map(&mut |_| it.next().unwrap());
                let out = model
                    .forward_bound(tape, &params, &img, false)
                    .map_err(|_| NumericsError::NonFinite { op: "forward" })?;
                let t = tape.constant(target.clone());
                l1_loss(tape, out.depth, t).map_err(|_| NumericsError::NonFinite { op: "loss" })
            })
            .unwrap();
            assert!(err < 1e-4, "{mech}: {err}");
        }
    }

    #[test]
    fn closed_form_param_count_matches_instantiation() {
        for mech in [Mechanism::Svda, Mechanism::Baseline] {
            for cfg in [small_config(mech), ModelConfig::toy_default(mech)] {
                let model = Model::init(cfg.clone(), 0).unwrap();
                assert_eq!(model.param_count(), cfg.param_count());
            }
        }
        let svda = ModelConfig::toy_default(Mechanism::Svda);
        let base = svda.with_mechanism(Mechanism::Baseline);
        assert_eq!(svda.param_count() - base.param_count(), 4 * 4 * 16);
    }

    #[test]
    fn mechanisms_share_initial_weights() {
        let svda = Model::init(small_config(Mechanism::Svda), 9).unwrap();
        let base = Model::init(small_config(Mechanism::Baseline), 9).unwrap();
        assert_eq!(svda.params.patch_proj, base.params.patch_proj);
        assert_eq!(svda.params.layers[1].attention.heads[1].w_k, base.params.layers[1].attention.heads[1].w_k);
        assert_eq!(svda.params.head_w, base.params.head_w);
    }

    #[test]
    fn param_group_names() {
        assert_eq!(param_group("layers.2.attention.heads.1.sigma"), "attention.sigma");
        assert_eq!(param_group("layers.0.mlp_w1"), "mlp_w1");
        assert_eq!(param_group("head_b"), "head_b");
    }
}
