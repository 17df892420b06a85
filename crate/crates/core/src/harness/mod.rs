//! Training, validation, evaluation and mechanism comparison.

mod metrics;
mod optim;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{compute_metrics, DepthMetrics, DELTA1_THRESHOLD, PRED_FLOOR};
pub use optim::{Optimizer, OptimizerKind};

use crate::attention::{AttentionRecord, Mechanism};
use crate::datagen::Scene;
use crate::error::{Error, Result};
use crate::indicators::{
    collect_epoch, perturbation_robustness_many, record_indicators, BoxStats, IndicatorName, IndicatorSample,
    RobustnessSpec, DEFAULT_DRAWS, DEFAULT_NOISE_STD, DEFAULT_SPARSITY_EPS,
};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::numerics::{NumericsError, Tensor};
use crate::init::mix_seed;

/// Stream tags so shuffling and robustness noise never share RNG streams.
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const ROBUSTNESS_STREAM: u64 = 0x524f_4255;

fn default_diagnostic_batch() -> usize {
    8
}
fn default_sparsity_eps() -> f64 {
    DEFAULT_SPARSITY_EPS
}
fn default_noise_std() -> f64 {
    DEFAULT_NOISE_STD
}
fn default_draws() -> usize {
    DEFAULT_DRAWS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default = "default_diagnostic_batch")]
    pub diagnostic_batch_size: usize,
    #[serde(default = "default_sparsity_eps")]
    pub sparsity_eps: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_draws")]
    pub draws: usize,
}

impl TrainConfig {
    pub fn toy_default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            seed: 7,
            diagnostic_batch_size: default_diagnostic_batch(),
            sparsity_eps: DEFAULT_SPARSITY_EPS,
            noise_std: DEFAULT_NOISE_STD,
            draws: DEFAULT_DRAWS,
        }
    }

    /// A zero learning rate is accepted: it freezes the model, which is useful
    /// for checking the loop itself.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        if !(self.sparsity_eps >= 0.0) {
            return bad("sparsity_eps must be non-negative");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if self.draws == 0 {
            return bad("draws must be at least 1");
        }
        Ok(())
    }

    pub fn diagnostics(&self) -> DiagnosticSettings {
        DiagnosticSettings {
            sparsity_eps: self.sparsity_eps,
            noise_std: self.noise_std,
            draws: self.draws,
            seed: self.seed,
        }
    }
}

/// Knobs for indicator extraction on a diagnostic batch.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticSettings {
    pub sparsity_eps: f64,
    pub noise_std: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for DiagnosticSettings {
    fn default() -> Self {
        Self {
            sparsity_eps: DEFAULT_SPARSITY_EPS,
            noise_std: DEFAULT_NOISE_STD,
            draws: DEFAULT_DRAWS,
            seed: 0,
        }
    }
}

impl DiagnosticSettings {
    /// Robustness spec for the `index`-th diagnostic image; fixed across epochs.
    pub fn robustness_spec(&self, index: usize) -> RobustnessSpec {
        RobustnessSpec {
            noise_std: self.noise_std,
            draws: self.draws,
            seed: mix_seed(self.seed ^ ROBUSTNESS_STREAM, index as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: DepthMetrics,
    pub indicators: Vec<IndicatorSample>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot from the epoch with the lowest validation abs_rel.
    pub best: Checkpoint,
    pub last: Model,
    pub logs: Vec<EpochLog>,
}

/// Anything that maps an image to a depth map.
pub trait DepthPredictor {
    fn predict_depth(&self, image: &Tensor) -> Result<Tensor>;
}

impl DepthPredictor for Model {
    fn predict_depth(&self, image: &Tensor) -> Result<Tensor> {
        self.predict(image)
    }
}

/// Per-image metrics averaged over the dataset.
pub fn evaluate(predictor: &impl DepthPredictor, scenes: &[Scene]) -> Result<DepthMetrics> {
    let per_image = scenes
        .iter()
        .map(|s| compute_metrics(&predictor.predict_depth(&s.image)?, &s.depth))
        .collect::<Result<Vec<_>>>()?;
    DepthMetrics::mean(&per_image).ok_or_else(|| Error::EmptyDataset("evaluation set has no scenes".into()))
}

/// Attention records and robustness scores for one diagnostic image.
#[derive(Clone, Debug)]
pub struct ImageDiagnostics {
    pub records: Vec<AttentionRecord>,
    pub robustness: BTreeMap<(usize, usize), f64>,
}

/// Captures every head on `image` and perturbs the encoder input tokens
/// (after patch embedding) to score robustness.
pub fn diagnose_image(model: &Model, image: &Tensor, spec: &RobustnessSpec) -> Result<ImageDiagnostics> {
    let (_, tokens, records) = model.predict_with_records(image)?;
    let scores = perturbation_robustness_many(|t| model.attention_from_tokens(t), &tokens, spec)?;
    let robustness = records
        .iter()
        .zip(scores)
        .map(|(r, s)| ((r.layer_index, r.head_index), s))
        .collect();
    Ok(ImageDiagnostics { records, robustness })
}

/// Diagnostics for each of `scenes`, with robustness seeded per image.
pub fn diagnose_batch(model: &Model, scenes: &[Scene], settings: &DiagnosticSettings) -> Result<Vec<ImageDiagnostics>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| diagnose_image(model, &s.image, &settings.robustness_spec(i)))
        .collect()
}

/// Indicator samples for one epoch, averaging over the diagnostic images.
pub fn epoch_indicators(diags: &[ImageDiagnostics], epoch: usize, sparsity_eps: f64) -> Vec<IndicatorSample> {
    let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for d in diags {
        for (&key, &v) in &d.robustness {
            *sums.entry(key).or_insert(0.0) += v;
        }
    }
    let n = diags.len().max(1) as f64;
    let robustness = sums.into_iter().map(|(k, v)| (k, v / n)).collect();
    let records: Vec<AttentionRecord> = diags.iter().flat_map(|d| d.records.iter().cloned()).collect();
    collect_epoch(&records, epoch, sparsity_eps, &robustness)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerwiseRow {
    pub layer: usize,
    pub head: usize,
    pub name: IndicatorName,
    pub stats: BoxStats,
}

/// Box-plot summary of each indicator over the diagnostic images, ordered
/// by `(layer, head, indicator)`.
pub fn layerwise_summary(diags: &[ImageDiagnostics], sparsity_eps: f64) -> Vec<LayerwiseRow> {
    let mut values: BTreeMap<(usize, usize, IndicatorName), Vec<f64>> = BTreeMap::new();
    for d in diags {
        for rec in &d.records {
            let key = (rec.layer_index, rec.head_index);
            for (name, v) in record_indicators(rec, sparsity_eps) {
                values.entry((key.0, key.1, name)).or_default().push(v);
            }
            if let Some(&r) = d.robustness.get(&key) {
                values.entry((key.0, key.1, IndicatorName::Robustness)).or_default().push(r);
            }
        }
    }
    values
        .into_iter()
        .map(|((layer, head, name), v)| LayerwiseRow {
            layer,
            head,
            name,
            stats: BoxStats::from_values(&v),
        })
        .collect()
}

fn mean_loss(model: &Model, scenes: &[Scene]) -> Result<(f64, DepthMetrics)> {
    let mut total = 0.0;
    let mut per_image = Vec::with_capacity(scenes.len());
    for s in scenes {
        let pred = model.predict(&s.image)?;
        let l1 = pred
            .values()
            .iter()
            .zip(s.depth.values())
            .map(|(p, g)| (p - g).abs())
            .sum::<f64>()
            / pred.len() as f64;
        total += l1;
        per_image.push(compute_metrics(&pred, &s.depth)?);
    }
    let metrics = DepthMetrics::mean(&per_image).ok_or_else(|| Error::EmptyDataset("validation set".into()))?;
    Ok((total / scenes.len() as f64, metrics))
}

fn check_scenes(model: &Model, scenes: &[Scene], what: &str) -> Result<()> {
    let want = (model.config.image_h, model.config.image_w);
    for (i, s) in scenes.iter().enumerate() {
        if s.dims() != want || s.image.shape() != [model.config.channels, want.0, want.1] {
            return Err(Error::ShapeMismatch(format!(
                "{what} scene {i} has image {:?}, model expects [{}, {}, {}]",
                s.image.shape(),
                model.config.channels,
                want.0,
                want.1
            )));
        }
    }
    Ok(())
}

/// Trains `model` in place on `train_set`, validating on `val_set` after
/// every epoch. Epochs are numbered from 1.
pub fn train(mut model: Model, train_set: &[Scene], val_set: &[Scene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set has no scenes".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("validation set has no scenes".into()));
    }
    check_scenes(&model, train_set, "training")?;
    check_scenes(&model, val_set, "validation")?;

    let diag_set = &val_set[..cfg.diagnostic_batch_size.min(val_set.len())];
    let capture = model.config.attention.capture_diagnostics;
    let diagnostics = cfg.diagnostics();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let non_finite = || Error::NonFiniteLoss { epoch, batch };
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for &i in chunk {
                let s = &train_set[i];
                let (loss, grads) = match model.loss_and_grads(&s.image, &s.depth) {
                    Ok(v) => v,
                    Err(Error::Numerics(NumericsError::NonFinite { .. })) => return Err(non_finite()),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() {
                    return Err(non_finite());
                }
                epoch_loss += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (dst, src) in a.iter_mut().zip(&grads) {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("chunks are non-empty");
            let scale = 1.0 / chunk.len() as f64;
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            optimizer.step(&mut model.params, &grads);
        }
        let train_loss = epoch_loss / train_set.len() as f64;

        let (val_loss, val_metrics) = mean_loss(&model, val_set)?;
        let indicators = if capture && !diag_set.is_empty() {
            epoch_indicators(&diagnose_batch(&model, diag_set, &diagnostics)?, epoch, cfg.sparsity_eps)
        } else {
            Vec::new()
        };

        if best.as_ref().map_or(true, |(score, _)| val_metrics.abs_rel < *score) {
            best = Some((
                val_metrics.abs_rel,
                Checkpoint {
                    model: model.clone(),
                    epoch: Some(epoch),
                },
            ));
        }
        logs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_metrics,
            indicators,
        });
    }

    Ok(TrainOutcome {
        best: best.expect("at least one epoch").1,
        last: model,
        logs,
    })
}

/// First-window versus last-window mean of one indicator for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendRow {
    pub mechanism: Mechanism,
    pub indicator: IndicatorName,
    pub first_mean: f64,
    pub last_mean: f64,
    pub delta: f64,
}

pub const TREND_WINDOW: usize = 10;

/// Per-epoch mean of each indicator over all `(layer, head)` samples.
pub fn indicator_curves(logs: &[EpochLog]) -> BTreeMap<IndicatorName, Vec<f64>> {
    let mut curves: BTreeMap<IndicatorName, Vec<f64>> = BTreeMap::new();
    for log in logs {
        let mut sums: BTreeMap<IndicatorName, (f64, usize)> = BTreeMap::new();
        for s in &log.indicators {
            let e = sums.entry(s.name).or_insert((0.0, 0));
            e.0 += s.value;
            e.1 += 1;
        }
        for (name, (total, n)) in sums {
            curves.entry(name).or_default().push(total / n as f64);
        }
    }
    curves
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trend rows in [`IndicatorName::ALL`] order; the window shrinks to the run
/// length when fewer than [`TREND_WINDOW`] epochs exist.
pub fn trend_summary(mechanism: Mechanism, logs: &[EpochLog]) -> Vec<TrendRow> {
    let curves = indicator_curves(logs);
    IndicatorName::ALL
        .iter()
        .filter_map(|name| {
            let curve = curves.get(name)?;
            let w = TREND_WINDOW.min(curve.len());
            let first_mean = mean(&curve[..w]);
            let last_mean = mean(&curve[curve.len() - w..]);
            Some(TrendRow {
                mechanism,
                indicator: *name,
                first_mean,
                last_mean,
                delta: last_mean - first_mean,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MechanismRun {
    pub mechanism: Mechanism,
    pub param_count: usize,
    pub outcome: TrainOutcome,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub runs: Vec<MechanismRun>,
    pub trends: Vec<TrendRow>,
}

impl Comparison {
    /// One `(mechanism, log)` row per mechanism and epoch.
    pub fn paired_rows(&self) -> Vec<(Mechanism, &EpochLog)> {
        self.runs
            .iter()
            .flat_map(|r| r.outcome.logs.iter().map(move |l| (r.mechanism, l)))
            .collect()
    }

    pub fn run(&self, mechanism: Mechanism) -> Option<&MechanismRun> {
        self.runs.iter().find(|r| r.mechanism == mechanism)
    }
}

/// Trains each mechanism from the same initial seed on the same data.
pub fn compare(
    config: &ModelConfig,
    mechanisms: &[Mechanism],
    train_set: &[Scene],
    val_set: &[Scene],
    cfg: &TrainConfig,
) -> Result<Comparison> {
    let mut runs = Vec::with_capacity(mechanisms.len());
    let mut trends = Vec::new();
    for &mechanism in mechanisms {
        let model = Model::init(config.with_mechanism(mechanism), cfg.seed)?;
        let param_count = model.param_count();
        let outcome = train(model, train_set, val_set, cfg)?;
        trends.extend(trend_summary(mechanism, &outcome.logs));
        runs.push(MechanismRun {
            mechanism,
            param_count,
            outcome,
        });
    }
    Ok(Comparison { runs, trends })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::datagen::{generate_range, DatasetSpec};

    fn small_config(mech: Mechanism, layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            image_h: 16,
            image_w: 16,
            channels: 1,
            patch_size: 4,
            d_model: 8,
            num_layers: layers,
            attention: AttentionConfig::new(8, heads, mech).unwrap(),
            mlp_hidden: 16,
            head: Default::default(),
        }
    }

    fn data(n_train: usize, n_val: usize) -> (Vec<Scene>, Vec<Scene>) {
        let spec = DatasetSpec {
            count: n_train,
            val_count: n_val,
            height: 16,
            width: 16,
            ..DatasetSpec::toy_default()
        };
        (
            generate_range(&spec, spec.train_indices()).unwrap(),
            generate_range(&spec, spec.val_indices()).unwrap(),
        )
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 3e-3,
            diagnostic_batch_size: 2,
            draws: 2,
            ..TrainConfig::toy_default()
        }
    }

    struct Oracle<'a>(&'a [Scene]);

    impl DepthPredictor for Oracle<'_> {
        fn predict_depth(&self, image: &Tensor) -> Result<Tensor> {
            Ok(self.0.iter().find(|s| &s.image == image).unwrap().depth.clone())
        }
    }

    #[test]
    fn oracle_predictor_has_zero_error() {
        let (train_set, _) = data(3, 0);
        let m = evaluate(&Oracle(&train_set), &train_set).unwrap();
        assert_eq!(
            m,
            DepthMetrics {
                delta1: 1.0,
                ..Default::default()
            }
        );
    }

    #[test]
    fn evaluate_is_mean_of_per_image_metrics() {
        let (train_set, _) = data(4, 0);
        let model = Model::init(small_config(Mechanism::Svda, 1, 2), 5).unwrap();
        let m = evaluate(&model, &train_set).unwrap();
        let per: Vec<DepthMetrics> = train_set
            .iter()
            .map(|s| compute_metrics(&model.predict(&s.image).unwrap(), &s.depth).unwrap())
            .collect();
        let n = per.len() as f64;
        assert!((m.abs_rel - per.iter().map(|p| p.abs_rel).sum::<f64>() / n).abs() < 1e-15);
        assert!((m.delta1 - per.iter().map(|p| p.delta1).sum::<f64>() / n).abs() < 1e-15);
    }

    #[test]
    fn evaluate_empty_is_error() {
        let model = Model::init(small_config(Mechanism::Svda, 1, 2), 5).unwrap();
        assert!(matches!(evaluate(&model, &[]), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn single_epoch_selects_epoch_one() {
        let (tr, va) = data(4, 2);
        let model = Model::init(small_config(Mechanism::Svda, 1, 2), 5).unwrap();
        let out = train(model, &tr, &va, &quick_cfg(1)).unwrap();
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.best.epoch, Some(1));
        assert_eq!(out.best.model, out.last);
    }

    #[test]
    fn zero_learning_rate_freezes_model() {
        let (tr, va) = data(4, 2);
        let model = Model::init(small_config(Mechanism::Svda, 1, 2), 5).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..quick_cfg(3)
        };
        let out = train(model.clone(), &tr, &va, &cfg).unwrap();
        assert_eq!(out.last.params, model.params);
        let first = out.logs[0].train_loss;
        for log in &out.logs {
            assert!((log.train_loss - first).abs() < 1e-12);
            assert_eq!(log.val_loss, out.logs[0].val_loss);
        }
    }

    #[test]
    fn training_is_deterministic_and_selects_minimum() {
        let (tr, va) = data(8, 3);
        let run = || {
            let model = Model::init(small_config(Mechanism::Svda, 2, 2), 9).unwrap();
            train(model, &tr, &va, &quick_cfg(4)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.logs, b.logs);
        let best_epoch = a.best.epoch.unwrap();
        let best_score = a.logs[best_epoch - 1].val_metrics.abs_rel;
        for log in &a.logs {
            assert!(best_score <= log.val_metrics.abs_rel);
            if log.val_metrics.abs_rel == best_score {
                assert!(log.epoch >= best_epoch);
            }
            assert!(log.train_loss.is_finite() && log.val_loss.is_finite());
        }
        // 2 layers x 2 heads x 6 indicators
        assert!(a.logs.iter().all(|l| l.indicators.len() == 24));
    }

    #[test]
    fn baseline_logs_omit_spectral_indicators() {
        let (tr, va) = data(4, 2);
        let model = Model::init(small_config(Mechanism::Baseline, 1, 2), 5).unwrap();
        let out = train(model, &tr, &va, &quick_cfg(1)).unwrap();
        assert_eq!(out.logs[0].indicators.len(), 2 * 3);
        assert!(out.logs[0].indicators.iter().all(|s| !s.name.requires_sigma()));
    }

    #[test]
    fn capture_off_skips_indicators() {
        let (tr, va) = data(4, 2);
        let mut cfg = small_config(Mechanism::Svda, 1, 2);
        cfg.attention.capture_diagnostics = false;
        let out = train(Model::init(cfg, 5).unwrap(), &tr, &va, &quick_cfg(1)).unwrap();
        assert!(out.logs[0].indicators.is_empty());
    }

    #[test]
    fn non_finite_loss_names_epoch_and_batch() {
        let (tr, va) = data(4, 2);
        let mut model = Model::init(small_config(Mechanism::Svda, 1, 2), 5).unwrap();
        model.params.head_b.values_mut()[0] = f64::NAN;
        let err = train(model, &tr, &va, &quick_cfg(2)).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1, batch: 0 }), "{err}");
    }

    #[test]
    fn config_validation() {
        let (tr, va) = data(2, 1);
        let model = Model::init(small_config(Mechanism::Svda, 1, 2), 5).unwrap();
        for cfg in [
            TrainConfig { epochs: 0, ..quick_cfg(1) },
            TrainConfig { batch_size: 0, ..quick_cfg(1) },
            TrainConfig { learning_rate: -1.0, ..quick_cfg(1) },
            TrainConfig { draws: 0, ..quick_cfg(1) },
        ] {
            assert!(matches!(train(model.clone(), &tr, &va, &cfg), Err(Error::InvalidConfig(_))));
        }
        assert!(matches!(train(model.clone(), &tr, &[], &quick_cfg(1)), Err(Error::EmptyDataset(_))));
        let wrong = Model::init(
            ModelConfig {
                image_h: 8,
                image_w: 8,
                ..small_config(Mechanism::Svda, 1, 2)
            },
            1,
        )
        .unwrap();
        assert!(matches!(train(wrong, &tr, &va, &quick_cfg(1)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn comparison_pairs_runs() {
        let (tr, va) = data(4, 2);
        let cfg = quick_cfg(3);
        let model_cfg = small_config(Mechanism::Svda, 2, 2);
        let cmp = compare(&model_cfg, &[Mechanism::Svda, Mechanism::Baseline], &tr, &va, &cfg).unwrap();
        assert_eq!(cmp.paired_rows().len(), 2 * 3);
        let svda = cmp.run(Mechanism::Svda).unwrap();
        let base = cmp.run(Mechanism::Baseline).unwrap();
        assert_eq!(svda.param_count - base.param_count, 2 * 2 * 4);
        for r in &cmp.runs {
            assert!(r.outcome.logs.iter().all(|l| l.train_loss.is_finite() && l.val_loss.is_finite()));
        }
        let svda_rows = cmp.trends.iter().filter(|t| t.mechanism == Mechanism::Svda).count();
        let base_rows: Vec<_> = cmp.trends.iter().filter(|t| t.mechanism == Mechanism::Baseline).collect();
        assert_eq!(svda_rows, 6);
        assert_eq!(base_rows.len(), 3);
        assert!(base_rows.iter().all(|t| !t.indicator.requires_sigma()));
        for t in &cmp.trends {
            assert!((t.delta - (t.last_mean - t.first_mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn trend_window_means() {
        let sample = |epoch, value| IndicatorSample {
            epoch,
            layer: 0,
            head: 0,
            name: IndicatorName::Entropy,
            value,
        };
        let logs: Vec<EpochLog> = (1..=12)
            .map(|e| EpochLog {
                epoch: e,
                train_loss: 0.0,
                val_loss: 0.0,
                val_metrics: DepthMetrics::default(),
                indicators: vec![sample(e, e as f64)],
            })
            .collect();
        let rows = trend_summary(Mechanism::Svda, &logs);
        assert_eq!(rows.len(), 1);
        // epochs 1..=10 average 5.5, epochs 3..=12 average 7.5
        assert_eq!((rows[0].first_mean, rows[0].last_mean, rows[0].delta), (5.5, 7.5, 2.0));
        let short = trend_summary(Mechanism::Svda, &logs[..4]);
        assert_eq!((short[0].first_mean, short[0].last_mean), (2.5, 2.5));
    }

    #[test]
    fn layerwise_quantiles_are_ordered() {
        let (_, va) = data(1, 3);
        let model = Model::init(small_config(Mechanism::Svda, 1, 2), 5).unwrap();
        let diags = diagnose_batch(&model, &va, &quick_cfg(1).diagnostics()).unwrap();
        let rows = layerwise_summary(&diags, DEFAULT_SPARSITY_EPS);
        assert_eq!(rows.len(), 2 * 6);
        for r in &rows {
            assert_eq!(r.layer, 0);
            let s = r.stats;
            assert!(s.min <= s.q25 && s.q25 <= s.median && s.median <= s.q75 && s.q75 <= s.max);
        }
    }
}
