//! Spectral and attention-map interpretability indicators.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::numerics::Tensor;

pub const DEFAULT_SPARSITY_EPS: f64 = 1e-2;
pub const DEFAULT_NOISE_STD: f64 = 0.01;
pub const DEFAULT_DRAWS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorName {
    Entropy,
    EffectiveRank,
    Alignment,
    Selectivity,
    Sparsity,
    Robustness,
}

impl IndicatorName {
    pub const ALL: [IndicatorName; 6] = [
        IndicatorName::Entropy,
        IndicatorName::EffectiveRank,
        IndicatorName::Alignment,
        IndicatorName::Selectivity,
        IndicatorName::Sparsity,
        IndicatorName::Robustness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IndicatorName::Entropy => "entropy",
            IndicatorName::EffectiveRank => "effective_rank",
            IndicatorName::Alignment => "alignment",
            IndicatorName::Selectivity => "selectivity",
            IndicatorName::Sparsity => "sparsity",
            IndicatorName::Robustness => "robustness",
        }
    }

    /// Entropy, rank and sparsity are functions of the spectral vector and are
    /// undefined for heads without one.
    pub fn requires_sigma(self) -> bool {
        matches!(
            self,
            IndicatorName::Entropy | IndicatorName::EffectiveRank | IndicatorName::Sparsity
        )
    }
}

impl std::fmt::Display for IndicatorName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorSample {
    pub epoch: usize,
    pub layer: usize,
    pub head: usize,
    pub name: IndicatorName,
    pub value: f64,
}

/// Shannon entropy (natural log) of `p_i = |sigma_i| / sum_j |sigma_j|`.
/// An all-zero spectrum has entropy 0.
pub fn spectral_entropy(sigma: &Tensor) -> f64 {
    let total: f64 = sigma.values().iter().map(|s| s.abs()).sum();
    if total == 0.0 {
        return 0.0;
    }
    sigma
        .values()
        .iter()
        .map(|s| s.abs() / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

pub fn effective_rank(sigma: &Tensor) -> f64 {
    spectral_entropy(sigma).exp()
}

/// All `n^2` cosines `Q_i . K_j`, row-major in `(i, j)`.
pub fn alignment_pairs(rec: &AttentionRecord) -> Vec<f64> {
    let q = &rec.q_normalized;
    let k = &rec.k_normalized;
    let (n, _) = q.dims2().expect("rank-2 queries");
    let (m, _) = k.dims2().expect("rank-2 keys");
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum());
        }
    }
    out
}

/// Mean cosine over all query/key pairs.
pub fn angular_alignment(rec: &AttentionRecord) -> f64 {
    let pairs = alignment_pairs(rec);
    pairs.iter().sum::<f64>() / pairs.len() as f64
}

/// Per-row `1 - sum_j A_ij^2 / (sum_j A_ij)^2`.
pub fn selectivity_rows(attention: &Tensor) -> Vec<f64> {
    let (n, _) = attention.dims2().expect("rank-2 attention");
    (0..n)
        .map(|i| {
            let row = attention.row(i);
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return 0.0;
            }
            1.0 - row.iter().map(|a| a * a).sum::<f64>() / (s * s)
        })
        .collect()
}

pub fn selectivity(attention: &Tensor) -> f64 {
    let rows = selectivity_rows(attention);
    rows.iter().sum::<f64>() / rows.len() as f64
}

/// Fraction of spectral entries with `|sigma_i| < eps`.
pub fn spectral_sparsity(sigma: &Tensor, eps: f64) -> f64 {
    let small = sigma.values().iter().filter(|s| s.abs() < eps).count();
    small as f64 / sigma.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessSpec {
    pub noise_std: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for RobustnessSpec {
    fn default() -> Self {
        Self {
            noise_std: DEFAULT_NOISE_STD,
            draws: DEFAULT_DRAWS,
            seed: 0,
        }
    }
}

pub fn frobenius_distance(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "attention shapes differ");
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean over draws of `||A(x) - A(x + delta)||_F` for each matrix returned by
/// `slice`, with `delta ~ N(0, noise_std^2)` i.i.d. per entry.
pub fn perturbation_robustness_many<F, E>(mut slice: F, x: &Tensor, spec: &RobustnessSpec) -> Result<Vec<f64>, E>
where
    F: FnMut(&Tensor) -> Result<Vec<Tensor>, E>,
{
    assert!(spec.noise_std >= 0.0 && spec.draws >= 1, "invalid robustness spec {spec:?}");
    let clean = slice(x)?;
    let normal = Normal::new(0.0, spec.noise_std).expect("finite noise_std");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut totals = vec![0.0; clean.len()];
    let mut noisy = x.detached();
    for _ in 0..spec.draws {
        for (dst, &src) in noisy.values_mut().iter_mut().zip(x.values()) {
            *dst = src + normal.sample(&mut rng);
        }
        let perturbed = slice(&noisy)?;
        for ((t, a), b) in totals.iter_mut().zip(&clean).zip(&perturbed) {
            *t += frobenius_distance(a, b);
        }
    }
    Ok(totals.into_iter().map(|t| t / spec.draws as f64).collect())
}

/// Single-matrix form of [`perturbation_robustness_many`].
pub fn perturbation_robustness<F, E>(mut slice: F, x: &Tensor, spec: &RobustnessSpec) -> Result<f64, E>
where
    F: FnMut(&Tensor) -> Result<Tensor, E>,
{
    let values = perturbation_robustness_many(|t| slice(t).map(|a| vec![a]), x, spec)?;
    Ok(values[0])
}

/// Indicators computable from one record alone (everything but robustness).
/// Spectral ones are omitted when the record has no spectral vector.
pub fn record_indicators(rec: &AttentionRecord, sparsity_eps: f64) -> Vec<(IndicatorName, f64)> {
    let mut out = Vec::with_capacity(5);
    if let Some(sigma) = &rec.sigma_snapshot {
        let h = spectral_entropy(sigma);
        out.push((IndicatorName::Entropy, h));
        out.push((IndicatorName::EffectiveRank, h.exp()));
    }
    out.push((IndicatorName::Alignment, angular_alignment(rec)));
    out.push((IndicatorName::Selectivity, selectivity(&rec.attention)));
    if let Some(sigma) = &rec.sigma_snapshot {
        out.push((IndicatorName::Sparsity, spectral_sparsity(sigma, sparsity_eps)));
    }
    out
}

/// Per-epoch indicator samples, one per `(layer, head, indicator)`.
///
/// `recs` may hold several records per `(layer, head)` (one per diagnostic
/// image); their values are averaged. `robustness` carries the perturbation
/// scores already evaluated on the diagnostic batch, keyed by `(layer, head)`.
/// Output is ordered by `(layer, head, indicator)`.
pub fn collect_epoch(
    recs: &[AttentionRecord],
    epoch: usize,
    sparsity_eps: f64,
    robustness: &BTreeMap<(usize, usize), f64>,
) -> Vec<IndicatorSample> {
    let mut sums: BTreeMap<(usize, usize, IndicatorName), (f64, usize)> = BTreeMap::new();
    for rec in recs {
        for (name, value) in record_indicators(rec, sparsity_eps) {
            let e = sums.entry((rec.layer_index, rec.head_index, name)).or_insert((0.0, 0));
            e.0 += value;
            e.1 += 1;
        }
        if let Some(&r) = robustness.get(&(rec.layer_index, rec.head_index)) {
            sums.entry((rec.layer_index, rec.head_index, IndicatorName::Robustness)).or_insert((r, 1));
        }
    }
    sums.into_iter()
        .map(|((layer, head, name), (total, count))| IndicatorSample {
            epoch,
            layer,
            head,
            name,
            value: total / count as f64,
        })
        .collect()
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Five-number summary behind a box plot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxStats {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            min: sorted[0],
            q25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        }
    }
}
