use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use svda_core::attention::Mechanism;
use svda_core::datagen::{generate_range, generate_scene, load_manifest, save_pair, write_manifest, Scene};
use svda_core::harness::{
    compare, diagnose_batch, evaluate, layerwise_summary, train, DiagnosticSettings, ImageDiagnostics, TrainOutcome,
};
use svda_core::indicators::{alignment_pairs, quantile};
use svda_core::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::tables::{self, real, write_csv};

pub const CHECKPOINT_FILE: &str = "checkpoint.svda";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const INDICATORS_FILE: &str = "indicators.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAYERWISE_FILE: &str = "layerwise.csv";
pub const ALIGNMENT_FILE: &str = "alignment.csv";
pub const TRENDS_FILE: &str = "trends.csv";
pub const DATA_DIR: &str = "data";
pub const TRAIN_MANIFEST: &str = "train.manifest";
pub const VAL_MANIFEST: &str = "val.manifest";

fn out(stdout: &mut dyn Write, line: String) -> Result<()> {
    writeln!(stdout, "{line}").map_err(|e| CliError::io("<stdout>", e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn output_dir(cfg: &RunConfig, over: Option<&Path>) -> PathBuf {
    over.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf)
}

/// Scalar parameters added by the spectral vectors, against the baseline total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Overhead {
    pub spectral: usize,
    pub baseline_total: usize,
}

impl Overhead {
    pub fn of(config: &ModelConfig) -> Self {
        let svda = config.with_mechanism(Mechanism::Svda).param_count();
        let baseline_total = config.with_mechanism(Mechanism::Baseline).param_count();
        Self {
            spectral: svda - baseline_total,
            baseline_total,
        }
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.spectral as f64 / self.baseline_total as f64
    }

    pub fn describe(&self) -> String {
        format!(
            "spectral parameter overhead: {} of {} baseline parameters ({:.4}%)",
            self.spectral,
            self.baseline_total,
            self.percent()
        )
    }
}

/// Writes every scene of the dataset as tensor pairs plus manifests under
/// `<out>/data`. Returns the data directory.
pub fn cmd_gen(config: &Path, out_dir: Option<&Path>, stdout: &mut dyn Write) -> Result<PathBuf> {
    let cfg = RunConfig::load(config)?;
    let dir = output_dir(&cfg, out_dir).join(DATA_DIR);
    ensure_dir(&dir)?;
    let spec = &cfg.data;
    let write_split = |range: std::ops::Range<usize>, manifest: &str| -> Result<()> {
        let mut pairs = Vec::with_capacity(range.len());
        for i in range {
            let scene = generate_scene(spec, i)?;
            let image = PathBuf::from(format!("scene_{i:05}_image.tnsr"));
            let depth = PathBuf::from(format!("scene_{i:05}_depth.tnsr"));
            save_pair(&scene, &dir.join(&image), &dir.join(&depth))?;
            pairs.push((image, depth));
        }
        write_manifest(&dir.join(manifest), &pairs)?;
        Ok(())
    };
    write_split(spec.train_indices(), TRAIN_MANIFEST)?;
    if spec.val_count > 0 {
        write_split(spec.val_indices(), VAL_MANIFEST)?;
    }
    out(
        stdout,
        format!("wrote {} training and {} validation scenes to {}", spec.count, spec.val_count, dir.display()),
    )?;
    Ok(dir)
}

fn dataset(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    if cfg.data.val_count == 0 {
        return Err(svda_core::Error::EmptyDataset("data.val_count must be positive for training".into()).into());
    }
    Ok((
        generate_range(&cfg.data, cfg.data.train_indices())?,
        generate_range(&cfg.data, cfg.data.val_indices())?,
    ))
}

/// Best checkpoint, per-epoch losses and metrics, and indicator rows.
pub fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    ensure_dir(dir)?;
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &outcome.best.model, outcome.best.epoch)?;
    write_csv(&dir.join(EPOCHS_FILE), &tables::EPOCHS_HEADER, tables::epochs_rows(&outcome.logs))?;
    write_csv(&dir.join(INDICATORS_FILE), &tables::INDICATORS_HEADER, tables::indicator_rows(&outcome.logs))
}

pub fn cmd_train(config: &Path, out_dir: Option<&Path>, stdout: &mut dyn Write) -> Result<TrainOutcome> {
    let cfg = RunConfig::load(config)?;
    let dir = output_dir(&cfg, out_dir);
    let (train_set, val_set) = dataset(&cfg)?;
    let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(model, &train_set, &val_set, &cfg.train)?;
    write_run(&dir, &outcome)?;
    let epoch = outcome.best.epoch.expect("trained checkpoints carry an epoch");
    let best = &outcome.logs[epoch - 1];
    out(
        stdout,
        format!(
            "{}: best epoch {epoch} (val abs_rel {:.6}, val loss {:.6}); artifacts in {}",
            cfg.model.mechanism(),
            best.val_metrics.abs_rel,
            best.val_loss,
            dir.display()
        ),
    )?;
    Ok(outcome)
}

fn load_scenes(manifest: &Path) -> Result<Vec<Scene>> {
    let scenes = load_manifest(manifest)?;
    if scenes.is_empty() {
        return Err(svda_core::Error::EmptyDataset(format!("manifest {} lists no scenes", manifest.display())).into());
    }
    Ok(scenes)
}

fn default_out(checkpoint: &Path, over: Option<&Path>) -> PathBuf {
    over.map(Path::to_path_buf).unwrap_or_else(|| {
        checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

/// One metrics row per checkpoint, written to `metrics.csv` and printed.
pub fn cmd_eval(
    checkpoints: &[PathBuf],
    manifest: &Path,
    out_dir: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<Vec<(Mechanism, svda_core::harness::DepthMetrics)>> {
    let first = checkpoints
        .first()
        .ok_or_else(|| CliError::Usage("eval needs at least one --checkpoint".into()))?;
    let scenes = load_scenes(manifest)?;
    let mut results = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let Checkpoint { model, .. } = load_checkpoint(path)?;
        results.push((model.mechanism(), evaluate(&model, &scenes)?));
    }
    let dir = default_out(first, out_dir);
    ensure_dir(&dir)?;
    let rows: Vec<Vec<String>> = results.iter().map(|(m, r)| tables::metrics_row(*m, r)).collect();
    write_csv(&dir.join(METRICS_FILE), &tables::METRICS_HEADER, rows)?;

    let header: Vec<String> = tables::METRICS_HEADER.iter().map(|h| format!("{h:>12}")).collect();
    out(stdout, header.join(" "))?;
    for (mechanism, m) in &results {
        let cells: Vec<String> = std::iter::once(format!("{:>12}", mechanism.as_str()))
            .chain(m.as_array().iter().map(|v| format!("{v:>12.6}")))
            .collect();
        out(stdout, cells.join(" "))?;
    }
    Ok(results)
}

/// Alignment percentiles per `(layer, head)`, pooling all query/key pairs
/// of the batch.
pub fn alignment_percentiles(diags: &[ImageDiagnostics]) -> Vec<((usize, usize), [f64; 3])> {
    let mut pooled: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for d in diags {
        for rec in &d.records {
            pooled
                .entry((rec.layer_index, rec.head_index))
                .or_default()
                .extend(alignment_pairs(rec));
        }
    }
    pooled
        .into_iter()
        .map(|(key, mut v)| {
            v.sort_by(f64::total_cmp);
            (key, [quantile(&v, 0.05), quantile(&v, 0.5), quantile(&v, 0.95)])
        })
        .collect()
}

/// Box-plot statistics of every indicator over the scenes in `manifest`.
pub fn cmd_diagnose(
    checkpoint: &Path,
    manifest: &Path,
    settings: &DiagnosticSettings,
    out_dir: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<Overhead> {
    let Checkpoint { model, .. } = load_checkpoint(checkpoint)?;
    let scenes = load_scenes(manifest)?;
    let diags = diagnose_batch(&model, &scenes, settings)?;
    let dir = default_out(checkpoint, out_dir);
    ensure_dir(&dir)?;
    let rows = layerwise_summary(&diags, settings.sparsity_eps);
    write_csv(&dir.join(LAYERWISE_FILE), &tables::LAYERWISE_HEADER, tables::layerwise_rows(&rows))?;
    let align: Vec<Vec<String>> = alignment_percentiles(&diags)
        .into_iter()
        .map(|((l, h), q)| vec![l.to_string(), h.to_string(), real(q[0]), real(q[1]), real(q[2])])
        .collect();
    write_csv(&dir.join(ALIGNMENT_FILE), &tables::ALIGNMENT_HEADER, align)?;
    let overhead = Overhead::of(&model.config);
    out(
        stdout,
        format!(
            "{} checkpoint, {} scenes, {} layerwise rows in {}",
            model.mechanism(),
            scenes.len(),
            rows.len(),
            dir.display()
        ),
    )?;
    out(stdout, overhead.describe())?;
    Ok(overhead)
}

/// Trains both mechanisms from one seed; per-mechanism artifacts go to
/// `<out>/<mechanism>/` and the trend summary to `<out>/trends.csv`.
pub fn cmd_compare(
    config: &Path,
    out_dir: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<svda_core::harness::Comparison> {
    let cfg = RunConfig::load(config)?;
    let dir = output_dir(&cfg, out_dir);
    let (train_set, val_set) = dataset(&cfg)?;
    let cmp = compare(
        &cfg.model,
        &[Mechanism::Svda, Mechanism::Baseline],
        &train_set,
        &val_set,
        &cfg.train,
    )?;
    for run in &cmp.runs {
        write_run(&dir.join(run.mechanism.as_str()), &run.outcome)?;
        let last = run.outcome.logs.last().expect("at least one epoch");
        out(
            stdout,
            format!(
                "{:>8}: {} parameters, final val loss {:.6}, best epoch {}",
                run.mechanism.as_str(),
                run.param_count,
                last.val_loss,
                run.outcome.best.epoch.unwrap_or(0)
            ),
        )?;
    }
    write_csv(&dir.join(TRENDS_FILE), &tables::TRENDS_HEADER, tables::trend_rows(&cmp.trends))?;
    for t in &cmp.trends {
        out(
            stdout,
            format!(
                "{:>8} {:<15} {:>14.6e} -> {:>14.6e} ({:+.3e})",
                t.mechanism.as_str(),
                t.indicator.as_str(),
                t.first_mean,
                t.last_mean,
                t.delta
            ),
        )?;
    }
    Ok(cmp)
}
