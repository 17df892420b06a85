//! Trains both attention mechanisms on the default toy task and prints the
//! validation curves plus indicator trends.

use std::time::Instant;

use svda_core::attention::Mechanism;
use svda_core::datagen::{generate_range, DatasetSpec};
use svda_core::harness::{compare, TrainConfig};
use svda_core::model::ModelConfig;

fn main() -> svda_core::Result<()> {
    let spec = DatasetSpec::toy_default();
    let train = generate_range(&spec, spec.train_indices())?;
    let val = generate_range(&spec, spec.val_indices())?;
    let cfg = TrainConfig::toy_default();
    let start = Instant::now();
    let cmp = compare(
        &ModelConfig::toy_default(Mechanism::Svda),
        &[Mechanism::Svda, Mechanism::Baseline],
        &train,
        &val,
        &cfg,
    )?;
    for run in &cmp.runs {
        println!("{} (best epoch {:?})", run.mechanism, run.outcome.best.epoch);
        for log in &run.outcome.logs {
            println!(
                "  epoch {:>2}  train {:.5}  val {:.5}  abs_rel {:.5}",
                log.epoch, log.train_loss, log.val_loss, log.val_metrics.abs_rel
            );
        }
    }
    for t in &cmp.trends {
        println!("{} {} {:.6} -> {:.6} ({:+.3e})", t.mechanism, t.indicator, t.first_mean, t.last_mean, t.delta);
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
