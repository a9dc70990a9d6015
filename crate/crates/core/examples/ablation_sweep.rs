//! Trains every named variant on the same small budget and compares them on
//! the same held-out sequences.
//!
//! cargo run --release --example ablation_sweep -- [iterations]

use trackgraph::evalkit::evaluate_model;
use trackgraph::learn::{TrainConfig, Trainer, ABLATION_NAMES};

fn main() -> trackgraph::Result<()> {
    let iterations: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    println!("{:<22} {:>8} {:>8} {:>9} {:>10}", "variant", "mAP", "assoc", "switches", "final loss");
    for name in ABLATION_NAMES {
        let cfg = TrainConfig {
            iterations,
            lr: 1e-2,
            grad_clip: Some(10.0),
            ..TrainConfig::default()
        }
        .with_ablation(name)?;
        let held_out = cfg.held_out_set(16)?;
        let mut trainer = Trainer::new(cfg.clone(), cfg.training_set()?)?;
        trainer.run_to_end()?;
        let r = evaluate_model(&trainer.model, &trainer.thresholds, &held_out)?;
        let loss = trainer.curve.last().map_or(f64::NAN, |p| p.loss.total);
        println!(
            "{name:<22} {:>8.4} {:>8.4} {:>9} {:>10.3}",
            r.map, r.association_accuracy, r.id_switches, loss
        );
    }
    Ok(())
}
