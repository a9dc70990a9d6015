//! Trains the full model on the crossing suite and saves a checkpoint and
//! loss curve.
//!
//! cargo run --release --example train_crossing -- [iterations] [out_dir]

use std::fs::File;
use std::time::Instant;

use trackgraph::learn::{save_checkpoint, write_loss_csv, Checkpoint, TrainConfig, Trainer};

fn main() -> trackgraph::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = args.next().map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let cfg = TrainConfig {
        iterations,
        lr: 1e-2,
        grad_clip: Some(10.0),
        ..TrainConfig::default()
    };
    let monitor = cfg.held_out_set(8)?;
    let mut trainer = Trainer::new(cfg.clone(), cfg.training_set()?)?;
    let start = Instant::now();
    let every = (iterations / 10).max(1);
    while trainer.iteration() < iterations {
        trainer.run(every.min(iterations - trainer.iteration()))?;
        let l = trainer.evaluate(&monitor)?;
        println!(
            "iteration {:5}  held-out loss {:7.3}  (score {:.3} seg {:.3} match {:.3} init {:.3})  {:.0}s",
            trainer.iteration(),
            l.total,
            l.score,
            l.seg,
            l.matching,
            l.init,
            start.elapsed().as_secs_f64()
        );
    }
    let ckpt = out.join("crossing_checkpoint.json");
    save_checkpoint(&Checkpoint::from_model(&trainer.model, Some(&cfg), trainer.iteration()), &ckpt)?;
    write_loss_csv(&trainer.curve, File::create(out.join("crossing_loss.csv"))?)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}
