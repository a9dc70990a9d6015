//! Scores a model on held-out crossing-suite sequences and renders the first
//! one as PPM frames. Without a checkpoint (see `train_crossing`) it trains a
//! model for a few hundred iterations first.
//!
//! cargo run --release --example evaluate_tracks -- [checkpoint.json]

use trackgraph::evalkit::{evaluate_model, gt_tracks, predictions_from_tracks, render_frame, save_ppm};
use trackgraph::learn::{load_checkpoint, TrainConfig, Trainer};
use trackgraph::trackman::{track_sequence, Thresholds, TracksFile};

fn main() -> trackgraph::Result<()> {
    let cfg = TrainConfig::default();
    let model = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path)?.into_model()?,
        None => {
            let quick = TrainConfig {
                iterations: 300,
                lr: 1e-2,
                grad_clip: Some(10.0),
                ..cfg.clone()
            };
            let mut trainer = Trainer::new(quick.clone(), quick.training_set()?)?;
            trainer.run_to_end()?;
            trainer.model
        }
    };
    let thresholds = Thresholds::default();
    let held_out = cfg.held_out_set(24)?;
    let report = evaluate_model(&model, &thresholds, &held_out)?;
    print!("{}", report.to_table());

    let seq = &held_out[0];
    let memory = track_sequence(&model, &seq.detections.frames, &thresholds)?;
    let preds = predictions_from_tracks(&TracksFile::from_memory(&memory, seq.gt.grid))?;
    let gts = gt_tracks(&seq.gt);
    let dir = std::env::temp_dir().join("trackgraph_render");
    std::fs::create_dir_all(&dir)?;
    for t in 0..seq.gt.frames {
        save_ppm(&render_frame(&gts, &preds, seq.gt.grid, t, 16), dir.join(format!("frame{t:03}.ppm")))?;
    }
    println!("rendered {} frames into {}", seq.gt.frames, dir.display());
    Ok(())
}
