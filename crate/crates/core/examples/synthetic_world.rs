//! Samples one crossing-suite sequence, prints what happens in it and writes
//! the detections and ground truth as JSON Lines.
//!
//! cargo run --example synthetic_world -- [seed] [out_dir]

use trackgraph::synthworld::{save_detections_jsonl, save_gt_jsonl, Provenance, SuiteConfig};

fn main() -> trackgraph::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let out = args.next().map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);

    let suite = SuiteConfig::crossing_suite();
    let seq = suite.sample(seed)?;
    println!("seed {seed}: {:?} scenario, {} objects, grid {}", seq.scenario, seq.gt.objects.len(), seq.gt.grid);
    for obj in &seq.gt.objects {
        let span: String = (0..seq.gt.frames).map(|t| if obj.present(t) { '#' } else { '.' }).collect();
        println!("  object {} class {} {span}", obj.id, obj.class);
    }
    for (t, frame) in seq.detections.frames.iter().enumerate() {
        let fp = frame.iter().filter(|d| d.source == Provenance::FalsePositive).count();
        println!("  frame {t}: {} detections, {fp} false positives", frame.len());
    }

    let dets = out.join(format!("world_{seed}.dets.jsonl"));
    let gt = out.join(format!("world_{seed}.gt.jsonl"));
    save_detections_jsonl(&seq.detections, &dets)?;
    save_gt_jsonl(&seq.gt, &gt)?;
    println!("wrote {} and {}", dets.display(), gt.display());
    Ok(())
}
