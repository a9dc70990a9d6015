//! Tracks one sequence with the hand-crafted association and scoring cues
//! (no training needed) and prints each track's life: `#` matched, `.`
//! carried without a detection. Masks here come from an untrained head.

use trackgraph::assocgraph::{AssociationMode, ModelConfig, ScoringMode};
use trackgraph::synthworld::SuiteConfig;
use trackgraph::trackman::{track_sequence, Model, Thresholds, TracksFile};

fn main() -> trackgraph::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let suite = SuiteConfig::crossing_suite();
    let seq = suite.sample(seed)?;
    let config = ModelConfig {
        num_classes: suite.world.num_classes,
        appearance_dim: suite.world.appearance_dim,
        grid: suite.world.grid,
        association: AssociationMode::Heuristic,
        scoring: ScoringMode::Heuristic,
        ..ModelConfig::default()
    };
    let model = Model::new(config, 0)?;
    let memory = track_sequence(&model, &seq.detections.frames, &Thresholds::default())?;

    println!("{} ground-truth objects, {} tracks", seq.gt.objects.len(), memory.tracks.len());
    for tr in &memory.tracks {
        let life: String = (0..seq.gt.frames)
            .map(|t| match tr.records.iter().find(|r| r.t == t) {
                None => ' ',
                Some(r) if r.active => '#',
                Some(_) => '.',
            })
            .collect();
        let last = tr.records.last().unwrap();
        let class = (0..last.scores.len()).max_by(|&a, &b| last.scores[a].total_cmp(&last.scores[b]).then(b.cmp(&a)));
        println!("  track {:2} |{life}| class {:?}", tr.id, class.unwrap());
    }
    let file = TracksFile::from_memory(&memory, seq.gt.grid);
    println!("tracks file: {} bytes of JSON", serde_json::to_string(&file).unwrap().len());
    Ok(())
}
