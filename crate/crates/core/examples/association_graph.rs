//! Builds a padded track/detection graph by hand and runs an untrained
//! network over it; padding slots do not change the answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackgraph::assocgraph::{
    gnn_forward, init_probabilities, match_probabilities, GnnParams, GraphBatch, ModelConfig, EDGE_FEATURES,
};
use trackgraph::numcore::ParamStore;

fn fill(batch: &mut GraphBatch, cfg: &ModelConfig, tracks: &[usize], dets: &[usize], seed: u64) -> trackgraph::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    for &s in tracks {
        batch.set_track(s, &row(cfg.d))?;
    }
    for &n in dets {
        batch.set_detection(n, &row(cfg.det_in()))?;
    }
    for s in std::iter::once(0).chain(tracks.iter().copied()) {
        for &n in dets {
            batch.set_edge(s, n, &row(EDGE_FEATURES))?;
        }
    }
    Ok(())
}

fn main() -> trackgraph::Result<()> {
    let cfg = ModelConfig { d: 16, ..ModelConfig::default() };
    let mut store = ParamStore::new();
    let params = GnnParams::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    println!("{} parameter tensors, {} scalars", store.len(), store.num_scalars());

    let mut dense = GraphBatch::new(cfg.d, cfg.det_in(), EDGE_FEATURES);
    fill(&mut dense, &cfg, &[1, 2, 3], &[0, 1, 2, 3], 5)?;
    let mut sparse = GraphBatch::new(cfg.d, cfg.det_in(), EDGE_FEATURES);
    fill(&mut sparse, &cfg, &[4, 11, 20], &[2, 7, 9, 15], 5)?;

    let dense = gnn_forward(&dense, &params, &store)?;
    let sparse = gnn_forward(&sparse, &params, &store)?;
    let a = match_probabilities(&dense, &params, &store)?;
    let b = match_probabilities(&sparse, &params, &store)?;
    println!("match probabilities (track x detection):");
    for (i, (sa, sb)) in [(1, 4), (2, 11), (3, 20)].into_iter().enumerate() {
        let ra: Vec<String> = [0, 1, 2, 3].iter().map(|&n| format!("{:.4}", a.data()[(sa - 1) * 16 + n])).collect();
        let same = [0, 1, 2, 3]
            .iter()
            .zip([2, 7, 9, 15])
            .all(|(&n, m)| a.data()[(sa - 1) * 16 + n].to_bits() == b.data()[(sb - 1) * 16 + m].to_bits());
        println!("  track {i}: {}  (identical in padded layout: {same})", ra.join(" "));
    }
    let init = init_probabilities(&dense, &params, &store)?;
    println!("init probabilities: {:?}", &init[..4].iter().map(|p| (p * 1e4).round() / 1e4).collect::<Vec<_>>());
    Ok(())
}
