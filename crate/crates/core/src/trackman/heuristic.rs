//! Hand-crafted association and scoring rules used as ablation baselines.

use crate::assocgraph::HeuristicConfig;

/// Mean of the matched detection confidences; 0 for none.
pub fn score_tracks_average(confidences: &[f64]) -> f64 {
    if confidences.is_empty() {
        return 0.0;
    }
    confidences.iter().sum::<f64>() / confidences.len() as f64
}

/// Most frequent class; ties go to the lower class index.
pub fn majority_class(classes: &[usize]) -> Option<usize> {
    let max = *classes.iter().max()?;
    let mut counts = vec![0usize; max + 1];
    for &c in classes {
        counts[c] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Some(best)
}

/// Distribution over `C + 1` classes with the average confidence on the
/// majority class and the remainder on background.
pub fn heuristic_distribution(confidences: &[f64], classes: &[usize], num_classes: usize) -> Vec<f64> {
    let mut dist = vec![0.0; num_classes + 1];
    match majority_class(classes) {
        Some(c) if c < num_classes => {
            let conf = score_tracks_average(confidences).clamp(0.0, 1.0);
            dist[c] = conf;
            dist[num_classes] = 1.0 - conf;
        }
        _ => dist[num_classes] = 1.0,
    }
    dist
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The four cues of one track/detection pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCues {
    pub appearance_cosine: f64,
    pub iou: f64,
    pub same_class: bool,
    pub confidence: f64,
}

pub fn association_score(cues: &PairCues, weights: &[f64; 4]) -> f64 {
    weights[0] * cues.appearance_cosine
        + weights[1] * cues.iou
        + weights[2] * if cues.same_class { 1.0 } else { 0.0 }
        + weights[3] * cues.confidence
}

/// Greedy one-to-one assignment by descending score over `scores[m][n]`;
/// pairs below `match_threshold · Σw` are never matched. Equal scores go to
/// the lower track, then the lower detection.
pub fn association_linear(scores: &[Vec<f64>], cfg: &HeuristicConfig) -> Vec<Option<usize>> {
    let floor = cfg.match_threshold * cfg.weights.iter().sum::<f64>();
    let mut pairs: Vec<(usize, usize, f64)> = scores
        .iter()
        .enumerate()
        .flat_map(|(m, row)| row.iter().enumerate().map(move |(n, &s)| (m, n, s)))
        .filter(|p| p.2 >= floor)
        .collect();
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut track_match = vec![None; scores.len()];
    let mut det_taken = vec![false; scores.iter().map(Vec::len).max().unwrap_or(0)];
    for (m, n, _) in pairs {
        if track_match[m].is_none() && !det_taken[n] {
            track_match[m] = Some(n);
            det_taken[n] = true;
        }
    }
    track_match
}
