//! Sequence-level metrics: spatio-temporal mask IoU, video mAP, identity
//! consistency, and the report that bundles them.

mod render;
mod report;

pub use render::{render_frame, save_ppm, Image};
pub use report::{evaluate, ClassAp, EvalItem, EvalReport, ScenarioReport};

use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::Mask;
use crate::synthworld::{GroundTruthSequence, LabeledSequence};
use crate::trackman::{track_sequence, Model, Thresholds, TracksFile};

/// Minimum per-frame mask IoU for a predicted track to cover an object.
pub const COVER_IOU: f64 = 0.5;

/// 0.50, 0.55, …, 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|p| p as f64 / 100.0).collect()
}

/// A predicted track reduced to what the metrics need.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedTrack {
    pub id: u32,
    pub class: usize,
    pub confidence: f64,
    /// One entry per frame.
    pub masks: Vec<Option<Mask>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtTrack {
    pub id: u32,
    pub class: usize,
    pub masks: Vec<Option<Mask>>,
}

/// Class and confidence come from the final frame: the most probable
/// foreground class and its probability. Masks are kept for active frames.
pub fn predictions_from_tracks(file: &TracksFile) -> Result<Vec<PredictedTrack>> {
    let mut out = Vec::with_capacity(file.tracks.len());
    for tr in &file.tracks {
        let Some(last) = tr.frames.iter().max_by_key(|f| f.t) else { continue };
        if last.scores.len() < 2 {
            return Err(crate::Error::invalid(format!("track {} has no foreground scores", tr.id)));
        }
        let fg = &last.scores[..last.scores.len() - 1];
        let mut class = 0;
        for (c, &p) in fg.iter().enumerate() {
            if p > fg[class] {
                class = c;
            }
        }
        let mut masks = vec![None; file.num_frames];
        for f in &tr.frames {
            if f.active && f.t < file.num_frames {
                masks[f.t] = tr.mask_at(f.t, file.grid)?;
            }
        }
        out.push(PredictedTrack {
            id: tr.id,
            class,
            confidence: fg[class],
            masks,
        });
    }
    Ok(out)
}

pub fn gt_tracks(gt: &GroundTruthSequence) -> Vec<GtTrack> {
    gt.objects
        .iter()
        .map(|o| GtTrack {
            id: o.id,
            class: o.class,
            masks: o.frames.iter().map(|f| f.as_ref().map(|f| f.mask.clone())).collect(),
        })
        .collect()
}

/// `Σₜ |a ∩ b| / Σₜ |a ∪ b|` over all frames; a frame where only one track is
/// present adds that track's area to the union. Tracks with no area at all
/// score 0.
pub fn st_iou(a: &[Option<Mask>], b: &[Option<Mask>]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for t in 0..a.len().max(b.len()) {
        let ma = a.get(t).and_then(Option::as_ref);
        let mb = b.get(t).and_then(Option::as_ref);
        match (ma, mb) {
            (Some(x), Some(y)) => {
                let i = x.intersection(y);
                inter += i;
                union += x.count() + y.count() - i;
            }
            (Some(x), None) | (None, Some(x)) => union += x.count(),
            (None, None) => {}
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// 101-point interpolated average precision of a ranked list of hits.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / 101.0
}

/// Video mAP over several sequences, pooled per class.
#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub thresholds: Vec<f64>,
    /// Mean over evaluable classes at each threshold.
    pub per_threshold: Vec<f64>,
    pub mean: f64,
    /// Per class, averaged over thresholds; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

/// Per class, predictions from all sequences are ranked by confidence (ties
/// to the lower sequence index, then the lower track id) and each one is
/// greedily matched to the unmatched ground-truth track of its own sequence
/// with the highest st-IoU at or above the threshold (ties to the lower id).
///
/// Only classes with ground truth are averaged. Without any such class the
/// result is 1 when there are no predictions and 0 otherwise.
pub fn video_map(items: &[(&[PredictedTrack], &[GtTrack])], num_classes: usize, thresholds: &[f64]) -> MapResult {
    let ious: Vec<Vec<Vec<f64>>> = items
        .iter()
        .map(|(preds, gts)| {
            preds
                .iter()
                .map(|p| gts.iter().map(|g| if g.class == p.class { st_iou(&p.masks, &g.masks) } else { 0.0 }).collect())
                .collect()
        })
        .collect();
    let mut ap = vec![vec![None; thresholds.len()]; num_classes];
    for (c, ap_c) in ap.iter_mut().enumerate() {
        let num_gt: usize = items.iter().map(|(_, g)| g.iter().filter(|g| g.class == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (s, (preds, _)) in items.iter().enumerate() {
            ranked.extend(preds.iter().enumerate().filter(|(_, p)| p.class == c).map(|(i, _)| (s, i)));
        }
        ranked.sort_by(|&(sa, ia), &(sb, ib)| {
            let (pa, pb) = (&items[sa].0[ia], &items[sb].0[ib]);
            pb.confidence.total_cmp(&pa.confidence).then(sa.cmp(&sb)).then(pa.id.cmp(&pb.id))
        });
        for (ti, &thr) in thresholds.iter().enumerate() {
            let mut taken: Vec<Vec<bool>> = items.iter().map(|(_, g)| vec![false; g.len()]).collect();
            let mut hits = Vec::with_capacity(ranked.len());
            for &(s, i) in &ranked {
                let gts = items[s].1;
                let mut best: Option<usize> = None;
                for (j, g) in gts.iter().enumerate() {
                    let iou = ious[s][i][j];
                    if g.class != c || taken[s][j] || iou < thr {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some(b) => iou > ious[s][i][b] || (iou == ious[s][i][b] && g.id < gts[b].id),
                    };
                    if better {
                        best = Some(j);
                    }
                }
                if let Some(j) = best {
                    taken[s][j] = true;
                }
                hits.push(best.is_some());
            }
            ap_c[ti] = Some(interpolated_ap(&hits, num_gt));
        }
    }
    let any_pred = items.iter().any(|(p, _)| !p.is_empty());
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|ti| {
            let vals: Vec<f64> = ap.iter().filter_map(|a| a[ti]).collect();
            if vals.is_empty() {
                if any_pred {
                    0.0
                } else {
                    1.0
                }
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect();
    let mean = if per_threshold.is_empty() {
        0.0
    } else {
        per_threshold.iter().sum::<f64>() / per_threshold.len() as f64
    };
    let per_class = ap
        .iter()
        .map(|a| {
            let vals: Option<Vec<f64>> = a.iter().copied().collect();
            vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    MapResult {
        thresholds: thresholds.to_vec(),
        per_threshold,
        mean,
        per_class,
    }
}

/// Identity consistency counts, summable over sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IdCounts {
    /// (frame, object) pairs with the object present.
    pub pairs: usize,
    /// Pairs covered by the object's most frequent covering track.
    pub consistent: usize,
    pub id_switches: usize,
}

impl IdCounts {
    pub fn add(&mut self, other: IdCounts) {
        self.pairs += other.pairs;
        self.consistent += other.consistent;
        self.id_switches += other.id_switches;
    }

    /// 1 when there is nothing to cover.
    pub fn association_accuracy(&self) -> f64 {
        if self.pairs == 0 {
            1.0
        } else {
            self.consistent as f64 / self.pairs as f64
        }
    }
}

/// Track covering `gt` at frame `t`: highest mask IoU, at least [`COVER_IOU`],
/// ties to the lower id.
pub fn covering_track(preds: &[PredictedTrack], gt: &Mask, t: usize) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for p in preds {
        let Some(Some(m)) = p.masks.get(t) else { continue };
        let iou = m.iou(gt);
        if iou < COVER_IOU {
            continue;
        }
        if best.map_or(true, |(b, id)| iou > b || (iou == b && p.id < id)) {
            best = Some((iou, p.id));
        }
    }
    best.map(|(_, id)| id)
}

/// Association accuracy counts and ID switches for one sequence. A switch is
/// counted when the covering id changes between consecutive covered frames
/// of an object; uncovered frames in between are skipped.
pub fn id_metrics(preds: &[PredictedTrack], gts: &[GtTrack]) -> IdCounts {
    let mut counts = IdCounts::default();
    for g in gts {
        let mut cover = Vec::new();
        for (t, m) in g.masks.iter().enumerate() {
            if let Some(m) = m {
                counts.pairs += 1;
                cover.push(covering_track(preds, m, t));
            }
        }
        let covered: Vec<u32> = cover.iter().flatten().copied().collect();
        let mut tally: Vec<(u32, usize)> = Vec::new();
        for &id in &covered {
            match tally.iter_mut().find(|(i, _)| *i == id) {
                Some(e) => e.1 += 1,
                None => tally.push((id, 1)),
            }
        }
        let mode = tally.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|e| e.0);
        counts.consistent += covered.iter().filter(|&&id| Some(id) == mode).count();
        counts.id_switches += covered.windows(2).filter(|w| w[0] != w[1]).count();
    }
    counts
}

/// Tracks every sequence with `model` and evaluates against its ground truth.
pub fn evaluate_model(model: &Model, thresholds: &Thresholds, seqs: &[LabeledSequence]) -> Result<EvalReport> {
    let items = seqs
        .par_iter()
        .map(|seq| {
            let memory = track_sequence(model, &seq.detections.frames, thresholds)?;
            let file = TracksFile::from_memory(&memory, seq.gt.grid);
            Ok(EvalItem {
                scenario: seq.scenario.name().to_string(),
                predictions: predictions_from_tracks(&file)?,
                ground_truth: gt_tracks(&seq.gt),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&items, model.config.num_classes, &default_thresholds()))
}
