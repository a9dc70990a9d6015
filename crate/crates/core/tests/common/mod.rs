//! Independent reference implementations used by the acceptance suite.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use trackgraph::evalkit::{GtTrack, PredictedTrack};
use trackgraph::geometry::Mask;

/// Spatio-temporal IoU by counting cells one at a time.
pub fn st_iou_cells(a: &[Option<Mask>], b: &[Option<Mask>]) -> f64 {
    let (mut inter, mut union) = (0u32, 0u32);
    for t in 0..a.len().max(b.len()) {
        let ma = a.get(t).cloned().flatten();
        let mb = b.get(t).cloned().flatten();
        let size = ma.as_ref().or(mb.as_ref()).map_or(0, |m| m.size());
        for r in 0..size {
            for c in 0..size {
                let x = ma.as_ref().is_some_and(|m| m.get(r, c));
                let y = mb.as_ref().is_some_and(|m| m.get(r, c));
                inter += u32::from(x && y);
                union += u32::from(x || y);
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        f64::from(inter) / f64::from(union)
    }
}

/// All ways to give each prediction in `order` either nothing or a distinct
/// eligible ground-truth track. Each entry is a `(sequence, gt index)`.
fn assignments(
    order: &[(usize, usize)],
    eligible: &dyn Fn(usize, usize, usize) -> bool,
    gt_counts: &[usize],
) -> Vec<Vec<Option<(usize, usize)>>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut used: Vec<Vec<bool>> = gt_counts.iter().map(|&n| vec![false; n]).collect();
    fn rec(
        k: usize,
        order: &[(usize, usize)],
        eligible: &dyn Fn(usize, usize, usize) -> bool,
        used: &mut Vec<Vec<bool>>,
        cur: &mut Vec<Option<(usize, usize)>>,
        out: &mut Vec<Vec<Option<(usize, usize)>>>,
    ) {
        if k == order.len() {
            out.push(cur.clone());
            return;
        }
        let (s, i) = order[k];
        cur.push(None);
        rec(k + 1, order, eligible, used, cur, out);
        cur.pop();
        for j in 0..used[s].len() {
            if !used[s][j] && eligible(s, i, j) {
                used[s][j] = true;
                cur.push(Some((s, j)));
                rec(k + 1, order, eligible, used, cur, out);
                cur.pop();
                used[s][j] = false;
            }
        }
    }
    rec(0, order, eligible, &mut used, &mut cur, &mut out);
    out
}

/// AP straight from its definition: for each recall level, the best
/// precision reached at any cutoff with at least that recall.
fn ap_by_definition(hits: &[bool], num_gt: usize) -> f64 {
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let mut best: Option<f64> = None;
        let mut tp = 0usize;
        for (k, &h) in hits.iter().enumerate() {
            tp += usize::from(h);
            if tp as f64 / num_gt as f64 >= level {
                let p = tp as f64 / (k + 1) as f64;
                best = Some(best.map_or(p, |b: f64| b.max(p)));
            }
        }
        sum += best.unwrap_or(0.0);
    }
    sum / 101.0
}

/// Video mAP by enumerating every match of every class. Among all
/// assignments the one chosen is the one whose per-prediction matches, read
/// in confidence order, are best: a higher st-IoU first, then a lower gt id,
/// and any match over none.
pub fn brute_force_map(items: &[(&[PredictedTrack], &[GtTrack])], num_classes: usize, thresholds: &[f64]) -> (Vec<f64>, f64) {
    let any_pred = items.iter().any(|(p, _)| !p.is_empty());
    let mut per_threshold = Vec::new();
    for &thr in thresholds {
        let mut aps = Vec::new();
        for c in 0..num_classes {
            let num_gt: usize = items.iter().map(|(_, g)| g.iter().filter(|g| g.class == c).count()).sum();
            if num_gt == 0 {
                continue;
            }
            let mut order: Vec<(usize, usize)> = Vec::new();
            for (s, (preds, _)) in items.iter().enumerate() {
                for (i, p) in preds.iter().enumerate() {
                    if p.class == c {
                        order.push((s, i));
                    }
                }
            }
            // selection sort on (confidence desc, sequence asc, id asc)
            for a in 0..order.len() {
                for b in a + 1..order.len() {
                    let (pa, pb) = (&items[order[a].0].0[order[a].1], &items[order[b].0].0[order[b].1]);
                    let b_first = pb.confidence > pa.confidence
                        || (pb.confidence == pa.confidence
                            && (order[b].0 < order[a].0 || (order[b].0 == order[a].0 && pb.id < pa.id)));
                    if b_first {
                        order.swap(a, b);
                    }
                }
            }
            let iou = |s: usize, i: usize, j: usize| st_iou_cells(&items[s].0[i].masks, &items[s].1[j].masks);
            let eligible = |s: usize, i: usize, j: usize| items[s].1[j].class == c && iou(s, i, j) >= thr;
            let gt_counts: Vec<usize> = items.iter().map(|(_, g)| g.len()).collect();
            let all = assignments(&order, &eligible, &gt_counts);
            let key = |a: &Vec<Option<(usize, usize)>>| -> Vec<(f64, i64)> {
                a.iter()
                    .zip(&order)
                    .map(|(m, &(s, i))| match m {
                        Some((_, j)) => (iou(s, i, *j), -i64::from(items[s].1[*j].id)),
                        None => (-1.0, 0),
                    })
                    .collect()
            };
            let mut best = &all[0];
            for a in &all[1..] {
                let (ka, kb) = (key(a), key(best));
                let better = ka
                    .iter()
                    .zip(&kb)
                    .find(|(x, y)| x != y)
                    .is_some_and(|(x, y)| x.0 > y.0 || (x.0 == y.0 && x.1 > y.1));
                if better {
                    best = a;
                }
            }
            let hits: Vec<bool> = best.iter().map(Option::is_some).collect();
            aps.push(ap_by_definition(&hits, num_gt));
        }
        per_threshold.push(if aps.is_empty() {
            if any_pred {
                0.0
            } else {
                1.0
            }
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        });
    }
    let mean = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    (per_threshold, mean)
}

fn random_mask(rng: &mut ChaCha8Rng, grid: usize) -> Mask {
    let cells = (0..grid * grid).map(|_| u8::from(rng.gen_bool(0.5))).collect();
    Mask::from_cells(grid, cells).unwrap()
}

fn perturbed(rng: &mut ChaCha8Rng, m: &Mask) -> Mask {
    let mut out = m.clone();
    for idx in 0..m.cells().len() {
        if rng.gen_bool(0.15) {
            out.set(idx, m.cells()[idx] == 0);
        }
    }
    out
}

/// A small random evaluation fixture: 3×3 masks over a few frames, 2
/// classes, coarse confidences so ties occur, and predictions that often
/// copy a ground-truth track with a few cells flipped.
pub fn random_fixture(rng: &mut ChaCha8Rng, max_preds: usize, max_gts: usize, frames: usize) -> (Vec<PredictedTrack>, Vec<GtTrack>) {
    let grid = 3;
    let n_gt = rng.gen_range(0..=max_gts);
    let n_pred = rng.gen_range(0..=max_preds);
    let mut ids: Vec<u32> = (0..10).collect();
    let mut gts = Vec::new();
    for _ in 0..n_gt {
        let id = ids.remove(rng.gen_range(0..ids.len()));
        let masks = (0..frames).map(|_| rng.gen_bool(0.8).then(|| random_mask(rng, grid))).collect();
        gts.push(GtTrack {
            id,
            class: rng.gen_range(0..2),
            masks,
        });
    }
    let mut ids: Vec<u32> = (0..10).collect();
    let mut preds = Vec::new();
    for _ in 0..n_pred {
        let id = ids.remove(rng.gen_range(0..ids.len()));
        let (class, masks) = if !gts.is_empty() && rng.gen_bool(0.7) {
            let g: &GtTrack = &gts[rng.gen_range(0..gts.len())];
            let masks = g.masks.iter().map(|m| m.as_ref().map(|m| perturbed(rng, m))).collect();
            let class = if rng.gen_bool(0.85) { g.class } else { 1 - g.class };
            (class, masks)
        } else {
            let masks = (0..frames).map(|_| rng.gen_bool(0.8).then(|| random_mask(rng, grid))).collect();
            (rng.gen_range(0..2), masks)
        };
        preds.push(PredictedTrack {
            id,
            class,
            confidence: [0.25, 0.5, 0.75][rng.gen_range(0..3)],
            masks,
        });
    }
    (preds, gts)
}
