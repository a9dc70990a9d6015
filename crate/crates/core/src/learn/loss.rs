//! Target assignment and the loss terms, all recorded on a tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::box_iou;
use crate::numcore::{Tape, Tensor, Var};
use crate::synthworld::{Detection, GroundTruthSequence};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Ground-truth identity per detection of one frame. Each object labels at
/// most one detection: pairs with IoU ≥ `iou_threshold` are taken greedily by
/// descending IoU (ties to the lower object id, then the lower detection).
pub fn assign_targets(dets: &[Detection], gt: &GroundTruthSequence, t: usize, iou_threshold: f64) -> Vec<Option<u32>> {
    let mut pairs = Vec::new();
    for obj in &gt.objects {
        let Some(Some(f)) = obj.frames.get(t) else { continue };
        for (k, d) in dets.iter().enumerate() {
            let iou = box_iou(&f.bbox, &d.bbox);
            if iou >= iou_threshold {
                pairs.push((iou, obj.id, k));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut labels = vec![None; dets.len()];
    let mut used = Vec::new();
    for (_, id, k) in pairs {
        if labels[k].is_none() && !used.contains(&id) {
            labels[k] = Some(id);
            used.push(id);
        }
    }
    labels
}

/// `Σ −[y ln p + (1 − y) ln(1 − p)]` over the rows of `p: [K, 1]`.
pub fn bce_sum(tape: &mut Tape, p: Var, targets: &[f64]) -> Result<Var> {
    let rows = tape.value(p).len();
    if rows != targets.len() {
        return Err(Error::Shape {
            op: "bce_sum",
            left: tape.value(p).shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let pc = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let ln_p = tape.ln(pc);
    let q = tape.scale(pc, -1.0);
    let q = tape.offset(q, 1.0);
    let ln_q = tape.ln(q);
    let pos = tape.dot_const(ln_p, Tensor::matrix(rows, 1, targets.to_vec()))?;
    let neg = tape.dot_const(ln_q, Tensor::matrix(rows, 1, targets.iter().map(|y| 1.0 - y).collect()))?;
    let s = tape.add(pos, neg)?;
    Ok(tape.scale(s, -1.0))
}

/// `Σₖ wₖ · −ln probs[k, labelₖ]` for row distributions `probs: [K, C]`.
pub fn weighted_cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    let (rows, cols) = (tape.value(probs).rows(), tape.value(probs).cols());
    if labels.len() != rows || weights.len() != rows || labels.iter().any(|&l| l >= cols) {
        return Err(Error::Shape {
            op: "weighted_cross_entropy",
            left: vec![rows, cols],
            right: vec![labels.len(), weights.len()],
        });
    }
    let pc = tape.clamp(probs, PROB_CLAMP, 1.0);
    let ln_p = tape.ln(pc);
    let mut sel = vec![0.0; rows * cols];
    for (r, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        sel[r * cols + l] = -w;
    }
    tape.dot_const(ln_p, Tensor::matrix(rows, cols, sel))
}

/// Gradient of the Lovász extension of the Jaccard loss for foreground
/// flags sorted by decreasing error.
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let total = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut jac = Vec::with_capacity(fg_sorted.len());
    let (mut fg_seen, mut bg_seen) = (0.0, 0.0);
    for &f in fg_sorted {
        if f {
            fg_seen += 1.0;
        } else {
            bg_seen += 1.0;
        }
        let inter = total - fg_seen;
        let union = total + bg_seen;
        jac.push(1.0 - inter / union);
    }
    let mut g = jac.clone();
    for i in (1..g.len()).rev() {
        g[i] -= jac[i - 1];
    }
    g
}

/// Lovász extension of `1 − Jaccard` for one class: errors `|fg − p|` sorted
/// in decreasing order (stable) and dotted with [`lovasz_grad`].
pub fn lovasz_class(tape: &mut Tape, p: Var, fg: &[bool]) -> Result<Var> {
    let n = tape.value(p).len();
    if n != fg.len() {
        return Err(Error::Shape {
            op: "lovasz_class",
            left: tape.value(p).shape().to_vec(),
            right: vec![fg.len()],
        });
    }
    let target = Tensor::matrix(n, 1, fg.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect());
    let neg = tape.scale(p, -1.0);
    let diff = tape.add_const(neg, target)?;
    let err = tape.abs(diff);
    let values = tape.value(err).data().to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut h = 0x84222325u64;
    for &i in &order {
        h = (h ^ i as u64).wrapping_mul(0x0100_0000_01b3);
    }
    tape.record_branch(h);
    let fg_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
    let g = lovasz_grad(&fg_sorted);
    let sorted = tape.gather_rows(err, order.into_iter().map(Some).collect())?;
    tape.dot_const(sorted, Tensor::matrix(n, 1, g))
}

/// Multi-class Lovász-softmax over the classes present in `labels`, for
/// per-cell distributions `probs: [P, K]`.
pub fn lovasz_softmax(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.value(probs).cols();
    let mut terms = Vec::new();
    for c in 0..k {
        let fg: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if !fg.iter().any(|&f| f) {
            continue;
        }
        let p = tape.slice_cols(probs, c, 1)?;
        terms.push(lovasz_class(tape, p, &fg)?);
    }
    let n = terms.len();
    let s = tape.add_all(&terms)?;
    Ok(if n > 0 { tape.scale(s, 1.0 / n as f64) } else { s })
}

/// `wₜ = t / Σₛ s` for `t = 1..=T`.
pub fn frame_weights(frames: usize) -> Vec<f64> {
    let total = (frames * (frames + 1) / 2) as f64;
    (1..=frames).map(|t| t as f64 / total).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weights of the score, segmentation, match and init terms.
    pub lambdas: [f64; 4],
    /// Frames unrolled per sequence.
    pub frames: usize,
    pub iou_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambdas: [1.0, 1.0, 4.0, 1.0],
            frames: 10,
            iou_threshold: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub score: f64,
    pub seg: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub init: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(components: [f64; 4], lambdas: &[f64; 4]) -> Self {
        let total = components.iter().zip(lambdas).map(|(c, l)| c * l).sum();
        Self {
            score: components[0],
            seg: components[1],
            matching: components[2],
            init: components[3],
            total,
        }
    }

    pub fn components(&self) -> [f64; 4] {
        [self.score, self.seg, self.matching, self.init]
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.score += b.score / n;
            m.seg += b.seg / n;
            m.matching += b.matching / n;
            m.init += b.init / n;
            m.total += b.total / n;
        }
        m
    }
}

/// `λ¹·score + λ²·seg + λ³·match + λ⁴·init` on the tape.
pub fn total_loss(tape: &mut Tape, components: [Var; 4], lambdas: &[f64; 4]) -> Result<Var> {
    let terms: Vec<Var> = components.iter().zip(lambdas).map(|(&c, &l)| tape.scale(c, l)).collect();
    tape.add_all(&terms)
}
