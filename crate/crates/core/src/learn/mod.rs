//! Training: targets, the four-term loss over an unrolled sequence, and an
//! Adam training loop with checkpoints.

mod checks;
mod loss;
mod train;

pub use checks::{gradcheck_target, gradcheck_train_config, GRADCHECK_TARGETS};
pub use loss::{
    assign_targets, bce_sum, frame_weights, lovasz_class, lovasz_grad, lovasz_softmax, total_loss,
    weighted_cross_entropy, LossBreakdown, LossConfig, PROB_CLAMP,
};
pub use train::{
    load_checkpoint, save_checkpoint, write_loss_csv, Ablations, Checkpoint, LossPoint, NamedTensor, TrainConfig,
    Trainer, ABLATION_NAMES, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Var};
use crate::synthworld::LabeledSequence;
use crate::trackman::{step_with_params, Mode, Model, Thresholds, TrackMemory};

/// Identity labels of one unrolled sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignmentLabels {
    /// Per frame, per (truncated) detection.
    pub detections: Vec<Vec<Option<u32>>>,
    /// Per track, inherited from its initializing detection.
    pub tracks: Vec<Option<u32>>,
}

/// Result of unrolling one sequence in training mode.
#[derive(Debug)]
pub struct Unrolled {
    pub memory: TrackMemory,
    /// Scalar total on `memory.tape`.
    pub total: Var,
    pub components: [Var; 4],
    pub breakdown: LossBreakdown,
    pub labels: AssignmentLabels,
}

/// Runs the tracker over the first `cfg.frames` frames of `seq` exactly as at
/// inference (train-mode thresholds) and records the loss.
///
/// Match, init and segmentation terms are summed over frames and divided by
/// the number of frames; the score term uses the normalized frame ramp. No
/// term is divided by the number of tracks or detections.
pub fn unroll(
    model: &Model,
    store: &ParamStore,
    seq: &LabeledSequence,
    cfg: &LossConfig,
    thresholds: &Thresholds,
    tape: Tape,
) -> Result<Unrolled> {
    let mc = &model.config;
    let frames = cfg.frames.min(seq.detections.len()).min(seq.gt.frames);
    if frames == 0 {
        return Err(Error::invalid("sequence has no frames to unroll"));
    }
    if seq.gt.grid != mc.grid || seq.gt.num_classes != mc.num_classes {
        return Err(Error::invalid(format!(
            "sequence grid/classes {}/{} do not match model {}/{}",
            seq.gt.grid, seq.gt.num_classes, mc.grid, mc.num_classes
        )));
    }
    let weights = frame_weights(frames);
    let mut memory = TrackMemory::with_tape(tape);
    let mut labels = AssignmentLabels::default();
    let (mut score_terms, mut seg_terms, mut match_terms, mut init_terms) = (vec![], vec![], vec![], vec![]);

    for (t, &w) in weights.iter().enumerate() {
        let frame = crate::synthworld::truncate_detections(seq.detections.frames[t].clone());
        let det_labels = assign_targets(&frame, &seq.gt, t, cfg.iou_threshold);
        let out = step_with_params(&mut memory, &frame, model, store, thresholds, Mode::Train)?;
        let n = frame.len();
        let existing: Vec<Option<u32>> = memory.tracks[..out.existing].iter().map(|tr| tr.identity).collect();
        for &(i, k) in &out.spawned {
            memory.tracks[i].identity = det_labels[k];
        }
        let tape = &mut memory.tape;

        if let Some(mp) = out.match_prob {
            if out.existing > 0 && n > 0 {
                let targets: Vec<f64> = existing
                    .iter()
                    .flat_map(|id| det_labels.iter().map(move |l| f64::from(id.is_some() && id == l)))
                    .collect();
                match_terms.push(bce_sum(tape, mp, &targets)?);
            }
        }
        if let Some(ip) = out.init_prob {
            if n > 0 {
                let targets: Vec<f64> = det_labels
                    .iter()
                    .map(|l| f64::from(l.is_some() && !existing.contains(l)))
                    .collect();
                init_terms.push(bce_sum(tape, ip, &targets)?);
            }
        }
        if let Some(probs) = out.score_probs {
            let class_of = |id: Option<u32>| {
                id.and_then(|id| seq.gt.object(id)).map_or(mc.num_classes, |o| o.class)
            };
            let tracks = &memory.tracks;
            let cls: Vec<usize> = tracks.iter().map(|tr| class_of(tr.identity)).collect();
            score_terms.push(weighted_cross_entropy(tape, probs, &cls, &vec![w; tracks.len()])?);
        }
        if let Some(logits) = out.mask_logits {
            let owner_col = |id: u32| {
                out.mask_tracks
                    .iter()
                    .position(|&i| memory.tracks[i].identity == Some(id))
                    .map_or(0, |j| j + 1)
            };
            let target: Vec<usize> = seq.gt.instance_map(t).iter().map(|o| o.map_or(0, owner_col)).collect();
            let cells = target.len();
            let bg = tape.constant(crate::numcore::Tensor::zeros(&[cells, 1]));
            let all = tape.concat_cols(&[bg, logits])?;
            let probs = tape.softmax(all);
            seg_terms.push(lovasz_softmax(tape, probs, &target)?);
        }
        labels.detections.push(det_labels);
    }
    labels.tracks = memory.tracks.iter().map(|tr| tr.identity).collect();

    let tape = &mut memory.tape;
    let per_frame = 1.0 / frames as f64;
    let mut reduce = |terms: &[Var], scale: f64| -> Result<Var> {
        let s = tape.add_all(terms)?;
        Ok(tape.scale(s, scale))
    };
    let components = [
        reduce(&score_terms, 1.0)?,
        reduce(&seg_terms, per_frame)?,
        reduce(&match_terms, per_frame)?,
        reduce(&init_terms, per_frame)?,
    ];
    let total = total_loss(tape, components, &cfg.lambdas)?;
    let values = components.map(|c| tape.value(c).item());
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        ..LossBreakdown::from_components(values, &cfg.lambdas)
    };
    Ok(Unrolled {
        memory,
        total,
        components,
        breakdown,
        labels,
    })
}

/// [`unroll`] on a caller-owned tape, for use inside gradient checks.
pub fn sequence_loss_on(
    tape: &mut Tape,
    model: &Model,
    store: &ParamStore,
    seq: &LabeledSequence,
    cfg: &LossConfig,
    thresholds: &Thresholds,
) -> Result<Var> {
    let u = unroll(model, store, seq, cfg, thresholds, std::mem::take(tape))?;
    *tape = u.memory.into_tape();
    Ok(u.total)
}
