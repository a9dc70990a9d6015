//! Bipartite track/detection graph and the stacked gated message-passing
//! network that scores associations and track initializations.
//!
//! Edge rows are laid out track-major with the empty track first: for `M`
//! real tracks and `N` detections, row `i·N + n` joins track row `i` (row 0
//! is the empty track) with detection `n`.

mod batch;
mod config;

use rand::Rng;

pub use batch::{gnn_forward, init_probabilities, match_probabilities, GraphBatch, MAX_DETECTIONS, MAX_TRACKS};
pub use config::{AssociationMode, GateMode, HeuristicConfig, ModelConfig, ScoringMode};

use crate::appearance::{log_likelihood, GaussianAppearance};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, BBox};
use crate::numcore::{Linear, Mlp2, ParamStore, Tape, Var};
use crate::synthworld::Detection;

/// Number of scalar edge features: appearance log-likelihood and IoU.
pub const EDGE_FEATURES: usize = 2;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    box_iou(a, b)
}

/// `[scores (C + 1), cx, cy, w, h]`.
pub fn detection_embedding(d: &Detection) -> Vec<f64> {
    let mut v = d.scores.clone();
    v.extend_from_slice(&d.bbox.to_array());
    v
}

/// `[log-likelihood / A, IoU(last box, detection box)]`. Without an
/// appearance model the first entry is 0.
pub fn edge_features(appearance: Option<&GaussianAppearance>, last_box: &BBox, det: &Detection) -> Result<[f64; 2]> {
    let ll = match appearance {
        Some(m) => log_likelihood(m, &det.appearance)? / m.dim() as f64,
        None => 0.0,
    };
    Ok([ll, iou(last_box, &det.bbox)])
}

/// Edge features towards the empty track: `[0, top foreground score]`.
pub fn empty_edge_features(det: &Detection) -> [f64; 2] {
    [0.0, det.top_foreground().1]
}

/// Linear + ReLU, optionally followed by a second Linear + ReLU.
#[derive(Clone, Copy, Debug)]
pub struct NodeUpdate {
    pub first: Linear,
    pub second: Option<Linear>,
}

impl NodeUpdate {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, d: usize, two_layer: bool, rng: &mut R) -> Result<Self> {
        let first = Linear::new(store, &format!("{name}.0"), input, d, rng)?;
        let second = if two_layer {
            Some(Linear::new(store, &format!("{name}.1"), d, d, rng)?)
        } else {
            None
        };
        Ok(Self { first, second })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let mut h = tape.relu(h);
        if let Some(second) = &self.second {
            let g = second.forward(tape, store, h)?;
            h = tape.relu(g);
        }
        Ok(h)
    }
}

/// Bottleneck residual block with linear layers: `relu(x + L₃(relu(L₂(relu(L₁ x)))))`.
#[derive(Clone, Copy, Debug)]
pub struct Residual {
    pub down: Linear,
    pub mid: Linear,
    pub up: Linear,
}

impl Residual {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, b: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            down: Linear::new(store, &format!("{name}.0"), d, b, rng)?,
            mid: Linear::new(store, &format!("{name}.1"), b, b, rng)?,
            up: Linear::new(store, &format!("{name}.2"), b, d, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.down.forward(tape, store, x)?;
        let h = tape.relu(h);
        let h = self.mid.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.up.forward(tape, store, h)?;
        let s = tape.add(x, h)?;
        Ok(tape.relu(s))
    }
}

/// Sum of `gate(e) ⊙ e` rows into `rows` buckets; plain sum without a gate.
pub fn gated_sum(
    tape: &mut Tape,
    store: &ParamStore,
    gate: Option<&Mlp2>,
    e: Var,
    idx: Vec<usize>,
    rows: usize,
) -> Result<Var> {
    let msg = match gate {
        Some(g) => {
            let logits = g.forward(tape, store, e)?;
            let a = tape.sigmoid(logits);
            tape.mul(a, e)?
        }
        None => e,
    };
    tape.scatter_add_rows(msg, idx, rows)
}

#[derive(Clone, Debug)]
pub struct GnnBlock {
    pub f_edge: NodeUpdate,
    /// Present in the first block only.
    pub edge_residual: Option<Residual>,
    pub g_track: Option<Mlp2>,
    pub f_track: NodeUpdate,
    pub g_empty: Option<Mlp2>,
    pub f_empty: NodeUpdate,
    pub g_det: Option<Mlp2>,
    pub f_det: NodeUpdate,
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub edges: Residual,
    pub tracks: Residual,
    pub dets: Residual,
}

/// Parameters used when message passing is disabled.
#[derive(Clone, Copy, Debug)]
pub struct LimitedParams {
    pub det: Linear,
    pub track: Linear,
}

#[derive(Clone, Debug)]
pub struct GnnParams {
    pub blocks: Vec<GnnBlock>,
    /// One per block when residual blocks are interleaved, else empty.
    pub residuals: Vec<ResidualBlock>,
    pub match_head: Linear,
    pub init_head: Linear,
    pub limited: Option<LimitedParams>,
}

/// Tape inputs for one frame's graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphInput {
    /// `[1 + M, D]`, row 0 the empty track.
    pub tracks: Var,
    /// `[N, C + 5]`.
    pub dets: Var,
    /// `[(1 + M)·N, 2]`.
    pub edges: Var,
    pub num_tracks: usize,
    pub num_dets: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphOutput {
    pub tracks: Var,
    pub dets: Var,
    pub edges: Var,
    /// `[M·N, 1]`, track-major.
    pub match_prob: Var,
    /// `[N, 1]`.
    pub init_prob: Var,
}

fn check_finite(tape: &Tape, vars: &[Var], what: &str) -> Result<()> {
    if vars.iter().all(|v| tape.value(*v).is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl GnnParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, b, det_in) = (cfg.d, cfg.bottleneck(), cfg.det_in());
        if cfg.limited_gnn {
            return Ok(Self {
                blocks: Vec::new(),
                residuals: Vec::new(),
                match_head: Linear::new(store, "gnn.match", EDGE_FEATURES, 1, rng)?,
                init_head: Linear::new(store, "gnn.init", EDGE_FEATURES, 1, rng)?,
                limited: Some(LimitedParams {
                    det: Linear::new(store, "gnn.limited.det", det_in, d, rng)?,
                    track: Linear::new(store, "gnn.limited.track", 2 * d, d, rng)?,
                }),
            });
        }
        let two_layer = !cfg.gated_aggregation;
        let gate = |store: &mut ParamStore, name: String, rng: &mut R| -> Result<Option<Mlp2>> {
            if cfg.gated_aggregation {
                Ok(Some(Mlp2::new(store, &name, d, b, d, rng)?))
            } else {
                Ok(None)
            }
        };
        let mut blocks = Vec::new();
        let mut residuals = Vec::new();
        for k in 0..cfg.blocks {
            let p = format!("gnn.block{}", k + 1);
            let (e_in, det_dim) = if k == 0 { (EDGE_FEATURES, det_in) } else { (d, d) };
            let f_edge = NodeUpdate::new(store, &format!("{p}.f_edge"), e_in + d + det_dim, d, two_layer, rng)?;
            let edge_residual = if k == 0 {
                Some(Residual::new(store, &format!("{p}.f_edge.residual"), d, b, rng)?)
            } else {
                None
            };
            let g_track = gate(store, format!("{p}.g_track"), rng)?;
            let f_track = NodeUpdate::new(store, &format!("{p}.f_track"), 2 * d, d, two_layer, rng)?;
            let g_empty = gate(store, format!("{p}.g_empty"), rng)?;
            let f_empty = NodeUpdate::new(store, &format!("{p}.f_empty"), 2 * d, d, two_layer, rng)?;
            let g_det = gate(store, format!("{p}.g_det"), rng)?;
            let f_det = NodeUpdate::new(store, &format!("{p}.f_det"), det_dim + d, d, two_layer, rng)?;
            blocks.push(GnnBlock {
                f_edge,
                edge_residual,
                g_track,
                f_track,
                g_empty,
                f_empty,
                g_det,
                f_det,
            });
            if cfg.interleave_residuals {
                let r = format!("gnn.residual{}", k + 1);
                residuals.push(ResidualBlock {
                    edges: Residual::new(store, &format!("{r}.edges"), d, b, rng)?,
                    tracks: Residual::new(store, &format!("{r}.tracks"), d, b, rng)?,
                    dets: Residual::new(store, &format!("{r}.dets"), d, b, rng)?,
                });
            }
        }
        Ok(Self {
            blocks,
            residuals,
            match_head: Linear::new(store, "gnn.match", d, 1, rng)?,
            init_head: Linear::new(store, "gnn.init", d, 1, rng)?,
            limited: None,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: &GraphInput) -> Result<GraphOutput> {
        let (m, n) = (input.num_tracks, input.num_dets);
        let rows = tape.value(input.edges).rows();
        if rows != (1 + m) * n || tape.value(input.tracks).rows() != 1 + m || tape.value(input.dets).rows() != n {
            return Err(Error::Shape {
                op: "gnn forward",
                left: vec![1 + m, n],
                right: vec![
                    tape.value(input.tracks).rows(),
                    tape.value(input.dets).rows(),
                    rows,
                ],
            });
        }
        if let Some(lim) = &self.limited {
            return self.forward_limited(tape, store, input, lim);
        }
        let track_of: Vec<Option<usize>> = (0..rows).map(|r| Some(r / n.max(1))).collect();
        let det_of: Vec<Option<usize>> = (0..rows).map(|r| Some(r % n.max(1))).collect();
        let real_track_idx: Vec<usize> = (n..rows).map(|r| r / n - 1).collect();
        let det_idx: Vec<usize> = (0..rows).map(|r| r % n.max(1)).collect();

        let (mut tracks, mut dets, mut edges) = (input.tracks, input.dets, input.edges);
        for (k, block) in self.blocks.iter().enumerate() {
            let t_g = tape.gather_rows(tracks, track_of.clone())?;
            let d_g = tape.gather_rows(dets, det_of.clone())?;
            let x = tape.concat_cols(&[edges, t_g, d_g])?;
            let mut e = block.f_edge.forward(tape, store, x)?;
            if let Some(res) = &block.edge_residual {
                e = res.forward(tape, store, e)?;
            }

            let e_empty = tape.slice_rows(e, 0, n)?;
            let e_real = tape.slice_rows(e, n, rows - n)?;
            let agg_empty = gated_sum(tape, store, block.g_empty.as_ref(), e_empty, vec![0; n], 1)?;
            let agg_real = gated_sum(tape, store, block.g_track.as_ref(), e_real, real_track_idx.clone(), m)?;
            let t_empty = tape.slice_rows(tracks, 0, 1)?;
            let t_real = tape.slice_rows(tracks, 1, m)?;
            let x_empty = tape.concat_cols(&[t_empty, agg_empty])?;
            let x_real = tape.concat_cols(&[t_real, agg_real])?;
            let t_empty = block.f_empty.forward(tape, store, x_empty)?;
            let t_real = block.f_track.forward(tape, store, x_real)?;
            let new_tracks = tape.concat_rows(&[t_empty, t_real])?;

            let agg_det = gated_sum(tape, store, block.g_det.as_ref(), e, det_idx.clone(), n)?;
            let x_det = tape.concat_cols(&[dets, agg_det])?;
            let new_dets = block.f_det.forward(tape, store, x_det)?;

            edges = e;
            tracks = new_tracks;
            dets = new_dets;
            check_finite(tape, &[edges, tracks, dets], &format!("gnn block {}", k + 1))?;

            if let Some(res) = self.residuals.get(k) {
                edges = res.edges.forward(tape, store, edges)?;
                tracks = res.tracks.forward(tape, store, tracks)?;
                dets = res.dets.forward(tape, store, dets)?;
                check_finite(tape, &[edges, tracks, dets], &format!("residual block {}", k + 1))?;
            }
        }
        let e_empty = tape.slice_rows(edges, 0, n)?;
        let e_real = tape.slice_rows(edges, n, rows - n)?;
        let match_logit = self.match_head.forward(tape, store, e_real)?;
        let init_logit = self.init_head.forward(tape, store, e_empty)?;
        Ok(GraphOutput {
            tracks,
            dets,
            edges,
            match_prob: tape.sigmoid(match_logit),
            init_prob: tape.sigmoid(init_logit),
        })
    }

    /// Edge-feature logistic heads; each track absorbs only the detection it
    /// matches best, weighted by that match probability.
    fn forward_limited(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &GraphInput,
        lim: &LimitedParams,
    ) -> Result<GraphOutput> {
        let (m, n) = (input.num_tracks, input.num_dets);
        let rows = (1 + m) * n;
        let e_empty = tape.slice_rows(input.edges, 0, n)?;
        let e_real = tape.slice_rows(input.edges, n, rows - n)?;
        let match_logit = self.match_head.forward(tape, store, e_real)?;
        let match_prob = tape.sigmoid(match_logit);
        let init_logit = self.init_head.forward(tape, store, e_empty)?;
        let init_prob = tape.sigmoid(init_logit);

        let det_h = lim.det.forward(tape, store, input.dets)?;
        let dets = tape.relu(det_h);
        let mut best_pair = Vec::with_capacity(m);
        let mut best_det = Vec::with_capacity(m);
        for t in 0..m {
            let probs = &tape.value(match_prob).data()[t * n..(t + 1) * n];
            let best = argmax_first(probs);
            tape.record_branch(best.map_or(u64::MAX, |b| b as u64));
            best_pair.push(best.map(|b| t * n + b));
            best_det.push(best);
        }
        let p = tape.gather_rows(match_prob, best_pair)?;
        let d = tape.value(dets).cols();
        let p = tape.repeat_cols(p, d)?;
        let chosen = tape.gather_rows(dets, best_det)?;
        let msg = tape.mul(p, chosen)?;
        let t_real = tape.slice_rows(input.tracks, 1, m)?;
        let x = tape.concat_cols(&[t_real, msg])?;
        let h = lim.track.forward(tape, store, x)?;
        let t_real = tape.relu(h);
        let t_empty = tape.slice_rows(input.tracks, 0, 1)?;
        let tracks = tape.concat_rows(&[t_empty, t_real])?;
        check_finite(tape, &[tracks, dets, match_prob, init_prob], "limited gnn")?;
        Ok(GraphOutput {
            tracks,
            dets,
            edges: input.edges,
            match_prob,
            init_prob,
        })
    }
}

/// Index of the largest value, ties to the lowest index; `None` when empty.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

#[cfg(test)]
mod tests;
