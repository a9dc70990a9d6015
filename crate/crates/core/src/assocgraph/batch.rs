//! Fixed-capacity graph tensors with activity masks.

use super::{GnnParams, GraphInput};
use crate::error::{Error, Result};
use crate::numcore::{sigmoid, Linear, ParamStore, Tape, Tensor};

pub const MAX_TRACKS: usize = 24;
pub const MAX_DETECTIONS: usize = 16;

/// Track slot 0 is the empty track and is always active; real tracks occupy
/// slots `1..=MAX_TRACKS`. Edge row `s·MAX_DETECTIONS + n` joins track slot
/// `s` with detection slot `n`. Inactive rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub tracks: Tensor,
    pub detections: Tensor,
    pub edges: Tensor,
    pub track_active: Vec<bool>,
    pub det_active: Vec<bool>,
}

fn put_row(t: &mut Tensor, row: usize, v: &[f64]) -> Result<()> {
    let c = t.cols();
    if v.len() != c {
        return Err(Error::Shape {
            op: "graph batch row",
            left: t.shape().to_vec(),
            right: vec![v.len()],
        });
    }
    t.data_mut()[row * c..(row + 1) * c].copy_from_slice(v);
    Ok(())
}

impl GraphBatch {
    pub fn new(track_dim: usize, det_dim: usize, edge_dim: usize) -> Self {
        let mut track_active = vec![false; MAX_TRACKS + 1];
        track_active[0] = true;
        Self {
            tracks: Tensor::zeros(&[MAX_TRACKS + 1, track_dim]),
            detections: Tensor::zeros(&[MAX_DETECTIONS, det_dim]),
            edges: Tensor::zeros(&[(MAX_TRACKS + 1) * MAX_DETECTIONS, edge_dim]),
            track_active,
            det_active: vec![false; MAX_DETECTIONS],
        }
    }

    pub fn edge_row(track_slot: usize, det_slot: usize) -> usize {
        track_slot * MAX_DETECTIONS + det_slot
    }

    fn check_slot(slot: usize, cap: usize, what: &str) -> Result<()> {
        if slot >= cap {
            return Err(Error::Capacity(format!("{what} slot {slot} exceeds capacity {cap}")));
        }
        Ok(())
    }

    /// Places a real track (`slot ≥ 1`) and marks it active.
    pub fn set_track(&mut self, slot: usize, embedding: &[f64]) -> Result<()> {
        Self::check_slot(slot, MAX_TRACKS + 1, "track")?;
        if slot == 0 {
            return Err(Error::invalid("track slot 0 is reserved for the empty track"));
        }
        put_row(&mut self.tracks, slot, embedding)?;
        self.track_active[slot] = true;
        Ok(())
    }

    pub fn set_detection(&mut self, slot: usize, embedding: &[f64]) -> Result<()> {
        Self::check_slot(slot, MAX_DETECTIONS, "detection")?;
        put_row(&mut self.detections, slot, embedding)?;
        self.det_active[slot] = true;
        Ok(())
    }

    pub fn set_edge(&mut self, track_slot: usize, det_slot: usize, features: &[f64]) -> Result<()> {
        Self::check_slot(track_slot, MAX_TRACKS + 1, "track")?;
        Self::check_slot(det_slot, MAX_DETECTIONS, "detection")?;
        put_row(&mut self.edges, Self::edge_row(track_slot, det_slot), features)
    }

    pub fn active_track_slots(&self) -> Vec<usize> {
        (1..=MAX_TRACKS).filter(|&s| self.track_active[s]).collect()
    }

    pub fn active_det_slots(&self) -> Vec<usize> {
        (0..MAX_DETECTIONS).filter(|&s| self.det_active[s]).collect()
    }

    /// True when every row belonging to an inactive slot is zero.
    pub fn inactive_rows_zero(&self) -> bool {
        let zero = |t: &Tensor, r: usize| t.row(r).iter().all(|&v| v == 0.0);
        for s in 0..=MAX_TRACKS {
            if !self.track_active[s] && !zero(&self.tracks, s) {
                return false;
            }
            for n in 0..MAX_DETECTIONS {
                let live = self.track_active[s] && self.det_active[n];
                if !live && !zero(&self.edges, Self::edge_row(s, n)) {
                    return false;
                }
            }
        }
        (0..MAX_DETECTIONS).all(|n| self.det_active[n] || zero(&self.detections, n))
    }
}

/// Runs the network on the active part of `batch` and writes the results
/// back into fixed-capacity tensors. Only active rows take part in any
/// computation, so padding never changes active outputs.
pub fn gnn_forward(batch: &GraphBatch, params: &GnnParams, store: &ParamStore) -> Result<GraphBatch> {
    let tracks = batch.active_track_slots();
    let dets = batch.active_det_slots();
    let (m, n) = (tracks.len(), dets.len());
    let all_tracks: Vec<usize> = std::iter::once(0).chain(tracks.iter().copied()).collect();

    let gather = |t: &Tensor, rows: &[usize]| {
        let c = t.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        Tensor::matrix(rows.len(), c, data)
    };
    let edge_rows: Vec<usize> = all_tracks
        .iter()
        .flat_map(|&s| dets.iter().map(move |&d| GraphBatch::edge_row(s, d)))
        .collect();

    let mut tape = Tape::new();
    let input = GraphInput {
        tracks: tape.constant(gather(&batch.tracks, &all_tracks)),
        dets: tape.constant(gather(&batch.detections, &dets)),
        edges: tape.constant(gather(&batch.edges, &edge_rows)),
        num_tracks: m,
        num_dets: n,
    };
    let out = params.forward(&mut tape, store, &input)?;

    let (t_out, d_out, e_out) = (tape.value(out.tracks), tape.value(out.dets), tape.value(out.edges));
    let mut result = GraphBatch::new(t_out.cols(), d_out.cols(), e_out.cols());
    result.track_active = batch.track_active.clone();
    result.det_active = batch.det_active.clone();
    for (k, &s) in all_tracks.iter().enumerate() {
        put_row(&mut result.tracks, s, t_out.row(k))?;
    }
    for (k, &s) in dets.iter().enumerate() {
        put_row(&mut result.detections, s, d_out.row(k))?;
    }
    for (k, &r) in edge_rows.iter().enumerate() {
        put_row(&mut result.edges, r, e_out.row(k))?;
    }
    Ok(result)
}

fn logistic(head: &Linear, store: &ParamStore, x: &[f64]) -> Result<f64> {
    let w = store.get(head.weight);
    if w.cols() != x.len() {
        return Err(Error::Shape {
            op: "logistic head",
            left: w.shape().to_vec(),
            right: vec![x.len()],
        });
    }
    let z: f64 = w.row(0).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + store.get(head.bias).data()[0];
    Ok(sigmoid(z))
}

/// Reads the heads off the edges of a [`gnn_forward`] result.
/// `[MAX_TRACKS, MAX_DETECTIONS]`; row `s − 1` holds track slot `s`. Entries
/// for inactive tracks or detections are 0.
pub fn match_probabilities(batch: &GraphBatch, params: &GnnParams, store: &ParamStore) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[MAX_TRACKS, MAX_DETECTIONS]);
    for s in batch.active_track_slots() {
        for n in batch.active_det_slots() {
            let p = logistic(&params.match_head, store, batch.edges.row(GraphBatch::edge_row(s, n)))?;
            out.data_mut()[(s - 1) * MAX_DETECTIONS + n] = p;
        }
    }
    Ok(out)
}

/// One entry per detection slot, 0 for inactive slots.
pub fn init_probabilities(batch: &GraphBatch, params: &GnnParams, store: &ParamStore) -> Result<Vec<f64>> {
    let mut out = vec![0.0; MAX_DETECTIONS];
    for n in batch.active_det_slots() {
        out[n] = logistic(&params.init_head, store, batch.edges.row(GraphBatch::edge_row(0, n)))?;
    }
    Ok(out)
}
