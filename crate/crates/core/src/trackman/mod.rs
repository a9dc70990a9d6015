//! Per-frame track management: graph construction, association, track
//! initialization, recurrent update, scoring, appearance update and mask
//! reweighting.
//!
//! Every quantity that depends on parameters lives on the memory's tape, so
//! a sequence processed in [`Mode::Train`] can be differentiated end to end.

mod heuristic;
mod mask;
mod output;
#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use heuristic::{
    association_linear, association_score, cosine, heuristic_distribution, majority_class, score_tracks_average,
    PairCues,
};
pub use mask::{resolve_pixels, MaskHead, MaskInput, EMBED_CHANNELS, HIDDEN_CHANNELS, INPUT_CHANNELS};
pub use output::{read_tracks, save_tracks_json, load_tracks_json, write_tracks, TrackFrameJson, TrackJson, TracksFile};

use crate::appearance::{log_likelihood_tape, update_tape, GaussianAppearance, RateHead};
use crate::assocgraph::{
    argmax_first, detection_embedding, empty_edge_features, iou, AssociationMode, GateMode, GnnParams, GraphInput,
    ModelConfig, ScoringMode, EDGE_FEATURES, MAX_DETECTIONS, MAX_TRACKS,
};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::numcore::{Linear, ParamStore, Tape, Tensor, Var};
use crate::recurrence::{GateParams, RecurrentState, SimpleGate};
use crate::synthworld::{kept_indices, Detection};

/// Bound applied to the per-dimension appearance log-likelihood edge feature.
pub const LOG_LIKELIHOOD_BOUND: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub init_train: f64,
    pub init_infer: f64,
    pub match_active: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            init_train: 0.31,
            init_infer: 0.13,
            match_active: 0.31,
        }
    }
}

impl Thresholds {
    pub fn init(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Train => self.init_train,
            Mode::Infer => self.init_infer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// All learnable parts of the tracker. Only the parts the configuration uses
/// are registered in the store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub gnn: GnnParams,
    pub lstm: Option<GateParams>,
    pub simple: Option<SimpleGate>,
    pub rates: Option<RateHead>,
    pub score: Option<Linear>,
    pub mask: MaskHead,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let gnn = GnnParams::new(&mut store, &config, &mut rng)?;
        let lstm = match config.gate {
            GateMode::Lstm => Some(GateParams::new(&mut store, "gate", d, &mut rng)?),
            _ => None,
        };
        let simple = match config.gate {
            GateMode::Simple => Some(SimpleGate::new(&mut store, "simple_gate", d, &mut rng)?),
            _ => None,
        };
        let rates = if config.use_appearance {
            Some(RateHead::new(&mut store, "rates", d, &mut rng)?)
        } else {
            None
        };
        let score = match config.scoring {
            ScoringMode::Learned => Some(Linear::new(&mut store, "score", d, config.num_classes + 1, &mut rng)?),
            ScoringMode::Heuristic => None,
        };
        let mask = MaskHead::new(&mut store, "mask", d, &mut rng)?;
        Ok(Self {
            config,
            store,
            gnn,
            lstm,
            simple,
            rates,
            score,
            mask,
        })
    }

    fn check_detection(&self, det: &Detection) -> Result<()> {
        let c = &self.config;
        if det.scores.len() != c.num_classes + 1 {
            return Err(Error::invalid(format!(
                "detection has {} scores, model expects {}",
                det.scores.len(),
                c.num_classes + 1
            )));
        }
        if det.appearance.len() != c.appearance_dim {
            return Err(Error::invalid(format!(
                "detection appearance has {} dims, model expects {}",
                det.appearance.len(),
                c.appearance_dim
            )));
        }
        if det.mask.size() != c.grid {
            return Err(Error::invalid(format!(
                "detection mask is {}×{0}, model grid is {}",
                det.mask.size(),
                c.grid
            )));
        }
        Ok(())
    }
}

/// One frame of a track's history. Inactive frames carry no box or mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub t: usize,
    pub active: bool,
    /// Index into the (truncated) detection list of the frame.
    pub matched: Option<usize>,
    pub bbox: Option<BBox>,
    /// Cells this track owns after reweighting.
    pub mask: Option<Mask>,
    /// Distribution over `C + 1` classes, background last.
    pub scores: Vec<f64>,
}

/// Tape handles of a track's state.
#[derive(Clone, Copy, Debug)]
pub struct TrackVars {
    /// `[1, D]`.
    pub y: Var,
    pub c: Option<Var>,
    /// `[1, A]` each.
    pub mu: Option<Var>,
    pub sigma: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct TrackState {
    pub id: u32,
    pub birth_frame: usize,
    pub last_box: BBox,
    pub active: bool,
    /// Training label inherited from the initializing detection.
    pub identity: Option<u32>,
    pub records: Vec<FrameRecord>,
    pub vars: TrackVars,
    pub matched_confidences: Vec<f64>,
    pub matched_classes: Vec<usize>,
}

/// Tracks of one sequence together with the tape holding their state.
#[derive(Debug)]
pub struct TrackMemory {
    pub tape: Tape,
    pub tracks: Vec<TrackState>,
    /// Index of the next frame to process.
    pub frame: usize,
    next_id: u32,
}

impl Default for TrackMemory {
    fn default() -> Self {
        Self::new()
    }
}

impl TrackMemory {
    pub fn new() -> Self {
        Self {
            tape: Tape::new(),
            tracks: Vec::new(),
            frame: 0,
            next_id: 0,
        }
    }

    /// Memory that records onto an existing tape.
    pub fn with_tape(tape: Tape) -> Self {
        Self {
            tape,
            ..Self::new()
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn embedding(&self, track: usize) -> &[f64] {
        self.tape.value(self.tracks[track].vars.y).data()
    }

    pub fn recurrent(&self, track: usize) -> RecurrentState {
        let v = &self.tracks[track].vars;
        let y = self.tape.value(v.y).data().to_vec();
        let c = match v.c {
            Some(c) => self.tape.value(c).data().to_vec(),
            None => vec![0.0; y.len()],
        };
        RecurrentState { y, c }
    }

    pub fn appearance(&self, track: usize) -> Option<GaussianAppearance> {
        let v = &self.tracks[track].vars;
        Some(GaussianAppearance {
            mu: self.tape.value(v.mu?).data().to_vec(),
            sigma: self.tape.value(v.sigma?).data().to_vec(),
        })
    }

    /// Replaces the tape with one holding only the current track state as
    /// constants, dropping the history of earlier frames.
    pub fn detach(&mut self) {
        let old = std::mem::take(&mut self.tape);
        let copy = |tape: &mut Tape, v: Var| tape.constant(old.value(v).clone());
        for t in &mut self.tracks {
            let v = &mut t.vars;
            v.y = copy(&mut self.tape, v.y);
            v.c = v.c.map(|c| copy(&mut self.tape, c));
            v.mu = v.mu.map(|m| copy(&mut self.tape, m));
            v.sigma = v.sigma.map(|s| copy(&mut self.tape, s));
        }
    }
}

/// Everything one frame produced, including the tape handles a loss needs.
#[derive(Clone, Debug, Default)]
pub struct FrameOutput {
    pub t: usize,
    /// Detections after truncation, as indices into the input frame.
    pub kept: Vec<usize>,
    /// Tracks that existed before this frame (`memory.tracks[..existing]`).
    pub existing: usize,
    /// `[existing · N, 1]` track-major, for learned association.
    pub match_prob: Option<Var>,
    /// `[N, 1]`, for learned association.
    pub init_prob: Option<Var>,
    pub match_values: Vec<f64>,
    pub init_values: Vec<f64>,
    /// Best detection of each existing track when active.
    pub matches: Vec<Option<usize>>,
    /// `(track index, detection index)` of every track born this frame.
    pub spawned: Vec<(usize, usize)>,
    /// `[K, C + 1]` class distributions of all `K` tracks, learned scoring only.
    pub score_probs: Option<Var>,
    /// `[G², k]` reweighting logits of the tracks listed in `mask_tracks`.
    pub mask_logits: Option<Var>,
    pub mask_tracks: Vec<usize>,
    /// Owning track id per cell.
    pub instance_map: Vec<Option<u32>>,
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(17)
}

/// Processes one frame. Detections beyond capacity are reduced to the
/// highest-scoring [`MAX_DETECTIONS`]; once [`MAX_TRACKS`] tracks exist no
/// further tracks are started.
pub fn step(
    memory: &mut TrackMemory,
    frame: &[Detection],
    model: &Model,
    thresholds: &Thresholds,
    mode: Mode,
) -> Result<FrameOutput> {
    step_with_params(memory, frame, model, &model.store, thresholds, mode)
}

/// [`step`] with parameter values taken from `store` instead of the model's
/// own store; `store` must share the model's layout.
pub fn step_with_params(
    memory: &mut TrackMemory,
    frame: &[Detection],
    model: &Model,
    store: &ParamStore,
    thresholds: &Thresholds,
    mode: Mode,
) -> Result<FrameOutput> {
    if memory.tracks.len() > MAX_TRACKS {
        return Err(Error::Capacity(format!(
            "memory holds {} tracks, capacity is {MAX_TRACKS}",
            memory.tracks.len()
        )));
    }
    for det in frame {
        model.check_detection(det)?;
    }
    if mode == Mode::Infer {
        memory.detach();
    }
    let cfg = &model.config;
    let t = memory.frame;
    let kept = if frame.len() > MAX_DETECTIONS {
        kept_indices(frame, MAX_DETECTIONS)
    } else {
        (0..frame.len()).collect()
    };
    let dets: Vec<&Detection> = kept.iter().map(|&i| &frame[i]).collect();
    let (m, n) = (memory.tracks.len(), dets.len());
    let (d, a) = (cfg.d, cfg.appearance_dim);

    let tape = &mut memory.tape;
    // graph input
    let tau0 = tape.constant(Tensor::zeros(&[1, d]));
    let mut rows = vec![tau0];
    rows.extend(memory.tracks.iter().map(|tr| tr.vars.y));
    let tracks_in = tape.concat_rows(&rows)?;
    let det_data: Vec<f64> = dets.iter().flat_map(|det| detection_embedding(det)).collect();
    let dets_in = tape.constant(Tensor::matrix(n, cfg.det_in(), det_data));
    let empty: Vec<f64> = dets.iter().flat_map(|det| empty_edge_features(det)).collect();
    let mut edge_parts = vec![tape.constant(Tensor::matrix(n, EDGE_FEATURES, empty))];
    if m > 0 && n > 0 {
        let ious: Vec<f64> = memory
            .tracks
            .iter()
            .flat_map(|tr| dets.iter().map(move |det| iou(&tr.last_box, &det.bbox)))
            .collect();
        let iou_col = tape.constant(Tensor::matrix(m * n, 1, ious));
        let ll_col = if cfg.use_appearance {
            let x = tape.constant(Tensor::matrix(n, a, dets.iter().flat_map(|det| det.appearance.clone()).collect()));
            let mut parts = Vec::with_capacity(m);
            for tr in &memory.tracks {
                let (mu, sigma) = (tr.vars.mu.expect("appearance state"), tr.vars.sigma.expect("appearance state"));
                let mu = tape.gather_rows(mu, vec![Some(0); n])?;
                let sigma = tape.gather_rows(sigma, vec![Some(0); n])?;
                parts.push(log_likelihood_tape(tape, mu, sigma, x)?);
            }
            let ll = tape.concat_rows(&parts)?;
            let ll = tape.scale(ll, 1.0 / a as f64);
            tape.clamp(ll, -LOG_LIKELIHOOD_BOUND, LOG_LIKELIHOOD_BOUND)
        } else {
            tape.constant(Tensor::zeros(&[m * n, 1]))
        };
        edge_parts.push(tape.concat_cols(&[ll_col, iou_col])?);
    }
    let edges_in = tape.concat_rows(&edge_parts)?;
    let out = model.gnn.forward(
        tape,
        store,
        &GraphInput {
            tracks: tracks_in,
            dets: dets_in,
            edges: edges_in,
            num_tracks: m,
            num_dets: n,
        },
    )?;

    // association and initialization decisions
    let mut result = FrameOutput {
        t,
        kept,
        existing: m,
        ..FrameOutput::default()
    };
    let mut matches = vec![None; m];
    let mut spawn_dets = Vec::new();
    let mut word = 0xcbf2_9ce4_8422_2325u64;
    match cfg.association {
        AssociationMode::Learned => {
            let mp = tape.value(out.match_prob).data().to_vec();
            let ip = tape.value(out.init_prob).data().to_vec();
            for (i, slot) in matches.iter_mut().enumerate() {
                let row = &mp[i * n..(i + 1) * n];
                if let Some(best) = argmax_first(row) {
                    if row[best] >= thresholds.match_active {
                        *slot = Some(best);
                    }
                }
                word = mix(word, slot.map_or(u64::MAX, |b| b as u64));
            }
            let th = thresholds.init(mode);
            for (k, &p) in ip.iter().enumerate() {
                if p >= th {
                    spawn_dets.push(k);
                }
            }
            result.match_prob = Some(out.match_prob);
            result.init_prob = Some(out.init_prob);
            result.match_values = mp;
            result.init_values = ip;
        }
        AssociationMode::Heuristic => {
            let h = &cfg.heuristic;
            let mut scores = vec![vec![0.0; n]; m];
            for (i, tr) in memory.tracks.iter().enumerate() {
                let mu = match (cfg.use_appearance, tr.vars.mu) {
                    (true, Some(mu)) => Some(tape.value(mu).data().to_vec()),
                    _ => None,
                };
                let class = tr.matched_classes.last().copied();
                for (k, det) in dets.iter().enumerate() {
                    let (det_class, conf) = det.top_foreground();
                    let cues = PairCues {
                        appearance_cosine: mu.as_ref().map_or(0.0, |mu| cosine(mu, &det.appearance)),
                        iou: iou(&tr.last_box, &det.bbox),
                        same_class: class == Some(det_class),
                        confidence: conf,
                    };
                    scores[i][k] = association_score(&cues, &h.weights);
                }
            }
            matches = association_linear(&scores, h);
            let mut taken = vec![false; n];
            let mut mv = vec![0.0; m * n];
            for (i, mt) in matches.iter().enumerate() {
                if let Some(k) = *mt {
                    taken[k] = true;
                    mv[i * n + k] = 1.0;
                }
                word = mix(word, mt.map_or(u64::MAX, |b| b as u64));
            }
            let mut iv = vec![0.0; n];
            for (k, det) in dets.iter().enumerate() {
                let conf = det.top_foreground().1;
                if !taken[k] && conf >= h.init_confidence {
                    iv[k] = conf;
                    spawn_dets.push(k);
                }
            }
            result.match_values = mv;
            result.init_values = iv;
        }
    }
    let room = MAX_TRACKS.saturating_sub(m);
    spawn_dets.truncate(room);
    for &k in &spawn_dets {
        word = mix(word, 0x1000 + k as u64);
    }
    tape.record_branch(word);

    // recurrent update of existing tracks
    if m > 0 {
        let tau = tape.slice_rows(out.tracks, 1, m)?;
        let (y_next, c_next) = match cfg.gate {
            GateMode::Lstm => {
                let lstm = model.lstm.as_ref().expect("lstm gate registered");
                let cs: Vec<Var> = memory.tracks.iter().map(|tr| tr.vars.c.expect("cell state")).collect();
                let c = tape.concat_rows(&cs)?;
                let (y, c) = lstm.forward(tape, store, tau, c)?;
                (y, Some(c))
            }
            GateMode::Simple => {
                let g = model.simple.as_ref().expect("simple gate registered");
                (g.forward(tape, store, tau)?, None)
            }
            GateMode::None => (tau, None),
        };
        for (i, tr) in memory.tracks.iter_mut().enumerate() {
            tr.vars.y = tape.slice_rows(y_next, i, 1)?;
            tr.vars.c = match c_next {
                Some(c) => Some(tape.slice_rows(c, i, 1)?),
                None => None,
            };
        }
    }

    // appearance update of active existing tracks
    if let Some(rates) = &model.rates {
        let sigma_tilde = vec![cfg.sigma_tilde; a];
        for (i, mt) in matches.iter().enumerate() {
            let Some(k) = *mt else { continue };
            let tr = &mut memory.tracks[i];
            let (mu, sigma) = (tr.vars.mu.expect("appearance state"), tr.vars.sigma.expect("appearance state"));
            let (kappa, nu) = rates.forward(tape, store, tr.vars.y)?;
            let x = tape.constant(Tensor::matrix(1, a, dets[k].appearance.clone()));
            let (mu_next, sigma_next) = update_tape(tape, mu, sigma, x, kappa, nu, &sigma_tilde)?;
            tr.vars.mu = Some(mu_next);
            if !cfg.const_variance {
                tr.vars.sigma = Some(sigma_next);
            }
        }
    }

    for (i, mt) in matches.iter().enumerate() {
        let tr = &mut memory.tracks[i];
        tr.active = mt.is_some();
        if let Some(k) = *mt {
            tr.last_box = dets[k].bbox;
            let (class, conf) = dets[k].top_foreground();
            tr.matched_classes.push(class);
            tr.matched_confidences.push(conf);
        }
    }

    // new tracks
    for &k in &spawn_dets {
        let det = dets[k];
        let delta = tape.slice_rows(out.dets, k, 1)?;
        let y = tape.tanh(delta);
        let c = (cfg.gate == GateMode::Lstm).then(|| tape.constant(Tensor::zeros(&[1, d])));
        let (mu, sigma) = if cfg.use_appearance {
            (
                Some(tape.constant(Tensor::matrix(1, a, det.appearance.clone()))),
                Some(tape.constant(Tensor::filled(&[1, a], cfg.sigma0))),
            )
        } else {
            (None, None)
        };
        let (class, conf) = det.top_foreground();
        result.spawned.push((memory.tracks.len(), k));
        memory.tracks.push(TrackState {
            id: memory.next_id,
            birth_frame: t,
            last_box: det.bbox,
            active: true,
            identity: None,
            records: Vec::new(),
            vars: TrackVars { y, c, mu, sigma },
            matched_confidences: vec![conf],
            matched_classes: vec![class],
        });
        memory.next_id += 1;
    }
    let total = memory.tracks.len();

    // scoring
    let scores: Vec<Vec<f64>> = match &model.score {
        Some(head) if total > 0 => {
            let ys: Vec<Var> = memory.tracks.iter().map(|tr| tr.vars.y).collect();
            let y = tape.concat_rows(&ys)?;
            let logits = head.forward(tape, store, y)?;
            let probs = tape.softmax(logits);
            result.score_probs = Some(probs);
            let v = tape.value(probs);
            (0..total).map(|r| v.row(r).to_vec()).collect()
        }
        _ => memory
            .tracks
            .iter()
            .map(|tr| heuristic_distribution(&tr.matched_confidences, &tr.matched_classes, cfg.num_classes))
            .collect(),
    };

    // mask reweighting
    let mut det_of: Vec<Option<usize>> = matches.clone();
    det_of.resize(total, None);
    for &(i, k) in &result.spawned {
        det_of[i] = Some(k);
    }
    let mask_tracks: Vec<usize> = (0..total).filter(|&i| det_of[i].is_some()).collect();
    let cells = cfg.grid * cfg.grid;
    let mut owners = vec![None; cells];
    if !mask_tracks.is_empty() {
        let inputs: Vec<MaskInput<'_>> = mask_tracks
            .iter()
            .map(|&i| {
                let det = dets[det_of[i].expect("active track")];
                MaskInput {
                    embedding: memory.tracks[i].vars.y,
                    mask: &det.mask,
                    bbox: &det.bbox,
                }
            })
            .collect();
        let logits = model.mask.forward(tape, store, &inputs, cfg.grid)?;
        owners = resolve_pixels(tape.value(logits));
        result.mask_logits = Some(logits);
    }
    result.instance_map = owners
        .iter()
        .map(|o| o.map(|j| memory.tracks[mask_tracks[j]].id))
        .collect();

    for (i, tr) in memory.tracks.iter_mut().enumerate() {
        let record = match det_of[i] {
            Some(k) => {
                let j = mask_tracks.iter().position(|&x| x == i).expect("mask track");
                let cells: Vec<u8> = owners.iter().map(|o| u8::from(*o == Some(j))).collect();
                FrameRecord {
                    t,
                    active: true,
                    matched: Some(k),
                    bbox: Some(dets[k].bbox),
                    mask: Some(Mask::from_cells(cfg.grid, cells)?),
                    scores: scores[i].clone(),
                }
            }
            None => FrameRecord {
                t,
                active: false,
                matched: None,
                bbox: None,
                mask: None,
                scores: scores[i].clone(),
            },
        };
        tr.records.push(record);
    }
    result.matches = matches;
    result.mask_tracks = mask_tracks;
    memory.frame += 1;
    Ok(result)
}

/// Runs a whole detection sequence in inference mode.
pub fn track_sequence(model: &Model, frames: &[Vec<Detection>], thresholds: &Thresholds) -> Result<TrackMemory> {
    let mut memory = TrackMemory::new();
    for frame in frames {
        step(&mut memory, frame, model, thresholds, Mode::Infer)?;
    }
    memory.detach();
    Ok(memory)
}
