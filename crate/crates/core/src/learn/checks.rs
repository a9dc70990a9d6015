//! Named finite-difference checks over every parameterized part of the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{bce_sum, lovasz_softmax, sequence_loss_on, weighted_cross_entropy, TrainConfig};
use crate::appearance::{log_likelihood_tape, update_tape, RateHead};
use crate::assocgraph::{GnnParams, GraphInput, ModelConfig, EDGE_FEATURES};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::numcore::{grad_check, GradCheckOptions, GradCheckReport, Linear, ParamStore, Tape, Tensor, Var};
use crate::recurrence::{GateParams, SimpleGate};
use crate::synthworld::{SuiteConfig, WorldConfig};
use crate::trackman::{MaskHead, MaskInput, Model, Thresholds};

pub const GRADCHECK_TARGETS: [&str; 12] = [
    "gnn",
    "gnn_limited",
    "gnn_mlp",
    "gate",
    "simple_gate",
    "appearance",
    "mask_head",
    "loss_score",
    "loss_seg",
    "loss_match",
    "loss_init",
    "full_step",
];

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

struct Graph {
    tracks: Tensor,
    dets: Tensor,
    edges: Tensor,
    m: usize,
    n: usize,
}

impl Graph {
    fn random(cfg: &ModelConfig, m: usize, n: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            tracks: random(rng, 1 + m, cfg.d),
            dets: random(rng, n, cfg.det_in()),
            edges: random(rng, (1 + m) * n, EDGE_FEATURES),
            m,
            n,
        }
    }

    fn input(&self, tape: &mut Tape) -> GraphInput {
        GraphInput {
            tracks: tape.constant(self.tracks.clone()),
            dets: tape.constant(self.dets.clone()),
            edges: tape.constant(self.edges.clone()),
            num_tracks: self.m,
            num_dets: self.n,
        }
    }
}

fn gnn_check(cfg: ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = GnnParams::new(&mut store, &cfg, &mut rng)?;
    let g = Graph::random(&cfg, 2, 3, &mut rng);
    grad_check(&store, opts, |s, tape| {
        let input = g.input(tape);
        let out = p.forward(tape, s, &input)?;
        let a = tape.sum(out.match_prob);
        let b = tape.sum(out.init_prob);
        let t = tape.tanh(out.tracks);
        let c = tape.sum(t);
        tape.add_all(&[a, b, c])
    })
}

fn bce_head_check(init: bool, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        d: 8,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = GnnParams::new(&mut store, &cfg, &mut rng)?;
    let g = Graph::random(&cfg, 2, 3, &mut rng);
    let rows = if init { 3 } else { 6 };
    let targets: Vec<f64> = (0..rows).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
    grad_check(&store, opts, |s, tape| {
        let input = g.input(tape);
        let out = p.forward(tape, s, &input)?;
        bce_sum(tape, if init { out.init_prob } else { out.match_prob }, &targets)
    })
}

fn gate_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let g = GateParams::new(&mut store, "gate", 4, &mut rng)?;
    let proj = Linear::new(&mut store, "proj", 4, 4, &mut rng)?;
    let xs: Vec<Tensor> = (0..10).map(|_| random(&mut rng, 2, 4)).collect();
    grad_check(&store, opts, |s, tape| {
        let mut y = tape.constant(Tensor::zeros(&[2, 4]));
        let mut c = tape.constant(Tensor::zeros(&[2, 4]));
        for x in &xs {
            let x = tape.constant(x.clone());
            let h = proj.forward(tape, s, y)?;
            let tau = tape.add(h, x)?;
            (y, c) = g.forward(tape, s, tau, c)?;
        }
        let a = tape.sum(y);
        let b = tape.sum(c);
        tape.add(a, b)
    })
}

fn simple_gate_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let g = SimpleGate::new(&mut store, "simple", 4, &mut rng)?;
    let xs: Vec<Tensor> = (0..6).map(|_| random(&mut rng, 2, 4)).collect();
    grad_check(&store, opts, |s, tape| {
        let mut y = tape.constant(Tensor::zeros(&[2, 4]));
        for x in &xs {
            let x = tape.constant(x.clone());
            let tau = tape.add(y, x)?;
            y = g.forward(tape, s, tau)?;
        }
        Ok(tape.sum(y))
    })
}

fn appearance_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = RateHead::new(&mut store, "rates", 4, &mut rng)?;
    let emb = random(&mut rng, 2, 4);
    let mu = random(&mut rng, 2, 3);
    let x = random(&mut rng, 2, 3);
    let query = random(&mut rng, 2, 3);
    grad_check(&store, opts, |s, tape| {
        let y = tape.constant(emb.clone());
        let (k, n) = head.forward(tape, s, y)?;
        let mu_v = tape.constant(mu.clone());
        let s_v = tape.constant(Tensor::filled(&[2, 3], 0.1));
        let x_v = tape.constant(x.clone());
        let (mu2, s2) = update_tape(tape, mu_v, s_v, x_v, k, n, &[0.0; 3])?;
        let q = tape.constant(query.clone());
        let ll = log_likelihood_tape(tape, mu2, s2, q)?;
        Ok(tape.sum(ll))
    })
}

struct MaskFixture {
    head: MaskHead,
    store: ParamStore,
    emb: Tensor,
    masks: Vec<Mask>,
    boxes: Vec<BBox>,
    grid: usize,
}

impl MaskFixture {
    fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let head = MaskHead::new(&mut store, "mask", 6, &mut rng)?;
        let grid = 5;
        let boxes = vec![BBox::new(0.3, 0.4, 0.4, 0.5), BBox::new(0.65, 0.6, 0.5, 0.4)];
        let masks = boxes.iter().map(|b| Mask::ellipse(b, grid)).collect();
        Ok(Self {
            head,
            store,
            emb: random(&mut rng, 2, 6),
            masks,
            boxes,
            grid,
        })
    }

    fn logits(&self, tape: &mut Tape, s: &ParamStore) -> Result<Var> {
        let inputs: Vec<MaskInput<'_>> = (0..2)
            .map(|i| {
                let row = Tensor::matrix(1, 6, self.emb.row(i).to_vec());
                MaskInput {
                    embedding: tape.constant(row),
                    mask: &self.masks[i],
                    bbox: &self.boxes[i],
                }
            })
            .collect();
        self.head.forward(tape, s, &inputs, self.grid)
    }
}

fn mask_head_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let f = MaskFixture::new(seed)?;
    let weights = Tensor::matrix(f.grid * f.grid, 2, (0..2 * f.grid * f.grid).map(|i| ((i * 7) % 5) as f64 - 2.0).collect());
    grad_check(&f.store, opts, |s, tape| {
        let l = f.logits(tape, s)?;
        let l = tape.tanh(l);
        tape.dot_const(l, weights.clone())
    })
}

fn seg_loss_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let f = MaskFixture::new(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let labels: Vec<usize> = (0..f.grid * f.grid).map(|_| rng.gen_range(0..3)).collect();
    grad_check(&f.store, opts, |s, tape| {
        let l = f.logits(tape, s)?;
        let bg = tape.constant(Tensor::zeros(&[f.grid * f.grid, 1]));
        let all = tape.concat_cols(&[bg, l])?;
        let p = tape.softmax(all);
        lovasz_softmax(tape, p, &labels)
    })
}

fn score_loss_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "score", 8, 4, &mut rng)?;
    let y = random(&mut rng, 3, 8);
    let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
    let weights: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
    grad_check(&store, opts, |s, tape| {
        let y = tape.constant(y.clone());
        let l = head.forward(tape, s, y)?;
        let p = tape.softmax(l);
        weighted_cross_entropy(tape, p, &labels, &weights)
    })
}

/// Three-frame world used for the full-step check.
pub fn gradcheck_train_config() -> TrainConfig {
    TrainConfig {
        frames: 3,
        batch_size: 2,
        d: 8,
        suite: SuiteConfig {
            world: WorldConfig {
                num_classes: 3,
                frames: 3,
                min_objects: 2,
                max_objects: 2,
                grid: 6,
                appearance_dim: 4,
                ..WorldConfig::default()
            },
            ..SuiteConfig::crossing_suite()
        },
        ..TrainConfig::default()
    }
}

/// Total loss of a 3-frame unrolled sequence, every parameter of the model.
fn full_step_check(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = gradcheck_train_config();
    let model = Model::new(cfg.model_config(), seed)?;
    let seq = cfg.suite.sample(seed.wrapping_add(5))?;
    let loss_cfg = cfg.loss_config();
    let th = Thresholds::default();
    let opts = GradCheckOptions {
        max_coords_per_param: opts.max_coords_per_param.or(Some(6)),
        ..opts.clone()
    };
    grad_check(&model.store, &opts, |s, tape| sequence_loss_on(tape, &model, s, &seq, &loss_cfg, &th))
}

/// Runs one of [`GRADCHECK_TARGETS`] with central differences at ε = 1e-4.
pub fn gradcheck_target(name: &str, seed: u64) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let small = |limited_gnn, gated_aggregation| ModelConfig {
        d: 6,
        num_classes: 3,
        limited_gnn,
        gated_aggregation,
        ..ModelConfig::default()
    };
    match name {
        "gnn" => gnn_check(small(false, true), seed, &opts),
        "gnn_limited" => gnn_check(small(true, true), seed, &opts),
        "gnn_mlp" => gnn_check(small(false, false), seed, &opts),
        "gate" => gate_check(seed, &opts),
        "simple_gate" => simple_gate_check(seed, &opts),
        "appearance" => appearance_check(seed, &opts),
        "mask_head" => mask_head_check(seed, &opts),
        "loss_score" => score_loss_check(seed, &opts),
        "loss_seg" => seg_loss_check(seed, &opts),
        "loss_match" => bce_head_check(false, seed, &opts),
        "loss_init" => bce_head_check(true, seed, &opts),
        "full_step" => full_step_check(seed, &opts),
        other => Err(Error::invalid(format!(
            "unknown gradcheck target {other:?}; expected one of {}",
            GRADCHECK_TARGETS.join(", ")
        ))),
    }
}
