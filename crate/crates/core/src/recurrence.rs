//! LSTM-style gating of the network's track outputs, carrying a cell state
//! per track across frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assocgraph::GateMode;
use crate::error::{Error, Result};
use crate::numcore::{Linear, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    /// Track embedding, each entry in (−1, 1).
    pub y: Vec<f64>,
    pub c: Vec<f64>,
}

/// Forget, input, output and cell maps, each `D → D`.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub forget: Linear,
    pub input: Linear,
    pub output: Linear,
    pub cell: Linear,
}

impl GateParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            forget: Linear::new(store, &format!("{name}.forget"), d, d, rng)?,
            input: Linear::new(store, &format!("{name}.input"), d, d, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, rng)?,
            cell: Linear::new(store, &format!("{name}.cell"), d, d, rng)?,
        })
    }

    /// Row-wise step on the tape for `τ̃, c: [R, D]`; returns `(y⁺, c⁺)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tau_tilde: Var, c: Var) -> Result<(Var, Var)> {
        let f = self.forget.forward(tape, store, tau_tilde)?;
        let f = tape.sigmoid(f);
        let i = self.input.forward(tape, store, tau_tilde)?;
        let i = tape.sigmoid(i);
        let o = self.output.forward(tape, store, tau_tilde)?;
        let o = tape.sigmoid(o);
        let g = self.cell.forward(tape, store, tau_tilde)?;
        let g = tape.tanh(g);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let y = tape.mul(o, tc)?;
        Ok((y, c_next))
    }
}

fn row(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::matrix(1, v.len(), v.to_vec()))
}

/// `c⁺ = α_f⊙c + α_i⊙tanh(h_cell τ̃)`, `y⁺ = α_o⊙tanh(c⁺)`.
pub fn gate_step(
    params: &GateParams,
    store: &ParamStore,
    tau_tilde: &[f64],
    state: &RecurrentState,
) -> Result<RecurrentState> {
    if tau_tilde.len() != state.c.len() {
        return Err(Error::Shape {
            op: "gate_step",
            left: vec![tau_tilde.len()],
            right: vec![state.c.len()],
        });
    }
    let mut tape = Tape::new();
    let t = row(&mut tape, tau_tilde);
    let c = row(&mut tape, &state.c);
    let (y, c) = params.forward(&mut tape, store, t, c)?;
    Ok(RecurrentState {
        y: tape.value(y).data().to_vec(),
        c: tape.value(c).data().to_vec(),
    })
}

/// Birth state from a detection's network output: `y = tanh(δ)`, `c = 0`.
pub fn new_track_state(delta_out: &[f64]) -> RecurrentState {
    RecurrentState {
        y: delta_out.iter().map(|v| v.tanh()).collect(),
        c: vec![0.0; delta_out.len()],
    }
}

/// Single-gate ablation: `y⁺ = σ(h τ̃) ⊙ tanh(τ̃)`, no state.
#[derive(Clone, Copy, Debug)]
pub struct SimpleGate {
    pub h: Linear,
}

impl SimpleGate {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            h: Linear::new(store, name, d, d, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tau_tilde: Var) -> Result<Var> {
        let a = self.h.forward(tape, store, tau_tilde)?;
        let a = tape.sigmoid(a);
        let t = tape.tanh(tau_tilde);
        tape.mul(a, t)
    }
}

pub fn simple_gate_step(gate: &SimpleGate, store: &ParamStore, tau_tilde: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let t = row(&mut tape, tau_tilde);
    let y = gate.forward(&mut tape, store, t)?;
    Ok(tape.value(y).data().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub steps_run: usize,
    pub max_abs_y: f64,
    /// Largest `|c_t| − t` over the run (the cell bound says ≤ `|c_0|`).
    pub max_cell_excess: f64,
    /// First step whose output was non-finite or exceeded `1e12`.
    pub diverged_at: Option<usize>,
}

/// Drives a recurrence `τ̃ₜ = W·yₜ₋₁ + xₜ` with random inputs `xₜ` and fixed
/// random weights scaled by `weight_scale`, then applies the chosen gate.
/// Divergence is reported rather than raised.
pub fn stability_run(mode: GateMode, d: usize, steps: usize, weight_scale: f64, seed: u64) -> Result<StabilityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lstm = GateParams::new(&mut store, "gate", d, &mut rng)?;
    let simple = SimpleGate::new(&mut store, "simple", d, &mut rng)?;
    let flat: Vec<f64> = store.to_flat().iter().map(|w| w * weight_scale).collect();
    store.set_flat(&flat)?;
    let w: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0) * weight_scale).collect();

    let mut y = vec![0.0; d];
    let mut c = vec![0.0; d];
    let c0 = 0.0f64;
    let mut report = StabilityReport {
        steps_run: 0,
        max_abs_y: 0.0,
        max_cell_excess: f64::NEG_INFINITY,
        diverged_at: None,
    };
    for t in 1..=steps {
        let tau: Vec<f64> = (0..d)
            .map(|r| {
                let wy: f64 = (0..d).map(|k| w[r * d + k] * y[k]).sum();
                wy + rng.gen_range(-1.0..1.0)
            })
            .collect();
        y = match mode {
            GateMode::Lstm => {
                let s = gate_step(&lstm, &store, &tau, &RecurrentState { y, c })?;
                c = s.c;
                s.y
            }
            GateMode::Simple => simple_gate_step(&simple, &store, &tau)?,
            GateMode::None => tau,
        };
        report.steps_run = t;
        let max_y = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if y.iter().any(|v| !v.is_finite()) || max_y > 1e12 {
            report.diverged_at = Some(t);
            report.max_abs_y = f64::INFINITY;
            return Ok(report);
        }
        report.max_abs_y = report.max_abs_y.max(max_y);
        let c_norm = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        report.max_cell_excess = report.max_cell_excess.max(c_norm - c0 - t as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, GradCheckOptions};

    fn zero_gate(d: usize) -> (ParamStore, GateParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GateParams::new(&mut store, "gate", d, &mut rng).unwrap();
        store.set_flat(&vec![0.0; store.num_scalars()]).unwrap();
        (store, g)
    }

    #[test]
    fn zero_params_cases() {
        let (store, g) = zero_gate(3);
        let s = gate_step(&g, &store, &[0.4, -1.0, 2.0], &RecurrentState { y: vec![0.0; 3], c: vec![0.0; 3] }).unwrap();
        assert_eq!(s.c, vec![0.0; 3]);
        assert_eq!(s.y, vec![0.0; 3]);
        let s = gate_step(&g, &store, &[0.4, -1.0, 2.0], &RecurrentState { y: vec![0.0; 3], c: vec![2.0; 3] }).unwrap();
        assert_eq!(s.c, vec![1.0; 3]);
        for y in s.y {
            assert!((y - 0.5 * 1f64.tanh()).abs() < 1e-15);
            assert!((y - 0.380_797_077_977_882_4).abs() < 1e-12);
        }
    }

    #[test]
    fn birth_state() {
        let s = new_track_state(&[0.0, 0.0]);
        assert_eq!(s, RecurrentState { y: vec![0.0; 2], c: vec![0.0; 2] });
        let s = new_track_state(&[50.0, -3.0, 0.2]);
        assert!(s.y.iter().all(|v| v.abs() <= 1.0));
        assert!(s.y[1].abs() < 1.0 && s.y[2].abs() < 1.0);
    }

    #[test]
    fn fuzzed_steps_from_birth_stay_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let g = GateParams::new(&mut store, "gate", 6, &mut rng).unwrap();
        for _ in 0..10_000 {
            let delta: Vec<f64> = (0..6).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let tau: Vec<f64> = (0..6).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let s = gate_step(&g, &store, &tau, &new_track_state(&delta)).unwrap();
            assert!(s.y.iter().all(|v| v.is_finite() && v.abs() < 1.0));
            assert!(s.c.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn simple_gate_cases() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = SimpleGate::new(&mut store, "simple", 3, &mut rng).unwrap();
        assert_eq!(simple_gate_step(&g, &store, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        // straight-line oracle
        let tau = [0.3, -0.8, 1.7];
        let w = store.get(g.h.weight).clone();
        let want: Vec<f64> = (0..3)
            .map(|r| {
                let z: f64 = (0..3).map(|k| w.row(r)[k] * tau[k]).sum();
                tau[r].tanh() / (1.0 + (-z).exp())
            })
            .collect();
        let got = simple_gate_step(&g, &store, &tau).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
        store.set_flat(&vec![0.0; store.num_scalars()]).unwrap();
        let got = simple_gate_step(&g, &store, &tau).unwrap();
        for (a, t) in got.iter().zip(tau) {
            assert_eq!(*a, 0.5 * t.tanh());
        }
    }

    #[test]
    fn lstm_run_is_stable_and_gate_free_diverges() {
        let r = stability_run(GateMode::Lstm, 8, 2000, 3.0, 1).unwrap();
        assert_eq!(r.diverged_at, None);
        assert!(r.max_abs_y < 1.0);
        assert!(r.max_cell_excess <= 0.0);
        let r = stability_run(GateMode::None, 8, 2000, 3.0, 1).unwrap();
        assert!(r.diverged_at.is_some());
    }

    #[test]
    fn unrolled_gradients_pass_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let g = GateParams::new(&mut store, "gate", 4, &mut rng).unwrap();
        let proj = Linear::new(&mut store, "proj", 4, 4, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let report = grad_check(&store, &GradCheckOptions::default(), |s, tape| {
            let mut y = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]));
            let mut c = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]));
            for x in &xs {
                let x = tape.constant(Tensor::matrix(1, 4, x.clone()));
                let h = proj.forward(tape, s, y)?;
                let tau = tape.add(h, x)?;
                let (y2, c2) = g.forward(tape, s, tau, c)?;
                y = y2;
                c = c2;
            }
            let a = tape.sum(y);
            let b = tape.sum(c);
            tape.add(a, b)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
