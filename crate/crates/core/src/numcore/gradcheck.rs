use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors: gradients smaller than this are
/// compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose ±ε perturbation crossed a branch (ReLU kink, argmax
    /// flip, sort reorder), where the central difference is not a derivative.
    pub skipped: usize,
}

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` records a scalar on the supplied tape using parameters from the store
/// it receives. It must be deterministic.
pub fn grad_check<F>(store: &ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let out = f(s, &mut tape)?;
        Ok((tape.value(out).item(), tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    let base_sig = tape.branch_signature();
    let analytic = tape.backward(out)?.to_param_grads(store);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + opts.epsilon;
            let (plus, sig_p) = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - opts.epsilon;
            let (minus, sig_m) = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            if sig_p != base_sig || sig_m != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic.get(id).data()[k];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}[{k}]", store.name(id))));
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = format!("{}[{k}]", store.name(id));
            }
        }
    }
    Ok(report)
}
