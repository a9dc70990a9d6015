//! Diagonal Gaussian appearance model per track, its log-likelihood and the
//! learnable conjugate-prior update.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{sigmoid, Linear, ParamStore, Tape, Tensor, Var};

/// Lower bound applied to every updated variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Variance given to a freshly initialized track.
pub const SIGMA0: f64 = 0.001;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAppearance {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianAppearance {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean at `x`, isotropic variance `sigma0`.
pub fn init_model(x: &[f64], sigma0: f64) -> Result<GaussianAppearance> {
    if !(sigma0 > 0.0) || !sigma0.is_finite() {
        return Err(Error::invalid(format!("sigma0 must be positive, got {sigma0}")));
    }
    Ok(GaussianAppearance {
        mu: x.to_vec(),
        sigma: vec![sigma0; x.len()],
    })
}

fn dim_check(model: &GaussianAppearance, x: &[f64]) -> Result<()> {
    if x.len() != model.mu.len() || model.sigma.len() != model.mu.len() {
        return Err(Error::Shape {
            op: "appearance",
            left: vec![model.mu.len()],
            right: vec![x.len()],
        });
    }
    Ok(())
}

/// `Σᵢ −½ ln(2π σᵢ) − (xᵢ − μᵢ)² / (2σᵢ)`.
pub fn log_likelihood(model: &GaussianAppearance, x: &[f64]) -> Result<f64> {
    dim_check(model, x)?;
    Ok(model
        .mu
        .iter()
        .zip(&model.sigma)
        .zip(x)
        .map(|((m, s), x)| -0.5 * (2.0 * PI * s).ln() - (x - m) * (x - m) / (2.0 * s))
        .sum())
}

/// Mean and covariance update rates.
///
/// [`UpdateRates::new`] accepts the closed unit interval so the limiting
/// cases of the update can be evaluated exactly; rates produced by a model
/// ([`UpdateRates::from_logits`]) always lie strictly inside it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateRates {
    kappa: f64,
    nu: f64,
}

const OPEN_HI: f64 = 1.0 - f64::EPSILON;

impl UpdateRates {
    pub fn new(kappa: f64, nu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kappa) || !(0.0..=1.0).contains(&nu) {
            return Err(Error::invalid(format!("rates must lie in [0, 1], got κ={kappa}, ν={nu}")));
        }
        Ok(Self { kappa, nu })
    }

    pub fn from_logits(kappa_logit: f64, nu_logit: f64) -> Self {
        let squash = |l: f64| sigmoid(l).clamp(f64::MIN_POSITIVE, OPEN_HI);
        Self {
            kappa: squash(kappa_logit),
            nu: squash(nu_logit),
        }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }
}

/// `μ⁺ = κx + (1−κ)μ`, `Σ⁺ = νΣ̃ + (1−ν)Σ + κ(1−ν)/(κ+ν)·(x−μ)²`, floored.
pub fn update(
    model: &GaussianAppearance,
    x: &[f64],
    rates: UpdateRates,
    sigma_tilde: &[f64],
) -> Result<GaussianAppearance> {
    dim_check(model, x)?;
    if sigma_tilde.len() != x.len() {
        return Err(Error::Shape {
            op: "appearance update (sigma_tilde)",
            left: vec![x.len()],
            right: vec![sigma_tilde.len()],
        });
    }
    if sigma_tilde.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::invalid("sigma_tilde must be ≥ 0"));
    }
    let (k, n) = (rates.kappa, rates.nu);
    if k + n == 0.0 {
        return Err(Error::invalid("κ + ν = 0 in appearance update"));
    }
    let frac = k * (1.0 - n) / (k + n);
    let mut mu = Vec::with_capacity(x.len());
    let mut sigma = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let d = x[i] - model.mu[i];
        mu.push(k * x[i] + (1.0 - k) * model.mu[i]);
        let s = n * sigma_tilde[i] + (1.0 - n) * model.sigma[i] + frac * d * d;
        sigma.push(s.max(VARIANCE_FLOOR));
    }
    Ok(GaussianAppearance { mu, sigma })
}

/// Logistic head mapping a track embedding to `(κ, ν)`.
#[derive(Clone, Copy, Debug)]
pub struct RateHead {
    pub linear: Linear,
}

impl RateHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, name, d, 2, rng)?,
        })
    }

    /// Rates for one embedding, evaluated without a tape.
    pub fn predict(&self, store: &ParamStore, embedding: &[f64]) -> Result<UpdateRates> {
        let w = store.get(self.linear.weight);
        let b = store.get(self.linear.bias);
        if embedding.len() != w.cols() {
            return Err(Error::Shape {
                op: "predict_rates",
                left: w.shape().to_vec(),
                right: vec![embedding.len()],
            });
        }
        let logit = |o: usize| w.row(o).iter().zip(embedding).map(|(a, b)| a * b).sum::<f64>() + b.data()[o];
        Ok(UpdateRates::from_logits(logit(0), logit(1)))
    }

    /// `(κ, ν)` as `[R, 1]` columns for embeddings `[R, D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<(Var, Var)> {
        let logits = self.linear.forward(tape, store, y)?;
        let rates = tape.sigmoid(logits);
        Ok((tape.slice_cols(rates, 0, 1)?, tape.slice_cols(rates, 1, 1)?))
    }
}

/// Row-wise log-likelihood on the tape: `[R, A]` inputs give `[R, 1]`.
pub fn log_likelihood_tape(tape: &mut Tape, mu: Var, sigma: Var, x: Var) -> Result<Var> {
    let ln_s = tape.ln(sigma);
    let d = tape.sub(x, mu)?;
    let d2 = tape.square(d);
    let q = tape.div(d2, sigma)?;
    let s = tape.add(ln_s, q)?;
    let s = tape.scale(s, -0.5);
    let a = tape.value(mu).cols();
    let s = tape.row_sums(s);
    Ok(tape.offset(s, -0.5 * a as f64 * (2.0 * PI).ln()))
}

/// Row-wise update on the tape. `kappa` and `nu` are `[R, 1]`; `sigma_tilde`
/// has one entry per appearance dimension. Returns `(μ⁺, Σ⁺)`.
pub fn update_tape(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    x: Var,
    kappa: Var,
    nu: Var,
    sigma_tilde: &[f64],
) -> Result<(Var, Var)> {
    let (rows, a) = (tape.value(mu).rows(), tape.value(mu).cols());
    let k = tape.repeat_cols(kappa, a)?;
    let n = tape.repeat_cols(nu, a)?;
    let d = tape.sub(x, mu)?;
    let kd = tape.mul(k, d)?;
    let mu_next = tape.add(mu, kd)?;

    let one_minus_n = tape.scale(n, -1.0);
    let one_minus_n = tape.offset(one_minus_n, 1.0);
    let tilde = Tensor::matrix(rows, a, sigma_tilde.iter().copied().cycle().take(rows * a).collect());
    let t1 = tape.mul_const(n, tilde)?;
    let t2 = tape.mul(one_minus_n, sigma)?;
    let num = tape.mul(k, one_minus_n)?;
    let den = tape.add(k, n)?;
    let frac = tape.div(num, den)?;
    let d2 = tape.square(d);
    let t3 = tape.mul(frac, d2)?;
    let s = tape.add(t1, t2)?;
    let s = tape.add(s, t3)?;
    let sigma_next = tape.clamp(s, VARIANCE_FLOOR, f64::INFINITY);
    Ok((mu_next, sigma_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(mu: Vec<f64>, sigma: Vec<f64>) -> GaussianAppearance {
        GaussianAppearance { mu, sigma }
    }

    #[test]
    fn init_uses_detection_and_sigma0() {
        let m = init_model(&[1.0, 2.0], 0.001).unwrap();
        assert_eq!(m.mu, vec![1.0, 2.0]);
        assert_eq!(m.sigma, vec![0.001, 0.001]);
        assert_eq!(init_model(&[0.0; 3], SIGMA0).unwrap().mu, vec![0.0; 3]);
        assert!(init_model(&[1.0], 0.0).is_err());
    }

    #[test]
    fn mode_has_maximum_likelihood() {
        let x = [0.3, -0.2, 0.05];
        let m = init_model(&x, SIGMA0).unwrap();
        let at_mode = log_likelihood(&m, &x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let q: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
            assert!(log_likelihood(&m, &q).unwrap() <= at_mode);
        }
    }

    #[test]
    fn log_likelihood_closed_forms() {
        let m = model(vec![0.5, -1.0], vec![1.0, 1.0]);
        assert!((log_likelihood(&m, &[0.5, -1.0]).unwrap() + (2.0 * PI).ln()).abs() < 1e-15);
        assert!((log_likelihood(&m, &[0.5, -1.0]).unwrap() - -1.837_877_066_409_345_5).abs() < 1e-12);
        let m1 = model(vec![0.0], vec![1.0]);
        assert!((log_likelihood(&m1, &[1.0]).unwrap() - -1.418_938_533_204_672_7).abs() < 1e-12);
        assert!(log_likelihood(&m1, &[1.0, 2.0]).is_err());
    }

    /// Density oracle: product of univariate normal pdfs, then ln.
    #[test]
    fn log_likelihood_matches_density_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mu: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..8).map(|_| rng.gen_range(0.2..2.0)).collect();
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let density: f64 = (0..8)
            .map(|i| {
                let sd = sigma[i].sqrt();
                let z = (x[i] - mu[i]) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
            })
            .product();
        let got = log_likelihood(&model(mu, sigma), &x).unwrap();
        assert!((got - density.ln()).abs() < 1e-10);
    }

    #[test]
    fn update_limits_and_worked_case() {
        let m = model(vec![0.2, -0.4], vec![0.3, 0.7]);
        let x = [1.0, 1.0];
        let zero = [0.0, 0.0];
        // both rates vanish with κ/ν → 0; along κ = ν the third term keeps weight ½
        let r = UpdateRates::new(1e-300, 1e-150).unwrap();
        let u = update(&m, &x, r, &zero).unwrap();
        for i in 0..2 {
            assert!((u.mu[i] - m.mu[i]).abs() < 1e-12);
            assert!((u.sigma[i] - m.sigma[i]).abs() < 1e-12);
        }
        let u = update(&m, &x, UpdateRates::new(1.0, 0.0).unwrap(), &zero).unwrap();
        for i in 0..2 {
            assert!((u.mu[i] - x[i]).abs() < 1e-12);
            let d = x[i] - m.mu[i];
            assert!((u.sigma[i] - (m.sigma[i] + d * d)).abs() < 1e-12);
        }
        let u = update(
            &model(vec![0.0], vec![1.0]),
            &[2.0],
            UpdateRates::new(0.5, 0.5).unwrap(),
            &[0.0],
        )
        .unwrap();
        assert!((u.mu[0] - 1.0).abs() < 1e-12);
        assert!((u.sigma[0] - 1.5).abs() < 1e-12);
        assert!(update(&m, &x, UpdateRates::new(0.0, 0.0).unwrap(), &zero).is_err());
    }

    #[test]
    fn rates_from_head() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = RateHead::new(&mut store, "rates", 4, &mut rng).unwrap();
        store.set_flat(&vec![0.0; store.num_scalars()]).unwrap();
        let r = head.predict(&store, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!((r.kappa(), r.nu()), (0.5, 0.5));
        store.get_mut(head.linear.bias).data_mut().copy_from_slice(&[80.0, 80.0]);
        let r = head.predict(&store, &[0.0; 4]).unwrap();
        assert!(r.kappa() < 1.0 && r.kappa() > 0.999);
        assert!(r.nu() < 1.0);
    }

    #[test]
    fn kappa_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = RateHead::new(&mut store, "rates", 5, &mut rng).unwrap();
        let y: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(&store, &GradCheckOptions::default(), |s, tape| {
            let y = tape.constant(Tensor::matrix(1, 5, y.clone()));
            let (k, _) = head.forward(tape, s, y)?;
            Ok(tape.sum(k))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn tape_versions_match_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = 6;
        let mu: Vec<f64> = (0..a).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sigma: Vec<f64> = (0..a).map(|_| rng.gen_range(0.01..1.0)).collect();
        let x: Vec<f64> = (0..a).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tilde: Vec<f64> = (0..a).map(|_| rng.gen_range(0.0..0.5)).collect();
        let (k, n) = (0.3, 0.6);
        let m = model(mu.clone(), sigma.clone());
        let want_ll = log_likelihood(&m, &x).unwrap();
        let want = update(&m, &x, UpdateRates::new(k, n).unwrap(), &tilde).unwrap();

        let mut tape = Tape::new();
        let mu_v = tape.constant(Tensor::matrix(1, a, mu));
        let s_v = tape.constant(Tensor::matrix(1, a, sigma));
        let x_v = tape.constant(Tensor::matrix(1, a, x));
        let ll = log_likelihood_tape(&mut tape, mu_v, s_v, x_v).unwrap();
        assert!((tape.value(ll).item() - want_ll).abs() < 1e-12);
        let k_v = tape.constant(Tensor::matrix(1, 1, vec![k]));
        let n_v = tape.constant(Tensor::matrix(1, 1, vec![n]));
        let (mu2, s2) = update_tape(&mut tape, mu_v, s_v, x_v, k_v, n_v, &tilde).unwrap();
        for i in 0..a {
            assert!((tape.value(mu2).data()[i] - want.mu[i]).abs() < 1e-12);
            assert!((tape.value(s2).data()[i] - want.sigma[i]).abs() < 1e-12);
        }
    }

    /// Gradient through the update, including the rate head, against finite
    /// differences.
    #[test]
    fn update_gradients_pass_check() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let head = RateHead::new(&mut store, "rates", 4, &mut rng).unwrap();
        let emb: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mu: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let query: Vec<f64> = (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let report = grad_check(&store, &GradCheckOptions::default(), |s, tape| {
            let y = tape.constant(Tensor::matrix(2, 4, emb.clone()));
            let (k, n) = head.forward(tape, s, y)?;
            let mu_v = tape.constant(Tensor::matrix(2, 3, mu.clone()));
            let s_v = tape.constant(Tensor::filled(&[2, 3], 0.1));
            let x_v = tape.constant(Tensor::matrix(2, 3, x.clone()));
            let (mu2, s2) = update_tape(tape, mu_v, s_v, x_v, k, n, &[0.0; 3])?;
            let q = tape.constant(Tensor::matrix(2, 3, query.clone()));
            let ll = log_likelihood_tape(tape, mu2, s2, q)?;
            Ok(tape.sum(ll))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    proptest! {
        #[test]
        fn updated_variance_positive_and_mean_between(
            mu in proptest::collection::vec(-3.0f64..3.0, 4),
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            sigma in proptest::collection::vec(1e-6f64..5.0, 4),
            k in 1e-9f64..1.0,
            n in 0.0f64..(1.0 - 1e-9),
        ) {
            let m = model(mu.clone(), sigma);
            let u = update(&m, &x, UpdateRates::new(k, n).unwrap(), &[0.0; 4]).unwrap();
            for i in 0..4 {
                prop_assert!(u.sigma[i] > 0.0);
                let (lo, hi) = (mu[i].min(x[i]), mu[i].max(x[i]));
                prop_assert!(u.mu[i] >= lo - 1e-12 && u.mu[i] <= hi + 1e-12);
            }
        }

        #[test]
        fn likelihood_decreases_with_distance(d1 in 0.0f64..3.0, extra in 1e-3f64..3.0, s in 0.01f64..4.0) {
            let m = model(vec![0.2], vec![s]);
            let near = log_likelihood(&m, &[0.2 + d1]).unwrap();
            let far = log_likelihood(&m, &[0.2 - (d1 + extra)]).unwrap();
            prop_assert!(far < near);
        }
    }
}
