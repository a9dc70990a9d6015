//! Follows a diagonal Gaussian appearance model while an object drifts, and
//! shows how the update rates trade memory against adaptation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use trackgraph::appearance::{init_model, log_likelihood, update, UpdateRates, SIGMA0};

fn main() -> trackgraph::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let dim = 8;
    let start: Vec<f64> = (0..dim).map(|i| 0.05 * i as f64).collect();
    let other: Vec<f64> = start.iter().map(|a| a + 0.2).collect();

    for (kappa, nu) in [(0.9, 0.1), (0.5, 0.5), (0.1, 0.9)] {
        let rates = UpdateRates::new(kappa, nu)?;
        let mut model = init_model(&start, SIGMA0)?;
        let mut x = start.clone();
        for _ in 0..20 {
            for v in x.iter_mut() {
                *v += 0.005 + noise.sample(&mut rng);
            }
            model = update(&model, &x, rates, &vec![0.0; dim])?;
        }
        let same = log_likelihood(&model, &x)? / dim as f64;
        let different = log_likelihood(&model, &other)? / dim as f64;
        let spread = model.sigma.iter().sum::<f64>() / dim as f64;
        println!(
            "kappa {kappa:.1} nu {nu:.1}: mean variance {spread:.2e}, ll/A own {same:8.2}, other object {different:10.2}"
        );
    }
    Ok(())
}
