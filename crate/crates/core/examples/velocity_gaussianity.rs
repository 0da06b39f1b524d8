//! Total variation between the scaled velocity `Y^a_t / sqrt(a)` and the
//! Gaussian `N(0, sigma(t)^2 / 2(kappa+gamma))`, with the estimator noise floor.

use sklimit::distances::tv_vs_normal;
use sklimit::integrators::{simulate_underdamped_opts, RunOptions};
use sklimit::model::{builtin, SolverGrid};
use sklimit::noise::SeedSpec;

fn main() -> sklimit::error::Result<()> {
    let spec = builtin("velocity_trig")?.initial(0.5, 0.0).build()?;
    let grid = SolverGrid::capped(&spec)?;
    let t = 1.0;
    let sigma_t = 1.0 + 0.2 * t;
    let var = sigma_t * sigma_t / (2.0 * spec.kappa_plus_gamma());
    for (i, alpha) in [1.0, 16.0, 256.0, 4096.0].into_iter().enumerate() {
        let b = simulate_underdamped_opts(&spec, &grid, alpha, 20_000, SeedSpec::new(4, i as u64), &RunOptions::until(t))?;
        let scaled: Vec<f64> = b.y_final.unwrap().iter().map(|y| y / alpha.sqrt()).collect();
        let tv = tv_vs_normal(&scaled, 0.0, var)?;
        println!(
            "alpha={alpha:>6}  tv={:.4} +- {:.4}  (noise floor {:.4})",
            tv.value,
            tv.std_error,
            tv.noise_floor.unwrap()
        );
    }
    Ok(())
}
