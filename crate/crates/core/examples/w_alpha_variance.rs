//! Variance of the Gaussian part of the scaled velocity: quadrature, a Riemann
//! sum of the isometry integral, and a Monte Carlo sample.

use sklimit::integrators::{sample_w_alpha, w_alpha_variance, w_alpha_variance_oracle};
use sklimit::model::builtin;
use sklimit::noise::SeedSpec;

fn main() -> sklimit::error::Result<()> {
    let spec = builtin("velocity_trig")?.build()?;
    let limit = |t: f64| (1.0 + 0.2 * t).powi(2) / (2.0 * spec.kappa_plus_gamma());
    for (alpha, t) in [(1.0, 0.2), (16.0, 1.0), (4096.0, 1.0)] {
        let q = w_alpha_variance(&spec, alpha, t)?;
        let o = w_alpha_variance_oracle(&spec, alpha, t, 1_000_000)?;
        let s = sample_w_alpha(&spec, alpha, t, 50_000, SeedSpec::new(12, 0))?;
        let mc = s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        println!(
            "alpha={alpha:>6} t={t}  quadrature {q:.6}  riemann {o:.6}  sample {mc:.5}  large-alpha value {:.6}",
            limit(t)
        );
    }
    Ok(())
}
