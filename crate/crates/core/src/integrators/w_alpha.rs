//! The Gaussian process `W^alpha(t) = sqrt(alpha) int_0^t e^{alpha c (u - t)} sigma(u) dW_u`,
//! `c = kappa + gamma`, that the scaled velocity approaches.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, SigmaKind};
use crate::noise::{standard_normals, SeedSpec};
use crate::special::integrate;

static VARIANCE_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of tiny negative variances clamped to zero so far.
pub fn variance_clamp_count() -> u64 {
    VARIANCE_CLAMPS.load(Ordering::Relaxed)
}

fn check(spec: &ModelSpec, alpha: f64, t: f64) -> Result<()> {
    if spec.sigma_kind == SigmaKind::General {
        return Err(Error::SigmaKind { t });
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(crate::error::domain(format!("alpha must be positive, got {alpha}")));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(crate::error::domain(format!("time must be nonnegative, got {t}")));
    }
    Ok(())
}

/// Exact variance of `W^alpha(t)` after integrating the Itô isometry by parts:
///
/// ```text
/// sigma(t)^2/(2c) - sigma(0)^2 e^{-2 alpha c t}/(2c) - (1/c) int_0^t sigma sigma' e^{2 alpha c (r - t)} dr
/// ```
///
/// The remaining integral is done by adaptive quadrature.
pub fn w_alpha_variance(spec: &ModelSpec, alpha: f64, t: f64) -> Result<f64> {
    check(spec, alpha, t)?;
    let c = spec.kappa_plus_gamma();
    let rate = 2.0 * alpha * c;
    let sigma = |r: f64| spec.sigma_raw(r, spec.x0);
    let (s0, st) = (sigma(0.0), sigma(t));
    if !s0.is_finite() || !st.is_finite() {
        return Err(Error::Evaluation { which: "sigma", t, x: spec.x0 });
    }
    // Written so that the constant-sigma case cancels exactly.
    let mut v = (st * st - s0 * s0) / (2.0 * c) + s0 * s0 * (-(-rate * t).exp_m1()) / (2.0 * c);

    let failed = std::cell::RefCell::new(None);
    let f = |r: f64| match spec.eval_sigma_time_derivative(r) {
        Ok(d) => sigma(r) * d * (rate * (r - t)).exp(),
        Err(e) => {
            failed.borrow_mut().get_or_insert(e);
            0.0
        }
    };
    // The weight is negligible more than 40 decay lengths back from t.
    let split = (t - 40.0 / rate).max(0.0);
    let near = integrate(f, split, t, 1e-16, 1e-12);
    let far = if split > 0.0 { integrate(f, 0.0, split, 1e-16, 1e-12) } else { 0.0 };
    if let Some(e) = failed.into_inner() {
        return Err(e);
    }
    v -= (near + far) / c;
    if !v.is_finite() {
        return Err(Error::Numerical(format!("W^alpha variance is not finite at t={t}")));
    }
    if v < 0.0 {
        if v.abs() < 1e-14 {
            VARIANCE_CLAMPS.fetch_add(1, Ordering::Relaxed);
            return Ok(0.0);
        }
        return Err(Error::Numerical(format!("negative W^alpha variance {v} at t={t}, alpha={alpha}")));
    }
    Ok(v)
}

/// Independent check: a midpoint Riemann sum of `int_0^t alpha sigma(r)^2 e^{2 alpha c (r - t)} dr`.
pub fn w_alpha_variance_oracle(spec: &ModelSpec, alpha: f64, t: f64, cells: usize) -> Result<f64> {
    check(spec, alpha, t)?;
    if cells == 0 {
        return Err(crate::error::domain("need at least one cell"));
    }
    let rate = 2.0 * alpha * spec.kappa_plus_gamma();
    let h = t / cells as f64;
    let sum: f64 = (0..cells)
        .map(|i| {
            let r = (i as f64 + 0.5) * h;
            let s = spec.sigma_raw(r, spec.x0);
            s * s * (rate * (r - t)).exp()
        })
        .sum();
    Ok(alpha * h * sum)
}

/// Exact draws of `W^alpha(t)`; needs a diffusion that does not depend on position.
pub fn sample_w_alpha(spec: &ModelSpec, alpha: f64, t: f64, m_samples: usize, seed: SeedSpec) -> Result<Vec<f64>> {
    let sd = w_alpha_variance(spec, alpha, t)?.sqrt();
    Ok(standard_normals(seed, m_samples).into_iter().map(|z| sd * z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, lambda};

    fn time_only(s: impl Fn(f64) -> f64 + Send + Sync + 'static, kappa: f64, gamma: f64) -> ModelSpec {
        ModelSpec::builder(|_, x| x, move |t, _| s(t))
            .sigma_kind(SigmaKind::TimeOnly)
            .kappa(kappa)
            .gamma(gamma)
            .build()
            .unwrap()
    }

    #[test]
    fn constant_sigma_matches_closed_form() {
        let spec = time_only(|_| 1.5, 1.0, 0.5);
        for &(alpha, t) in &[(1.0, 1.0), (10.0, 0.3), (1e4, 2.0)] {
            let v = w_alpha_variance(&spec, alpha, t).unwrap();
            let exact = 1.5 * 1.5 * alpha * lambda(t, 2.0 * alpha * 1.5);
            assert!((v - exact).abs() <= 1e-14 * exact.max(1.0), "{v} vs {exact}");
        }
        let far = w_alpha_variance(&spec, 1.0, 50.0).unwrap();
        assert!((far - 2.25 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn linear_sigma_matches_riemann_oracle() {
        let spec = time_only(|t| 1.0 + t, 1.0, 0.0);
        let v = w_alpha_variance(&spec, 1.0, 1.0).unwrap();
        let oracle = w_alpha_variance_oracle(&spec, 1.0, 1.0, 200_000).unwrap();
        assert!((v - oracle).abs() < 1e-8, "{v} vs {oracle}");
        // sigma sigma' = 1 + r, so everything is elementary here.
        // int_0^1 (1 + r) e^{2(r-1)} dr = [((1 + r)/2 - 1/4) e^{2(r-1)}]_0^1
        let tail = 0.75 - 0.25 * (-2.0f64).exp();
        let exact = 2.0 - 0.5 * (-2.0f64).exp() - tail;
        // sigma' comes from a central difference here.
        assert!((v - exact).abs() < 1e-9, "{v} vs {exact}");
    }

    #[test]
    fn builtin_time_only_model_against_oracle() {
        let spec = builtin("velocity_trig").unwrap().kappa(1.0).gamma(1.0).build().unwrap();
        for &(alpha, t) in &[(1.0, 0.5), (16.0, 1.0), (256.0, 0.25)] {
            let v = w_alpha_variance(&spec, alpha, t).unwrap();
            let oracle = w_alpha_variance_oracle(&spec, alpha, t, 400_000).unwrap();
            assert!(((v - oracle) / oracle).abs() < 1e-6, "{alpha} {t}: {v} vs {oracle}");
        }
    }

    #[test]
    fn samples_have_the_variance() {
        let spec = time_only(|t| 1.0 + 0.2 * t, 1.0, 1.0);
        let v = w_alpha_variance(&spec, 8.0, 1.0).unwrap();
        let m = 200_000;
        let s = sample_w_alpha(&spec, 8.0, 1.0, m, SeedSpec::new(5, 5)).unwrap();
        let var = s.iter().map(|x| x * x).sum::<f64>() / m as f64;
        assert!((var / v - 1.0).abs() < 4.0 * (2.0 / m as f64).sqrt());
    }

    #[test]
    fn zero_time_is_zero_and_general_sigma_is_rejected() {
        let spec = time_only(|_| 1.0, 1.0, 0.0);
        assert_eq!(w_alpha_variance(&spec, 3.0, 0.0).unwrap(), 0.0);
        let general = builtin("trig").unwrap().build().unwrap();
        assert!(matches!(w_alpha_variance(&general, 1.0, 1.0), Err(Error::SigmaKind { .. })));
    }
}
