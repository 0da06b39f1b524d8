//! Counter-addressed Gaussian noise.
//!
//! Every `(path, step)` cell owns three standard normals `(u0, u1, u2)` derived
//! from a ChaCha8 keystream: the key comes from the [`SeedSpec`], the stream
//! number is the path index and the word position is `8 * step`. `u0` drives the
//! Brownian increment, `u1` and `u2` complete the exponential-integrator kicks,
//! so any cell can be regenerated without touching its neighbours.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::special::phi;

/// Default ceiling for tables that are materialized with [`IncrementTable::to_array`].
pub const DEFAULT_MEMORY_CAP_BYTES: usize = 4 << 30;

static KICK_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of kick factorizations whose correlation had to be clamped.
pub fn kick_clamp_count() -> u64 {
    KICK_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub root_seed: u64,
    pub stream_id: u64,
}

impl SeedSpec {
    pub fn new(root_seed: u64, stream_id: u64) -> Self {
        Self { root_seed, stream_id }
    }

    /// Seed of sub-experiment `index`, e.g. one arm of a sweep.
    pub fn arm(&self, index: u64) -> Self {
        Self { root_seed: self.root_seed, stream_id: self.stream_id.wrapping_mul(1_000_003).wrapping_add(index + 1) }
    }

    fn key(&self) -> [u8; 32] {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.root_seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.stream_id.to_le_bytes());
        key[16..].copy_from_slice(b"sklimit-noise-v1");
        key
    }

    /// Keystream for one path, positioned at `step`.
    pub fn cursor(&self, path: u64, step: u64) -> NormalCursor {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(path);
        rng.set_word_pos(u128::from(step) * WORDS_PER_CELL);
        NormalCursor { rng }
    }

    /// The normals of cell `(path, step)`.
    pub fn normal_cell(&self, path: u64, step: u64) -> [f64; 3] {
        self.cursor(path, step).next_cell()
    }
}

/// Sequential reader over one path's cells.
#[derive(Clone, Debug)]
pub struct NormalCursor {
    rng: ChaCha8Rng,
}

const WORDS_PER_CELL: u128 = 8;

impl NormalCursor {
    /// The next cell: two Box–Muller pairs, the last normal unused.
    #[inline]
    pub fn next_cell(&mut self) -> [f64; 3] {
        let (u0, u1) = self.next_pair();
        let (u2, _) = self.next_pair();
        [u0, u1, u2]
    }

    #[inline]
    fn next_pair(&mut self) -> (f64, f64) {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        // (0, 1] so the logarithm stays finite.
        let u = ((a >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let v = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let r = (-2.0 * u.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * v).sin_cos();
        (r * c, r * s)
    }
}

/// `n` independent standard normals from a dedicated stream.
pub fn standard_normals(seed: SeedSpec, n: usize) -> Vec<f64> {
    let mut cursor = seed.cursor(u64::MAX, 0);
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let (a, b) = cursor.next_pair();
        out.push(a);
        out.push(b);
    }
    out.truncate(n);
    out
}

/// Brownian increments `dW(i, k) ~ N(0, dt)` for `m_paths x n_steps` cells.
///
/// The table is a descriptor: entries are generated on demand from the seed, so
/// tables are cheap to copy and never need to be stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementTable {
    pub m_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub seed: SeedSpec,
    /// Product of all time rescalings applied since generation.
    pub time_scale: f64,
}

pub fn make_increments(seed: SeedSpec, m_paths: usize, n_steps: usize, dt: f64) -> Result<IncrementTable> {
    make_increments_capped(seed, m_paths, n_steps, dt, DEFAULT_MEMORY_CAP_BYTES)
}

pub fn make_increments_capped(
    seed: SeedSpec,
    m_paths: usize,
    n_steps: usize,
    dt: f64,
    cap_bytes: usize,
) -> Result<IncrementTable> {
    if m_paths == 0 || n_steps == 0 {
        return Err(domain("increment table needs at least one path and one step"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(domain(format!("increment dt must be positive, got {dt}")));
    }
    let bytes = m_paths.checked_mul(n_steps).and_then(|c| c.checked_mul(8));
    match bytes {
        Some(b) if b <= cap_bytes => {}
        _ => {
            return Err(Error::Resource(format!(
                "{m_paths} x {n_steps} increments exceed the {cap_bytes}-byte cap"
            )))
        }
    }
    Ok(IncrementTable { m_paths, n_steps, dt, seed, time_scale: 1.0 })
}

/// Increments of `W~_t = sqrt(alpha) W_{t/alpha}`: every entry scales by
/// `sqrt(alpha)` and the step becomes `alpha dt`.
pub fn rescaled_increments(base: &IncrementTable, alpha: f64) -> Result<IncrementTable> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(domain(format!("alpha must be positive, got {alpha}")));
    }
    Ok(IncrementTable { dt: base.dt * alpha, time_scale: base.time_scale * alpha, ..*base })
}

impl IncrementTable {
    pub fn entry(&self, path: usize, step: usize) -> f64 {
        self.dt.sqrt() * self.seed.normal_cell(path as u64, step as u64)[0]
    }

    pub fn normals(&self, path: usize, step: usize) -> [f64; 3] {
        self.seed.normal_cell(path as u64, step as u64)
    }

    pub fn cursor(&self, path: usize) -> NormalCursor {
        self.seed.cursor(path as u64, 0)
    }

    pub fn to_array(&self) -> Array2<f64> {
        let sd = self.dt.sqrt();
        let mut out = Array2::zeros((self.m_paths, self.n_steps));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let mut c = self.cursor(i);
            for v in row.iter_mut() {
                *v = sd * c.next_cell()[0];
            }
        }
        out
    }
}

/// Record of which increments a simulation consumed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseAudit {
    /// XOR of the bit patterns of every `u0` drawn.
    pub fingerprint: u64,
    pub draws: u64,
}

impl NoiseAudit {
    #[inline]
    pub fn record(&mut self, u0: f64) {
        self.fingerprint ^= u0.to_bits().rotate_left((self.draws % 64) as u32);
        self.draws += 1;
    }

    pub fn merge(&mut self, other: NoiseAudit) {
        self.fingerprint ^= other.fingerprint;
        self.draws += other.draws;
    }
}

/// Covariance of the pair `(xi1, xi2) = (int_0^h e^{-a(h-s)} dW_s, int_0^h (1 - e^{-a(h-s)})/a dW_s)`.
pub fn kick_covariance(a: f64, h: f64) -> (f64, f64, f64) {
    let z = a * h;
    let var1 = h * phi(1, 2.0 * z);
    let var2 = h * h * h * 2.0 * (2.0 * phi(3, 2.0 * z) - phi(3, z));
    let cov = h * h * (2.0 * phi(2, 2.0 * z) - phi(2, z));
    (var1, var2, cov)
}

/// Correlated kick pair from two independent standard normals via the Cholesky
/// factor of [`kick_covariance`].
pub fn correlated_kick(a: f64, h: f64, u1: f64, u2: f64) -> Result<(f64, f64)> {
    if !(a > 0.0) || !(h > 0.0) {
        return Err(domain(format!("correlated_kick needs a > 0 and h > 0, got a={a}, h={h}")));
    }
    let (v1, v2, c) = kick_covariance(a, h);
    let (s1, s2) = (v1.max(0.0).sqrt(), v2.max(0.0).sqrt());
    let mut rho = if s1 > 0.0 && s2 > 0.0 { c / (s1 * s2) } else { 0.0 };
    let bound = 1.0 - 1e-12;
    if !(rho.abs() <= bound) {
        KICK_CLAMPS.fetch_add(1, Ordering::Relaxed);
        rho = rho.clamp(-bound, bound);
    }
    let xi1 = s1 * u1;
    let xi2 = s2 * (rho * u1 + (1.0 - rho * rho).sqrt() * u2);
    Ok((xi1, xi2))
}

/// Joint construction of `(dW, xi1, xi2)` from the cell normals `(u0, u1)`.
///
/// `dW = sqrt(h) u0` exactly, so the velocity and position kicks share the
/// Brownian increment that a first-order scheme on the same table consumes.
/// The identity `xi2 = (dW - xi1) / a` holds by construction.
#[derive(Clone, Copy, Debug)]
pub struct AnchoredKick {
    sqrt_h: f64,
    c1_0: f64,
    c1_1: f64,
    c2_0: f64,
    c2_1: f64,
}

impl AnchoredKick {
    pub fn new(a: f64, h: f64) -> Self {
        let z = a * h;
        let p1 = phi(1, z);
        let p2 = phi(2, z);
        let mut rho2 = if z < 1.0 {
            2.0 * (2.0 * phi(3, 2.0 * z) - phi(3, z)) - p2 * p2
        } else {
            (phi(1, 2.0 * z) - p1 * p1) / (z * z)
        };
        if rho2 < 0.0 {
            KICK_CLAMPS.fetch_add(1, Ordering::Relaxed);
            rho2 = 0.0;
        }
        let rho = rho2.sqrt();
        let sqrt_h = h.sqrt();
        Self {
            sqrt_h,
            c1_0: sqrt_h * p1,
            c1_1: sqrt_h * z * rho,
            c2_0: h * sqrt_h * p2,
            c2_1: -h * sqrt_h * rho,
        }
    }

    /// `(dW, xi1, xi2)`.
    #[inline]
    pub fn apply(&self, u0: f64, u1: f64) -> (f64, f64, f64) {
        (self.sqrt_h * u0, self.c1_0 * u0 + self.c1_1 * u1, self.c2_0 * u0 + self.c2_1 * u1)
    }
}

/// Stochastic integrals of one step of a system whose ensemble mean relaxes at
/// rate `a_m` while deviations from it relax at rate `a >= a_m`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Kicks {
    /// `int dW`.
    pub dw: f64,
    /// `int e^{-a(h-s)} dW`.
    pub xi1: f64,
    /// `int (1 - e^{-a(h-s)})/a dW`.
    pub xi2: f64,
    /// `int e^{-a_m(h-s)} dW`.
    pub eta: f64,
    /// `int (1 - e^{-a_m(h-s)})/a_m dW`.
    pub zeta: f64,
}

/// Joint construction of [`Kicks`] from a cell `(u0, u1, u2)`.
///
/// `(dW, eta, zeta)` come from an [`AnchoredKick`] at rate `a_m` and use only
/// `(u0, u1)`; the fast kicks add `delta = eta - xi1` projected onto the cell,
/// which vanishes when `a = a_m`.
#[derive(Clone, Copy, Debug)]
pub struct SplitKick {
    a: f64,
    a_m: f64,
    mean: AnchoredKick,
    d0: f64,
    d1: f64,
    d2: f64,
}

impl SplitKick {
    pub fn new(a: f64, a_m: f64, h: f64) -> Self {
        let mean = AnchoredKick::new(a_m, h);
        let (mut d0, mut d1, mut d2) = (0.0, 0.0, 0.0);
        if a != a_m {
            let lam = |r: f64| h * phi(1, r * h);
            let p0 = (lam(a_m) - lam(a)) / mean.sqrt_h;
            let cov_eta = lam(2.0 * a_m) - lam(a + a_m);
            let var = (lam(2.0 * a_m) - 2.0 * lam(a + a_m) + lam(2.0 * a)).max(0.0);
            d0 = p0;
            if mean.c1_1 > 0.0 {
                d1 = (cov_eta - mean.c1_0 * d0) / mean.c1_1;
            }
            let rest = var - d0 * d0 - d1 * d1;
            if rest < 0.0 && rest < -1e-12 * var.max(f64::MIN_POSITIVE) {
                KICK_CLAMPS.fetch_add(1, Ordering::Relaxed);
            }
            d2 = rest.max(0.0).sqrt();
        }
        Self { a, a_m, mean, d0, d1, d2 }
    }

    #[inline]
    pub fn apply(&self, u: [f64; 3]) -> Kicks {
        let (dw, eta, zeta) = self.mean.apply(u[0], u[1]);
        let delta = self.d0 * u[0] + self.d1 * u[1] + self.d2 * u[2];
        let (xi1, xi2) = if self.a == self.a_m { (eta, zeta) } else { (eta - delta, (self.a_m * zeta + delta) / self.a) };
        Kicks { dw, xi1, xi2, eta, zeta }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lambda;
    use crate::special::integrate;
    use proptest::prelude::*;

    #[test]
    fn tables_are_deterministic_and_addressable() {
        let seed = SeedSpec::new(7, 3);
        let a = make_increments(seed, 5, 20, 0.01).unwrap();
        let b = make_increments(seed, 5, 20, 0.01).unwrap();
        assert_eq!(a.to_array(), b.to_array());
        let arr = a.to_array();
        assert_eq!(arr[[3, 17]].to_bits(), a.entry(3, 17).to_bits());
        let other = make_increments(SeedSpec::new(7, 4), 5, 20, 0.01).unwrap();
        assert_ne!(arr, other.to_array());
    }

    #[test]
    fn invalid_tables_are_rejected() {
        let seed = SeedSpec::new(1, 0);
        assert!(matches!(make_increments(seed, 1, 1, 0.0), Err(Error::Domain(_))));
        assert!(matches!(make_increments(seed, 0, 1, 0.1), Err(Error::Domain(_))));
        assert!(matches!(make_increments_capped(seed, 1000, 1000, 0.1, 1024), Err(Error::Resource(_))));
    }

    #[test]
    fn column_variance_within_chi_square_band() {
        // P(sample variance of 1e4 N(0, 0.01) draws in [0.0095, 0.0105]) = 0.99959.
        let table = make_increments(SeedSpec::new(2024, 0), 10_000, 100, 0.01).unwrap();
        let arr = table.to_array();
        let inside = arr
            .columns()
            .into_iter()
            .filter(|col| {
                let n = col.len() as f64;
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (0.0095..=0.0105).contains(&var)
            })
            .count();
        assert!(inside >= 99, "{inside} of 100 columns inside the band");
        assert!(arr.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rescaling_examples() {
        let base = make_increments(SeedSpec::new(9, 0), 3, 4, 0.01).unwrap();
        let same = rescaled_increments(&base, 1.0).unwrap();
        assert_eq!(base.to_array(), same.to_array());
        let scaled = rescaled_increments(&base, 4.0).unwrap();
        assert_eq!(scaled.dt, 0.04);
        let (b, s) = (base.to_array(), scaled.to_array());
        for (x, y) in b.iter().zip(s.iter()) {
            assert!((2.0 * x - y).abs() < 1e-15);
        }
        assert!(rescaled_increments(&base, 0.0).is_err());
    }

    #[test]
    fn rescaled_variance_matches() {
        let base = make_increments(SeedSpec::new(10, 0), 10_000, 1, 0.001).unwrap();
        let scaled = rescaled_increments(&base, 16.0).unwrap();
        let col: Vec<f64> = (0..10_000).map(|i| scaled.entry(i, 0)).collect();
        let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
        // sd of the estimate is about 0.016 * sqrt(2/1e4)
        assert!((var - 0.016).abs() < 5.0 * 0.016 * (2.0f64 / 1e4).sqrt());
    }

    #[test]
    fn kick_covariance_matches_quadrature_of_defining_integrals() {
        for &(a, h) in &[(2.0, 0.1), (1.0, 1.0), (50.0, 0.3), (1e-3, 0.2)] {
            let (v1, v2, c) = kick_covariance(a, h);
            let k1 = |s: f64| (-a * (h - s)).exp();
            let k2 = |s: f64| -(-a * (h - s)).exp_m1() / a;
            let q1 = integrate(|s| k1(s) * k1(s), 0.0, h, 1e-16, 1e-13);
            let q2 = integrate(|s| k2(s) * k2(s), 0.0, h, 1e-18, 1e-13);
            let qc = integrate(|s| k1(s) * k2(s), 0.0, h, 1e-18, 1e-13);
            assert!((v1 - q1).abs() <= 1e-11 * q1, "var1 at ({a},{h})");
            assert!((v2 - q2).abs() <= 1e-10 * q2, "var2 at ({a},{h})");
            assert!((c - qc).abs() <= 1e-10 * qc, "cov at ({a},{h})");
            assert!((v1 - lambda(h, 2.0 * a)).abs() < 1e-15);
        }
    }

    #[test]
    fn kick_covariance_reference_values() {
        let (v1, v2, c) = kick_covariance(2.0, 0.1);
        assert!((v1 - 0.082_419_988_491_090_18).abs() < 1e-15);
        assert!((v2 - 0.000_287_685_392_268_008_4).abs() < 1e-17);
        assert!((c - 0.004_107_317_484_959_448).abs() < 1e-16);
        let (v1, _, _) = kick_covariance(1.0, 1.0);
        assert!((v1 - 0.432_332_358_381_693_65).abs() < 1e-15);
    }

    #[test]
    fn kick_covariance_small_step_limit() {
        let h = 0.3;
        let (v1, v2, c) = kick_covariance(1e-12, h);
        assert!((v1 - h).abs() < 1e-12);
        assert!((v2 - h.powi(3) / 3.0).abs() < 1e-12);
        assert!((c - h * h / 2.0).abs() < 1e-12);
    }

    #[test]
    fn correlated_kick_monte_carlo() {
        let (a, h) = (2.0, 0.1);
        let n = 1_000_000;
        let u = standard_normals(SeedSpec::new(11, 0), 2 * n);
        let (mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0);
        for k in 0..n {
            let (x1, x2) = correlated_kick(a, h, u[2 * k], u[2 * k + 1]).unwrap();
            s11 += x1 * x1;
            s22 += x2 * x2;
            s12 += x1 * x2;
        }
        let nf = n as f64;
        let (v1, v2, c) = kick_covariance(a, h);
        assert!((s11 / nf / v1 - 1.0).abs() < 5e-3);
        assert!((s22 / nf / v2 - 1.0).abs() < 5e-3);
        assert!((s12 / nf / c - 1.0).abs() < 5e-3);
    }

    #[test]
    fn anchored_kick_reproduces_covariances_and_identity() {
        for &(a, h) in &[(2.0, 0.1), (0.5, 0.01), (4096.0, 0.005), (1e-9, 0.1)] {
            let k = AnchoredKick::new(a, h);
            let (v1, v2, c) = kick_covariance(a, h);
            // Exact second moments from the linear map of (u0, u1).
            let e11 = k.c1_0 * k.c1_0 + k.c1_1 * k.c1_1;
            let e22 = k.c2_0 * k.c2_0 + k.c2_1 * k.c2_1;
            let e12 = k.c1_0 * k.c2_0 + k.c1_1 * k.c2_1;
            let e_w1 = k.sqrt_h * k.c1_0;
            assert!((e11 - v1).abs() <= 1e-12 * v1, "({a},{h})");
            assert!((e22 - v2).abs() <= 1e-9 * v2, "({a},{h}): {e22} vs {v2}");
            assert!((e12 - c).abs() <= 1e-10 * c.abs().max(1e-300), "({a},{h})");
            assert!((e_w1 - lambda(h, a)).abs() <= 1e-13 * lambda(h, a));
            let (dw, x1, x2) = k.apply(0.3, -1.2);
            if a > 1e-3 {
                assert!((x2 - (dw - x1) / a).abs() < 1e-12 * (1.0 + x2.abs()));
            }
        }
    }

    #[test]
    fn split_kick_has_exact_joint_covariance() {
        for &(a, a_m, h) in &[(3.0, 1.0, 0.01), (2.0, 1.0, 0.1), (2e4, 1e4, 0.005), (5.0, 0.5, 1.0)] {
            let k = SplitKick::new(a, a_m, h);
            // Kicks are linear in the cell, so unit cells give the loadings.
            let basis: Vec<Kicks> = (0..3)
                .map(|j| {
                    let mut u = [0.0; 3];
                    u[j] = 1.0;
                    k.apply(u)
                })
                .collect();
            let cov = |f: fn(&Kicks) -> f64, g: fn(&Kicks) -> f64| basis.iter().map(|b| f(b) * g(b)).sum::<f64>();
            let close = |got: f64, want: f64| (got - want).abs() <= 1e-9 * want.abs().max(1e-12);
            assert!(close(cov(|k| k.dw, |k| k.dw), h));
            assert!(close(cov(|k| k.eta, |k| k.eta), lambda(h, 2.0 * a_m)));
            assert!(close(cov(|k| k.xi1, |k| k.xi1), lambda(h, 2.0 * a)));
            assert!(close(cov(|k| k.xi1, |k| k.eta), lambda(h, a + a_m)));
            assert!(close(cov(|k| k.dw, |k| k.xi1), lambda(h, a)));
            assert!(close(cov(|k| k.dw, |k| k.eta), lambda(h, a_m)));
            let var2 = (h - 2.0 * lambda(h, a) + lambda(h, 2.0 * a)) / (a * a);
            assert!(close(cov(|k| k.xi2, |k| k.xi2), var2), "{a} {a_m} {h}");
            let cell = [0.3, -1.2, 0.7];
            let q = k.apply(cell);
            assert!((q.xi2 - (q.dw - q.xi1) / a).abs() < 1e-12 * q.dw.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn kick_covariance_is_psd(la in -6.0f64..6.0, lh in -6.0f64..1.0) {
            let (a, h) = (10f64.powf(la), 10f64.powf(lh));
            let (v1, v2, c) = kick_covariance(a, h);
            prop_assert!(v1 > 0.0 && v2 > 0.0);
            prop_assert!(c * c <= v1 * v2 * (1.0 + 1e-9));
        }

        #[test]
        fn addressed_and_sequential_draws_agree(path in 0u64..1000, step in 0u64..500) {
            let seed = SeedSpec::new(5, 1);
            let mut c = seed.cursor(path, 0);
            let mut last = [0.0; 3];
            for _ in 0..=step {
                last = c.next_cell();
            }
            let direct = seed.normal_cell(path, step);
            for j in 0..3 {
                prop_assert_eq!(last[j].to_bits(), direct[j].to_bits());
            }
        }
    }
}
