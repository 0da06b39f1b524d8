//! Distances between laws and between coupled paths: pathwise `L^p` sup,
//! one-dimensional Wasserstein, and total variation through Gaussian kernel
//! density estimates.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::integrators::PathBundle;
use crate::noise::{standard_normals, SeedSpec};
use crate::special::{normal_pdf, pairwise_mean, sample_mean_sd, trapezoid};

pub const KDE_GRID_POINTS: usize = 2048;
/// Grid padding beyond the samples, in bandwidths.
pub const KDE_PAD: f64 = 4.0;
/// Kernel support, in bandwidths; `e^{-32}` is below double resolution of the peak.
const KERNEL_REACH: f64 = 8.0;
pub const MIN_KDE_SAMPLES: usize = 100;
const SPLIT_FOLDS: usize = 5;
const BOOTSTRAP_RESAMPLES: usize = 200;
const LP_BATCHES: usize = 10;

// Internal resampling streams are fixed so estimates are reproducible.
const SPLIT_SEED: u64 = 0x7f4a_7c15_0001;
const BOOTSTRAP_SEED: u64 = 0x7f4a_7c15_0002;
const SUBSAMPLE_SEED: u64 = 0x7f4a_7c15_0003;
const FLOOR_SEED: u64 = 0x7f4a_7c15_0004;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LpSup,
    Wasserstein,
    TvKde,
    TvVsNormal,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::LpSup => "lp_sup",
            Method::Wasserstein => "wasserstein",
            Method::TvKde => "tv_kde",
            Method::TvVsNormal => "tv_vs_normal",
        }
    }
}

/// Estimator settings that produced a [`DistanceEstimate`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub p: Option<f64>,
    pub bandwidth: Option<f64>,
    pub grid_lo: Option<f64>,
    pub grid_hi: Option<f64>,
    pub grid_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceEstimate {
    pub value: f64,
    pub std_error: f64,
    pub method: Method,
    pub n_samples: usize,
    pub tuning: Tuning,
    /// Same-distribution TV at this sample size, for TV methods.
    pub noise_floor: Option<f64>,
    /// Resampled or batched versions of the statistic behind `std_error`.
    pub replicates: Vec<f64>,
}

// ---------------------------------------------------------------------------
// L^p sup

/// `(E sup_k |A_k - B_k|^p)^{1/p}` over a coupled pair, with a delta-method error.
///
/// Uses the running suprema recorded during a coupled simulation when both
/// bundles carry them; otherwise compares stored positions (or velocities).
pub fn lp_sup_distance(a: &PathBundle, b: &PathBundle, p: f64) -> Result<DistanceEstimate> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(domain(format!("p must be at least 1, got {p}")));
    }
    check_coupling(a, b)?;
    let sups: Vec<f64> = match (&a.running_sup, &b.running_sup) {
        (Some(sa), Some(sb)) if sa == sb => sa.clone(),
        _ => {
            let (pa, pb) = match (&a.x_paths, &b.x_paths, &a.y_paths, &b.y_paths) {
                (Some(pa), Some(pb), _, _) => (pa, pb),
                (_, _, Some(pa), Some(pb)) => (pa, pb),
                _ => return Err(Error::Provenance("bundles keep neither running suprema nor common paths".into())),
            };
            if pa.dim() != pb.dim() {
                return Err(Error::Coupling(format!("path arrays differ: {:?} vs {:?}", pa.dim(), pb.dim())));
            }
            pa.outer_iter()
                .zip(pb.outer_iter())
                .map(|(ra, rb)| ra.iter().zip(rb.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
                .collect()
        }
    };
    Ok(lp_from_sups(&sups, p))
}

pub(crate) fn lp_from_sups(sups: &[f64], p: f64) -> DistanceEstimate {
    let powered: Vec<f64> = sups.iter().map(|s| s.powf(p)).collect();
    let n = powered.len();
    let (mean, sd) = sample_mean_sd(&powered);
    let value = mean.powf(1.0 / p);
    let std_error = if mean > 0.0 { value / (p * mean) * sd / (n as f64).sqrt() } else { 0.0 };
    let batch = n.div_ceil(LP_BATCHES).max(1);
    let replicates = powered.chunks(batch).map(pairwise_mean).collect();
    DistanceEstimate {
        value,
        std_error,
        method: Method::LpSup,
        n_samples: n,
        tuning: Tuning { p: Some(p), ..Tuning::default() },
        noise_floor: None,
        replicates,
    }
}

fn check_coupling(a: &PathBundle, b: &PathBundle) -> Result<()> {
    if a.grid != b.grid || a.steps_taken != b.steps_taken {
        return Err(Error::Coupling("bundles live on different grids".into()));
    }
    if a.m_paths() != b.m_paths() {
        return Err(Error::Coupling(format!("path counts differ: {} vs {}", a.m_paths(), b.m_paths())));
    }
    if a.seed != b.seed || a.audit != b.audit {
        return Err(Error::Coupling("bundles were not driven by the same increments".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Wasserstein

/// `W_p` between two empirical laws via the sorted (monotone) coupling. The
/// larger sample is subsampled without replacement to the smaller size.
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: f64) -> Result<DistanceEstimate> {
    if a.is_empty() || b.is_empty() {
        return Err(domain("Wasserstein distance needs non-empty samples"));
    }
    if !(p >= 1.0) || !p.is_finite() {
        return Err(domain(format!("p must be at least 1, got {p}")));
    }
    let n = a.len().min(b.len());
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
    let mut sa = subsample(a, n, &mut rng);
    let mut sb = subsample(b, n, &mut rng);
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);
    let value = sorted_wasserstein(&sa, &sb, p);

    // Resampling with replacement from a sorted sample keeps it sorted when the
    // draws are expanded by multiplicity, so each replicate is O(n).
    let mut rng = ChaCha8Rng::seed_from_u64(BOOTSTRAP_SEED);
    let mut counts = vec![0u32; n];
    let mut ra = Vec::with_capacity(n);
    let mut rb = Vec::with_capacity(n);
    let mut replicates = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        sorted_resample(&sa, &mut counts, &mut ra, &mut rng);
        sorted_resample(&sb, &mut counts, &mut rb, &mut rng);
        replicates.push(sorted_wasserstein(&ra, &rb, p));
    }
    let (_, std_error) = sample_mean_sd(&replicates);
    Ok(DistanceEstimate {
        value,
        std_error,
        method: Method::Wasserstein,
        n_samples: n,
        tuning: Tuning { p: Some(p), ..Tuning::default() },
        noise_floor: None,
        replicates,
    })
}

fn subsample(v: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if v.len() == n {
        return v.to_vec();
    }
    let mut idx = rand::seq::index::sample(rng, v.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| v[i]).collect()
}

fn sorted_resample(sorted: &[f64], counts: &mut [u32], out: &mut Vec<f64>, rng: &mut ChaCha8Rng) {
    let n = sorted.len();
    counts.iter_mut().for_each(|c| *c = 0);
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1;
    }
    out.clear();
    for (v, &c) in sorted.iter().zip(counts.iter()) {
        out.extend(std::iter::repeat_n(*v, c as usize));
    }
}

fn sorted_wasserstein(a: &[f64], b: &[f64], p: f64) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs().powf(p)).collect();
    pairwise_mean(&d).powf(1.0 / p)
}

// ---------------------------------------------------------------------------
// Kernel density estimation

/// Gaussian KDE tabulated on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityTable {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityTable {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.density)
    }
}

/// Silverman's rule `0.9 min(sd, IQR/1.34) n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let (_, sd) = sample_mean_sd(samples);
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Degenerate(format!("sample spread is {sd}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (samples.len() as f64).powf(-0.2))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_samples(samples: &[f64]) -> Result<()> {
    if samples.len() < MIN_KDE_SAMPLES {
        return Err(domain(format!("density estimation needs at least {MIN_KDE_SAMPLES} samples, got {}", samples.len())));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(domain("samples contain non-finite values"));
    }
    Ok(())
}

fn extent(samples: &[f64]) -> (f64, f64) {
    samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Gaussian KDE on `[min - 4h, max + 4h]` with 2048 nodes; Silverman bandwidth
/// unless one is given.
pub fn kde_density(samples: &[f64], bandwidth: Option<f64>) -> Result<DensityTable> {
    check_samples(samples)?;
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => {
            silverman_bandwidth(samples)?;
            h
        }
        Some(h) => return Err(domain(format!("bandwidth must be positive, got {h}"))),
        None => silverman_bandwidth(samples)?,
    };
    let (lo, hi) = extent(samples);
    let grid = uniform_grid(lo - KDE_PAD * h, hi + KDE_PAD * h, KDE_GRID_POINTS);
    let density = kde_on_grid(samples, h, grid[0], grid[1] - grid[0], grid.len());
    Ok(DensityTable { grid, density, bandwidth: h })
}

fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|j| lo + j as f64 * step).collect()
}

/// Direct Gaussian-kernel sum on a uniform grid. Along the grid each sample's
/// kernel obeys a two-term multiplicative recurrence, so no exponentials are
/// taken inside the window.
fn kde_on_grid(samples: &[f64], h: f64, lo: f64, step: f64, n: usize) -> Vec<f64> {
    let reach = (KERNEL_REACH * h / step).ceil() as isize;
    let inv2h2 = 0.5 / (h * h);
    let q = (-step * step / (h * h)).exp();
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let add = |acc: &mut Vec<f64>, s: f64| {
        let center = ((s - lo) / step).round() as isize;
        if center < -reach || center > n as isize - 1 + reach {
            return;
        }
        let c = center.clamp(0, n as isize - 1);
        let d = lo + c as f64 * step - s;
        let g0 = (-d * d * inv2h2).exp();
        acc[c as usize] += g0;
        // Forward: g_{j+1} = g_j r_j, r_{j+1} = r_j q.
        let (mut g, mut r) = (g0, (-(2.0 * d * step + step * step) * inv2h2).exp());
        for j in (c + 1)..(c + 1 + reach).min(n as isize) {
            g *= r;
            r *= q;
            acc[j as usize] += g;
        }
        let (mut g, mut r) = (g0, (-(-2.0 * d * step + step * step) * inv2h2).exp());
        for j in ((c - reach).max(0)..c).rev() {
            g *= r;
            r *= q;
            acc[j as usize] += g;
        }
    };
    // Fixed chunks summed in order keep the result independent of the thread count.
    let parts: Vec<Vec<f64>> = samples
        .par_chunks(16_384)
        .map(|chunk| {
            let mut acc = vec![0.0; n];
            chunk.iter().for_each(|&s| add(&mut acc, s));
            acc
        })
        .collect();
    let mut total = vec![0.0; n];
    for part in parts {
        total.iter_mut().zip(part).for_each(|(t, v)| *t += v);
    }
    total.iter_mut().for_each(|v| *v *= norm);
    total
}

// ---------------------------------------------------------------------------
// Total variation

/// Half the L1 distance between the KDEs of `a` and `b`, on a common grid with
/// the common bandwidth `max(h_a, h_b)`.
pub fn tv_empirical(a: &[f64], b: &[f64]) -> Result<DistanceEstimate> {
    let (value, h, lo, hi) = tv_pair(a, b)?;
    let mut replicates = Vec::with_capacity(SPLIT_FOLDS);
    let mut rng = ChaCha8Rng::seed_from_u64(SPLIT_SEED);
    for _ in 0..SPLIT_FOLDS {
        let ha = half(a, &mut rng);
        let hb = half(b, &mut rng);
        replicates.push(tv_pair(&ha, &hb)?.0);
    }
    let n = a.len().min(b.len());
    Ok(DistanceEstimate {
        value,
        std_error: split_half_error(&replicates),
        method: Method::TvKde,
        n_samples: n,
        tuning: Tuning {
            p: None,
            bandwidth: Some(h),
            grid_lo: Some(lo),
            grid_hi: Some(hi),
            grid_size: Some(KDE_GRID_POINTS),
        },
        noise_floor: Some(tv_noise_floor(n)?),
        replicates,
    })
}

fn tv_pair(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64, f64)> {
    check_samples(a)?;
    check_samples(b)?;
    let h = silverman_bandwidth(a)?.max(silverman_bandwidth(b)?);
    let (la, ua) = extent(a);
    let (lb, ub) = extent(b);
    let (lo, hi) = (la.min(lb) - KDE_PAD * h, ua.max(ub) + KDE_PAD * h);
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let fa = kde_on_grid(a, h, lo, step, KDE_GRID_POINTS);
    let fb = kde_on_grid(b, h, lo, step, KDE_GRID_POINTS);
    let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).collect();
    Ok(((0.5 * uniform_trapezoid(&diff, step)).clamp(0.0, 1.0), h, lo, hi))
}

/// TV between the KDE of `samples` and the exact `N(mean, variance)` density.
pub fn tv_vs_normal(samples: &[f64], mean: f64, variance: f64) -> Result<DistanceEstimate> {
    if !(variance > 0.0) || !variance.is_finite() || !mean.is_finite() {
        return Err(domain(format!("target needs a finite mean and positive variance, got ({mean}, {variance})")));
    }
    let (value, h, lo, hi) = tv_normal_once(samples, mean, variance)?;
    let mut replicates = Vec::with_capacity(SPLIT_FOLDS);
    let mut rng = ChaCha8Rng::seed_from_u64(SPLIT_SEED);
    for _ in 0..SPLIT_FOLDS {
        replicates.push(tv_normal_once(&half(samples, &mut rng), mean, variance)?.0);
    }
    Ok(DistanceEstimate {
        value,
        std_error: split_half_error(&replicates),
        method: Method::TvVsNormal,
        n_samples: samples.len(),
        tuning: Tuning {
            p: None,
            bandwidth: Some(h),
            grid_lo: Some(lo),
            grid_hi: Some(hi),
            grid_size: Some(KDE_GRID_POINTS),
        },
        noise_floor: Some(tv_normal_noise_floor(samples.len())?),
        replicates,
    })
}

fn tv_normal_once(samples: &[f64], mean: f64, variance: f64) -> Result<(f64, f64, f64, f64)> {
    check_samples(samples)?;
    let h = silverman_bandwidth(samples)?;
    let sd = variance.sqrt();
    let (l, u) = extent(samples);
    let lo = (l - KDE_PAD * h).min(mean - 6.0 * sd);
    let hi = (u + KDE_PAD * h).max(mean + 6.0 * sd);
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let f = kde_on_grid(samples, h, lo, step, KDE_GRID_POINTS);
    let diff: Vec<f64> = f
        .iter()
        .enumerate()
        .map(|(j, v)| (v - normal_pdf((lo + j as f64 * step - mean) / sd) / sd).abs())
        .collect();
    Ok(((0.5 * uniform_trapezoid(&diff, step)).clamp(0.0, 1.0), h, lo, hi))
}

fn uniform_trapezoid(values: &[f64], step: f64) -> f64 {
    let n = values.len();
    step * (values.iter().sum::<f64>() - 0.5 * (values[0] + values[n - 1]))
}

fn half(v: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.shuffle(rng);
    idx.truncate(v.len() / 2);
    idx.sort_unstable();
    idx.into_iter().map(|i| v[i]).collect()
}

/// Half-samples have twice the variance of the full-sample statistic.
fn split_half_error(replicates: &[f64]) -> f64 {
    sample_mean_sd(replicates).1 / std::f64::consts::SQRT_2
}

fn floor_cache() -> &'static Mutex<HashMap<(Method, usize), f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(Method, usize), f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn cached_floor(method: Method, n: usize, compute: impl FnOnce() -> Result<f64>) -> Result<f64> {
    if let Some(v) = floor_cache().lock().expect("floor cache poisoned").get(&(method, n)) {
        return Ok(*v);
    }
    let v = compute()?;
    floor_cache().lock().expect("floor cache poisoned").insert((method, n), v);
    Ok(v)
}

/// [`tv_empirical`] between two independent standard-normal samples of size `n`.
pub fn tv_noise_floor(n: usize) -> Result<f64> {
    cached_floor(Method::TvKde, n, || {
        let a = standard_normals(SeedSpec::new(FLOOR_SEED, 1), n);
        let b = standard_normals(SeedSpec::new(FLOOR_SEED, 2), n);
        Ok(tv_pair(&a, &b)?.0)
    })
}

/// [`tv_vs_normal`] of a standard-normal sample of size `n` against `N(0, 1)`.
pub fn tv_normal_noise_floor(n: usize) -> Result<f64> {
    cached_floor(Method::TvVsNormal, n, || {
        let a = standard_normals(SeedSpec::new(FLOOR_SEED, 3), n);
        Ok(tv_normal_once(&a, 0.0, 1.0)?.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{simulate_displacement_coupled, RunOptions};
    use crate::model::{builtin, SolverGrid};
    use proptest::prelude::*;

    const TV_SHIFT_HALF: f64 = 0.197_412_651_365_847_45;

    fn normals(stream: u64, n: usize, mean: f64, sd: f64) -> Vec<f64> {
        standard_normals(SeedSpec::new(99, stream), n).into_iter().map(|z| mean + sd * z).collect()
    }

    #[test]
    fn kde_matches_normal_density_and_integrates_to_one() {
        let s = normals(1, 100_000, 0.0, 1.0);
        let d = kde_density(&s, None).unwrap();
        assert_eq!(d.grid.len(), KDE_GRID_POINTS);
        assert!((d.integral() - 1.0).abs() < 1e-6, "{}", d.integral());
        let worst = d.grid.iter().zip(&d.density).map(|(x, f)| (f - normal_pdf(*x)).abs()).fold(0.0, f64::max);
        assert!(worst < 0.01, "{worst}");
    }

    #[test]
    fn kde_recurrence_agrees_with_direct_sum() {
        let s = normals(2, 300, 0.3, 2.0);
        let d = kde_density(&s, Some(0.4)).unwrap();
        for j in (0..KDE_GRID_POINTS).step_by(97) {
            let x = d.grid[j];
            let direct: f64 = s.iter().map(|v| normal_pdf((x - v) / 0.4)).sum::<f64>() / (300.0 * 0.4);
            assert!((d.density[j] - direct).abs() < 1e-12 * direct.max(1.0), "{j}");
        }
    }

    #[test]
    fn kde_rejects_degenerate_and_small_inputs() {
        assert!(matches!(kde_density(&[2.5; 200], None), Err(Error::Degenerate(_))));
        assert!(matches!(kde_density(&[1.0; 50], None), Err(Error::Domain(_))));
    }

    #[test]
    fn silverman_reference() {
        // Quartiles of 0..=100 are 25 and 75; sd = sqrt(858.5).
        let s: Vec<f64> = (0..=100).map(f64::from).collect();
        let h = silverman_bandwidth(&s).unwrap();
        let expect = 0.9 * (50.0f64 / 1.34).min(858.5f64.sqrt()) * 101f64.powf(-0.2);
        assert!((h - expect).abs() < 1e-12);
    }

    #[test]
    fn tv_same_law_floor_and_shifted_law() {
        let a = normals(3, 100_000, 0.0, 1.0);
        let b = normals(4, 100_000, 0.0, 1.0);
        let same = tv_empirical(&a, &b).unwrap();
        assert!(same.value < 0.02, "{}", same.value);
        assert!(same.noise_floor.unwrap() < 0.02);
        let c = normals(5, 100_000, 0.5, 1.0);
        let shifted = tv_empirical(&a, &c).unwrap();
        assert!((shifted.value - TV_SHIFT_HALF).abs() < 0.02, "{}", shifted.value);
        assert!(shifted.std_error > 0.0 && shifted.std_error < 0.01);
    }

    #[test]
    fn tv_of_disjoint_supports_is_one() {
        let u: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let v: Vec<f64> = u.iter().map(|x| x + 10.0).collect();
        let tv = tv_empirical(&u, &v).unwrap();
        assert!(tv.value > 0.999 && tv.value <= 1.0);
    }

    #[test]
    fn tv_vs_normal_examples() {
        let s = normals(6, 100_000, 0.0, 1.0);
        let exact = tv_vs_normal(&s, 0.0, 1.0).unwrap();
        assert!(exact.value < 0.015, "{}", exact.value);
        assert!(tv_normal_noise_floor(100_000).unwrap() < 0.015);
        let off = tv_vs_normal(&s, 0.5, 1.0).unwrap();
        assert!((off.value - TV_SHIFT_HALF).abs() < 0.02, "{}", off.value);
        assert!(matches!(tv_vs_normal(&s, 0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn doubling_the_grid_barely_moves_tv() {
        let a = normals(7, 20_000, 0.0, 1.0);
        let b = normals(8, 20_000, 0.3, 1.1);
        let h = silverman_bandwidth(&a).unwrap().max(silverman_bandwidth(&b).unwrap());
        let (la, ua) = extent(&a);
        let (lb, ub) = extent(&b);
        let (lo, hi) = (la.min(lb) - KDE_PAD * h, ua.max(ub) + KDE_PAD * h);
        let tv_at = |n: usize| {
            let step = (hi - lo) / (n - 1) as f64;
            let fa = kde_on_grid(&a, h, lo, step, n);
            let fb = kde_on_grid(&b, h, lo, step, n);
            let d: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).collect();
            0.5 * uniform_trapezoid(&d, step)
        };
        assert!((tv_at(KDE_GRID_POINTS) - tv_at(2 * KDE_GRID_POINTS)).abs() < 1e-4);
    }

    #[test]
    fn tv_halving_n_is_consistent() {
        let a = normals(9, 100_000, 0.0, 1.0);
        let b = normals(10, 100_000, 0.5, 1.0);
        let full = tv_empirical(&a, &b).unwrap();
        let halfn = tv_empirical(&a[..50_000], &b[..50_000]).unwrap();
        assert!((full.value - halfn.value).abs() < 3.0 * halfn.std_error.max(full.std_error) + 0.005);
    }

    #[test]
    fn wasserstein_examples() {
        let a = normals(11, 100_000, 0.0, 1.0);
        assert_eq!(wasserstein_1d(&a, &a, 2.0).unwrap().value, 0.0);
        let b = normals(12, 100_000, 1.0, 1.0);
        let w = wasserstein_1d(&a, &b, 2.0).unwrap();
        assert!((w.value - 1.0).abs() < 0.02 && w.std_error < 0.01, "{w:?}");
        let c = normals(13, 100_000, 0.0, 2.0);
        let w = wasserstein_1d(&a, &c, 2.0).unwrap();
        assert!((w.value - 1.0).abs() < 0.02, "{}", w.value);
        assert_eq!(w.replicates.len(), BOOTSTRAP_RESAMPLES);
        let uneven = wasserstein_1d(&a, &b[..1000], 1.0).unwrap();
        assert_eq!(uneven.n_samples, 1000);
        assert!(matches!(wasserstein_1d(&[], &a, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn lp_sup_identity_shift_and_rate() {
        let spec = builtin("linear").unwrap().kappa(1.0).gamma(0.0).initial(0.5, 0.0).build().unwrap();
        let grid = SolverGrid::capped(&spec).unwrap();
        let mut est = Vec::new();
        for &alpha in &[64.0, 256.0] {
            let run =
                simulate_displacement_coupled(&spec, &grid, alpha, 10_000, SeedSpec::new(1, 1), &RunOptions::default())
                    .unwrap();
            est.push(lp_sup_distance(&run.primary, &run.companion, 2.0).unwrap());
        }
        let ratio = est[0].value / est[1].value;
        assert!((1.5..=2.7).contains(&ratio), "{ratio}");
        assert_eq!(est[0].replicates.len(), LP_BATCHES);

        let run =
            simulate_displacement_coupled(&spec, &grid, 16.0, 50, SeedSpec::new(1, 2), &RunOptions::full_paths())
                .unwrap();
        let mut twin = run.primary.clone();
        twin.running_sup = None;
        let zero = lp_sup_distance(&run.primary, &twin, 2.0).unwrap();
        assert_eq!(zero.value, 0.0);
        let mut shifted = twin.clone();
        shifted.x_paths.as_mut().unwrap().mapv_inplace(|v| v + 0.25);
        let d = lp_sup_distance(&twin, &shifted, 3.0).unwrap();
        assert!((d.value - 0.25).abs() < 1e-12);
    }

    #[test]
    fn lp_sup_rejects_uncoupled_bundles() {
        let spec = builtin("linear").unwrap().build().unwrap();
        let grid = SolverGrid::capped(&spec).unwrap();
        let a = simulate_displacement_coupled(&spec, &grid, 4.0, 20, SeedSpec::new(1, 1), &RunOptions::full_paths())
            .unwrap();
        let b = simulate_displacement_coupled(&spec, &grid, 4.0, 20, SeedSpec::new(2, 1), &RunOptions::full_paths())
            .unwrap();
        assert!(matches!(lp_sup_distance(&a.primary, &b.companion, 2.0), Err(Error::Coupling(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn tv_is_symmetric_bounded_and_roughly_triangular(
            s in 0u64..1000, ma in -1.0f64..1.0, mb in -1.0f64..1.0, sb in 0.5f64..2.0,
        ) {
            let n = 2000;
            let a = normals(3 * s, n, ma, 1.0);
            let b = normals(3 * s + 1, n, mb, sb);
            let c = normals(3 * s + 2, n, 0.0, 1.0);
            let ab = tv_empirical(&a, &b).unwrap();
            let ba = tv_empirical(&b, &a).unwrap();
            prop_assert_eq!(ab.value, ba.value);
            prop_assert!((0.0..=1.0).contains(&ab.value));
            let floor = tv_noise_floor(n).unwrap();
            let ac = tv_empirical(&a, &c).unwrap().value;
            let bc = tv_empirical(&b, &c).unwrap().value;
            prop_assert!(ac <= ab.value + bc + 3.0 * floor);
        }

        #[test]
        fn wasserstein_is_nonnegative(s in 0u64..1000, shift in -2.0f64..2.0) {
            let a = normals(s, 300, 0.0, 1.0);
            let b: Vec<f64> = a.iter().map(|v| v + shift).collect();
            let w = wasserstein_1d(&a, &b, 1.0).unwrap();
            prop_assert!((w.value - shift.abs()).abs() < 1e-12);
        }
    }
}
