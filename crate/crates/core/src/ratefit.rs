//! Alpha sweeps and log-log rate fits with bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distances::{lp_sup_distance, tv_empirical, tv_vs_normal, wasserstein_1d, DistanceEstimate, Method};
use crate::error::{domain, Error, Result};
use crate::integrators::{
    simulate_displacement_coupled, simulate_particle_replicas, simulate_rescaled_opts, simulate_underdamped_opts,
    RunOptions,
};
use crate::model::{lambda, ModelSpec, SigmaKind, SolverGrid};
use crate::noise::{standard_normals, SeedSpec};
use crate::special::sample_mean_sd;

/// Slack added on both sides of the bootstrap interval before comparing with
/// the predicted slope.
pub const VERDICT_TOLERANCE: f64 = 0.15;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Seed of the slope bootstrap; recorded so fits can be recomputed from rows.
pub const FIT_BOOTSTRAP_SEED: u64 = 0x51_0bee;
pub const MIN_VERDICT_ALPHAS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    DisplacementLp,
    DisplacementTv,
    RescaledLp,
    RescaledTv,
    VelocityGaussianTv,
}

impl Target {
    pub const ALL: [Target; 5] = [
        Target::DisplacementLp,
        Target::DisplacementTv,
        Target::RescaledLp,
        Target::RescaledTv,
        Target::VelocityGaussianTv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::DisplacementLp => "displacement_lp",
            Target::DisplacementTv => "displacement_tv",
            Target::RescaledLp => "rescaled_lp",
            Target::RescaledTv => "rescaled_tv",
            Target::VelocityGaussianTv => "velocity_gaussian_tv",
        }
    }

    /// Every target converges like `alpha^{-1/2}`.
    pub fn predicted_slope(self) -> f64 {
        -0.5
    }

    pub fn is_tv(self) -> bool {
        matches!(self, Target::DisplacementTv | Target::RescaledTv | Target::VelocityGaussianTv)
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| domain(format!("unknown target `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub alpha: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub method: Method,
    /// Excluded from the fit (TV within twice the noise floor).
    pub excluded: bool,
    pub noise_floor: Option<f64>,
    pub replicates: Vec<f64>,
}

impl RateRow {
    pub fn from_estimate(alpha: f64, d: DistanceEstimate) -> Self {
        let excluded = d.noise_floor.is_some_and(|f| d.value < 2.0 * f);
        RateRow {
            alpha,
            estimate: d.value,
            std_error: d.std_error,
            n_samples: d.n_samples,
            method: d.method,
            excluded,
            noise_floor: d.noise_floor,
            replicates: d.replicates,
        }
    }

    fn usable(&self) -> bool {
        !self.excluded && self.estimate > 0.0 && self.estimate.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% bootstrap interval of the slope.
    pub ci: (f64, f64),
    pub n_rows: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    InsufficientData,
}

/// Discretization check at the largest alpha: the same arm rerun on the
/// halved grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCheck {
    pub alpha: f64,
    pub estimate: f64,
    pub estimate_halved: f64,
    pub std_error: f64,
    pub std_error_halved: f64,
    /// `|estimate - estimate_halved|`.
    pub bias: f64,
    /// A third of the smallest signal in the sweep, plus two combined standard errors.
    pub allowance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub target: Option<Target>,
    pub rows: Vec<RateRow>,
    pub fit: Option<Fit>,
    pub predicted_slope: f64,
    pub verdict: Option<Verdict>,
    pub bias_check: Option<BiasCheck>,
    /// Estimates nonincreasing in alpha up to two standard errors per adjacent pair.
    pub monotone: Option<bool>,
}

impl RateTable {
    pub fn passed(&self) -> bool {
        self.verdict == Some(Verdict::Pass)
    }
}

/// Weighted least squares of `log estimate` on `log alpha` with weights
/// `(estimate / std_error)^2`, and a bootstrap interval for the slope.
///
/// Each bootstrap resample perturbs every row as
/// `log est* = log est + (se / est) z*`, where `z*` is the standardized mean of
/// a resample of that row's replicates (a standard normal draw when the row has
/// fewer than two replicates).
pub fn loglog_fit(rows: &[RateRow]) -> Result<Fit> {
    let used: Vec<&RateRow> = rows.iter().filter(|r| r.usable()).collect();
    if used.len() < 2 {
        return Err(Error::InsufficientData(format!("{} usable rows; a fit needs 2", used.len())));
    }
    let xs: Vec<f64> = used.iter().map(|r| r.alpha.ln()).collect();
    if xs.windows(2).any(|w| w[0] == w[1]) || xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::InsufficientData("alphas must be distinct and positive".into()));
    }
    let ys: Vec<f64> = used.iter().map(|r| r.estimate.ln()).collect();
    let weights: Vec<f64> = if used.iter().all(|r| r.std_error > 0.0) {
        used.iter().map(|r| (r.estimate / r.std_error).powi(2)).collect()
    } else {
        vec![1.0; used.len()]
    };
    let (slope, intercept) = wls(&xs, &ys, &weights);

    let mut rng = ChaCha8Rng::seed_from_u64(FIT_BOOTSTRAP_SEED);
    let fallback = standard_normals(SeedSpec::new(FIT_BOOTSTRAP_SEED, 1), BOOTSTRAP_RESAMPLES * used.len());
    let mut slopes = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut ys_star = vec![0.0; used.len()];
    for b in 0..BOOTSTRAP_RESAMPLES {
        for (i, r) in used.iter().enumerate() {
            let z = standardized_resample_mean(&r.replicates, &mut rng)
                .unwrap_or(fallback[b * used.len() + i]);
            ys_star[i] = ys[i] + r.std_error / r.estimate * z;
        }
        slopes.push(wls(&xs, &ys_star, &weights).0);
    }
    slopes.sort_unstable_by(f64::total_cmp);
    let ci = (percentile(&slopes, 0.025), percentile(&slopes, 0.975));
    Ok(Fit { slope, intercept, ci, n_rows: used.len() })
}

fn wls(xs: &[f64], ys: &[f64], w: &[f64]) -> (f64, f64) {
    let sw: f64 = w.iter().sum();
    let mx = xs.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / sw;
    let my = ys.iter().zip(w).map(|(y, w)| y * w).sum::<f64>() / sw;
    let sxy: f64 = xs.iter().zip(ys).zip(w).map(|((x, y), w)| w * (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().zip(w).map(|(x, w)| w * (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

fn standardized_resample_mean(reps: &[f64], rng: &mut ChaCha8Rng) -> Option<f64> {
    let n = reps.len();
    if n < 2 {
        return None;
    }
    let (mean, sd) = sample_mean_sd(reps);
    if !(sd > 0.0) {
        return None;
    }
    let star = (0..n).map(|_| reps[rng.random_range(0..n)]).sum::<f64>() / n as f64;
    Some((star - mean) / (sd / (n as f64).sqrt()))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Verdict of a fit against a predicted slope, given the number of alphas swept.
pub fn verdict(fit: Option<&Fit>, n_alphas: usize, predicted: f64) -> Verdict {
    if n_alphas < MIN_VERDICT_ALPHAS {
        return Verdict::InsufficientData;
    }
    match fit {
        None => Verdict::InsufficientData,
        Some(f) if f.n_rows < MIN_VERDICT_ALPHAS => Verdict::Fail,
        Some(f) => {
            if predicted >= f.ci.0 - VERDICT_TOLERANCE && predicted <= f.ci.1 + VERDICT_TOLERANCE {
                Verdict::Pass
            } else {
                Verdict::Fail
            }
        }
    }
}

/// Adjacent estimates never increase by more than two combined standard errors.
pub fn is_monotone(rows: &[RateRow]) -> bool {
    rows.windows(2).all(|w| w[1].estimate <= w[0].estimate + 2.0 * w[0].std_error.hypot(w[1].std_error))
}

/// One alpha sweep.
#[derive(Clone)]
pub struct Experiment {
    pub target: Target,
    /// Moment for the `L^p` targets.
    pub p: f64,
    pub t_eval: f64,
    pub alphas: Vec<f64>,
    pub m_paths: usize,
    pub seed: SeedSpec,
    pub spec: ModelSpec,
    pub grid: SolverGrid,
    /// Rerun the largest alpha on the halved grid and require agreement.
    pub bias_check: bool,
}

impl Experiment {
    fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() {
            return Err(domain("a sweep needs at least one alpha"));
        }
        if self.alphas.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(domain("alphas must be strictly increasing"));
        }
        if self.alphas.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(domain("alphas must be positive"));
        }
        if matches!(self.target, Target::RescaledLp | Target::RescaledTv) && self.alphas[0] < 1.0 {
            return Err(domain("rescaled targets need alpha >= 1"));
        }
        if matches!(self.target, Target::DisplacementLp | Target::RescaledLp) && !(self.p >= 1.0) {
            return Err(domain(format!("p must be at least 1, got {}", self.p)));
        }
        if self.target == Target::VelocityGaussianTv && self.spec.sigma_kind == SigmaKind::General {
            return Err(Error::SigmaKind { t: self.t_eval });
        }
        if self.t_eval > self.grid.horizon() + 1e-12 || !(self.t_eval > 0.0) {
            return Err(domain(format!("t_eval={} must lie in (0, {}]", self.t_eval, self.grid.horizon())));
        }
        self.grid.node_index(self.t_eval)?;
        self.grid.check_cap(&self.spec)
    }

    /// Runs one arm on the given grid.
    pub fn measure(&self, alpha: f64, arm: u64, grid: &SolverGrid) -> Result<RateRow> {
        let seed = self.seed.arm(arm);
        let opts = RunOptions::until(self.t_eval);
        let spec = &self.spec;
        let est = match self.target {
            Target::DisplacementLp => {
                let run = simulate_displacement_coupled(spec, grid, alpha, self.m_paths, seed, &opts)?;
                lp_sup_distance(&run.primary, &run.companion, self.p)?
            }
            Target::DisplacementTv => {
                let run = simulate_displacement_coupled(spec, grid, alpha, self.m_paths, seed, &opts)?;
                tv_empirical(&run.primary.x_final, &run.companion.x_final)?
            }
            Target::RescaledLp => {
                let run = simulate_rescaled_opts(spec, grid, alpha, self.m_paths, seed, &opts)?;
                lp_sup_distance(&run.primary, &run.companion, self.p)?
            }
            Target::RescaledTv => {
                let run = simulate_rescaled_opts(spec, grid, alpha, self.m_paths, seed, &opts)?;
                let y = run.primary.y_final.as_ref().expect("second-order bundle has velocities");
                let s = spec.sigma00();
                tv_vs_normal(y, 0.0, s * s * lambda(self.t_eval, 2.0 * spec.kappa_plus_gamma()))?
            }
            Target::VelocityGaussianTv => {
                let b = simulate_underdamped_opts(spec, grid, alpha, self.m_paths, seed, &opts)?;
                let root = alpha.sqrt();
                let scaled: Vec<f64> =
                    b.y_final.as_ref().expect("second-order bundle has velocities").iter().map(|y| y / root).collect();
                let s = spec.sigma_raw(self.t_eval, spec.x0);
                tv_vs_normal(&scaled, 0.0, s * s / (2.0 * spec.kappa_plus_gamma()))?
            }
        };
        Ok(RateRow::from_estimate(alpha, est))
    }
}

/// Runs every arm (in parallel, each with seed `(root, arm index)`), fits the
/// slope and renders the verdict. A failing arm aborts the sweep and returns
/// the rows of the arms before it.
pub fn alpha_sweep(exp: &Experiment) -> Result<RateTable> {
    exp.validate()?;
    let results: Vec<Result<RateRow>> = exp
        .alphas
        .par_iter()
        .enumerate()
        .map(|(i, &a)| exp.measure(a, i as u64, &exp.grid))
        .collect();
    let mut table = RateTable { target: Some(exp.target), predicted_slope: exp.target.predicted_slope(), ..RateTable::default() };
    for (res, &alpha) in results.into_iter().zip(&exp.alphas) {
        match res {
            Ok(row) => table.rows.push(row),
            Err(e) => {
                return Err(Error::SweepAborted { alpha, source: Box::new(e), partial: Box::new(table) });
            }
        }
    }
    table.monotone = Some(is_monotone(&table.rows));
    table.fit = loglog_fit(&table.rows).ok();
    table.verdict = Some(verdict(table.fit.as_ref(), exp.alphas.len(), table.predicted_slope));

    if exp.bias_check {
        let last = exp.alphas.len() - 1;
        let alpha = exp.alphas[last];
        let halved = match exp.measure(alpha, last as u64, &exp.grid.halved()) {
            Ok(r) => r,
            Err(e) => return Err(Error::SweepAborted { alpha, source: Box::new(e), partial: Box::new(table) }),
        };
        let full = &table.rows[last];
        let signal = table.rows.iter().map(|r| r.estimate).fold(f64::INFINITY, f64::min);
        let bias = (full.estimate - halved.estimate).abs();
        let allowance = signal / 3.0 + 2.0 * full.std_error.hypot(halved.std_error);
        let check = BiasCheck {
            alpha,
            estimate: full.estimate,
            estimate_halved: halved.estimate,
            std_error: full.std_error,
            std_error_halved: halved.std_error,
            bias,
            allowance,
            passed: bias <= allowance,
        };
        table.bias_check = Some(check);
        if !check.passed {
            let e = Error::Resolution(format!(
                "halving dt at alpha={alpha} moved the estimate by {bias:.3e}, more than {allowance:.3e}"
            ));
            return Err(Error::SweepAborted { alpha, source: Box::new(e), partial: Box::new(table) });
        }
    }
    Ok(table)
}

/// `W_2` between the terminal position marginal of `n`-particle systems and a
/// large mean-field ensemble, one row per particle count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosRow {
    pub n_particles: usize,
    pub replicas: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub method: Method,
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

/// Replicas so that `replicas * n` reaches the reference ensemble size.
pub fn chaos_replicas(n_particles: usize, reference: usize) -> usize {
    reference.div_ceil(n_particles)
}

/// The reference ensemble uses arm 0 of `seed`, particle count `i` arm `i + 1`.
pub fn particle_sweep(
    spec: &ModelSpec,
    grid: &SolverGrid,
    alpha: f64,
    particles: &[usize],
    reference_paths: usize,
    t: f64,
    seed: SeedSpec,
) -> Result<Vec<ChaosRow>> {
    let opts = RunOptions::until(t);
    let reference = simulate_underdamped_opts(spec, grid, alpha, reference_paths, seed.arm(0), &opts)?;
    particles
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let replicas = chaos_replicas(n, reference_paths);
            let sys = simulate_particle_replicas(spec, grid, alpha, n, replicas, seed.arm(1 + i as u64), &opts)?;
            let d = wasserstein_1d(&sys.x_final, &reference.x_final, 2.0)?;
            Ok(ChaosRow {
                n_particles: n,
                replicas,
                estimate: d.value,
                std_error: d.std_error,
                n_samples: d.n_samples,
                method: d.method,
                replicates: d.replicates,
            })
        })
        .collect()
}

/// Nonincreasing in the particle count up to two combined standard errors.
pub fn chaos_monotone(rows: &[ChaosRow]) -> bool {
    rows.windows(2).all(|w| w[1].estimate <= w[0].estimate + 2.0 * w[0].std_error.hypot(w[1].std_error))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin;

    fn row(alpha: f64, estimate: f64, se: f64) -> RateRow {
        RateRow {
            alpha,
            estimate,
            std_error: se,
            n_samples: 1000,
            method: Method::LpSup,
            excluded: false,
            noise_floor: None,
            replicates: Vec::new(),
        }
    }

    const ALPHAS: [f64; 4] = [16.0, 64.0, 256.0, 1024.0];

    #[test]
    fn exact_power_law_and_flat_rows() {
        let rows: Vec<RateRow> = ALPHAS.iter().map(|&a| row(a, a.powf(-0.5), 0.01 * a.powf(-0.5))).collect();
        let fit = loglog_fit(&rows).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!(fit.ci.0 < -0.5 && fit.ci.1 > -0.5);
        assert_eq!(verdict(Some(&fit), 4, -0.5), Verdict::Pass);
        let flat: Vec<RateRow> = ALPHAS.iter().map(|&a| row(a, 0.3, 0.001)).collect();
        let fit = loglog_fit(&flat).unwrap();
        assert!(fit.slope.abs() < 1e-12);
        assert_eq!(verdict(Some(&fit), 4, -0.5), Verdict::Fail);
    }

    #[test]
    fn too_few_rows() {
        assert!(matches!(loglog_fit(&[row(16.0, 0.1, 0.01)]), Err(Error::InsufficientData(_))));
        let fit = loglog_fit(&[row(16.0, 0.25, 0.01), row(64.0, 0.125, 0.01)]).unwrap();
        assert_eq!(verdict(Some(&fit), 1, -0.5), Verdict::InsufficientData);
        assert_eq!(verdict(Some(&fit), 4, -0.5), Verdict::Fail);
    }

    #[test]
    fn excluded_rows_are_skipped() {
        let mut rows: Vec<RateRow> = ALPHAS.iter().map(|&a| row(a, a.powf(-0.5), 0.001)).collect();
        rows.push(RateRow { excluded: true, ..row(4096.0, 1.0, 0.001) });
        assert!((loglog_fit(&rows).unwrap().slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law_slope_frequency() {
        // 1000 synthetic sweeps with 5% multiplicative noise.
        let alphas = [16.0f64, 64.0, 256.0, 1024.0, 4096.0];
        let z = standard_normals(SeedSpec::new(77, 0), 1000 * alphas.len());
        let mut inside = 0;
        for rep in 0..1000 {
            let rows: Vec<RateRow> = alphas
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let e = a.powf(-0.5) * (1.0 + 0.05 * z[rep * alphas.len() + i]);
                    row(a, e, 0.05 * e)
                })
                .collect();
            let s = loglog_fit(&rows).unwrap().slope;
            if (-0.6..=-0.4).contains(&s) {
                inside += 1;
            }
        }
        assert!(inside >= 950, "{inside}");
    }

    #[test]
    fn replicates_drive_the_interval() {
        let reps = |c: f64| (0..10).map(|i| c * (1.0 + 0.1 * (i as f64 - 4.5))).collect::<Vec<_>>();
        let rows: Vec<RateRow> = ALPHAS
            .iter()
            .map(|&a| RateRow { replicates: reps(a.powf(-0.5)), ..row(a, a.powf(-0.5), 0.02 * a.powf(-0.5)) })
            .collect();
        let a = loglog_fit(&rows).unwrap();
        let b = loglog_fit(&rows).unwrap();
        assert_eq!(a, b);
        assert!(a.ci.1 - a.ci.0 > 0.0 && a.ci.1 - a.ci.0 < 0.2);
    }

    #[test]
    fn replicas_cover_the_reference() {
        assert_eq!(chaos_replicas(8, 10_000), 1250);
        assert_eq!(chaos_replicas(512, 10_000), 20);
        assert_eq!(chaos_replicas(64, 10_000) * 64, 10_048);
    }

    #[test]
    fn monotone_check() {
        let rows = vec![row(1.0, 1.0, 0.01), row(2.0, 1.02, 0.01), row(4.0, 0.5, 0.01)];
        assert!(is_monotone(&rows));
        let rows = vec![row(1.0, 1.0, 0.01), row(2.0, 1.2, 0.01)];
        assert!(!is_monotone(&rows));
    }

    fn experiment(target: Target, alphas: Vec<f64>, m: usize) -> Experiment {
        let spec = builtin("linear").unwrap().kappa(1.0).gamma(1.0).initial(0.5, 0.0).build().unwrap();
        let grid = SolverGrid::capped(&spec).unwrap();
        Experiment {
            target,
            p: 2.0,
            t_eval: 1.0,
            alphas,
            m_paths: m,
            seed: SeedSpec::new(3, 0),
            spec,
            grid,
            bias_check: false,
        }
    }

    #[test]
    fn single_alpha_sweep_is_insufficient() {
        let t = alpha_sweep(&experiment(Target::DisplacementLp, vec![16.0], 200)).unwrap();
        assert_eq!(t.verdict, Some(Verdict::InsufficientData));
        assert_eq!(t.rows.len(), 1);
    }

    #[test]
    fn small_displacement_sweep_passes_with_bias_check() {
        let mut exp = experiment(Target::DisplacementLp, ALPHAS.to_vec(), 2000);
        exp.bias_check = true;
        let t = alpha_sweep(&exp).unwrap();
        let fit = t.fit.unwrap();
        assert!((-0.65..=-0.35).contains(&fit.slope), "{fit:?}");
        assert_eq!(t.verdict, Some(Verdict::Pass));
        assert_eq!(t.monotone, Some(true));
        assert!(t.bias_check.unwrap().passed);
    }

    #[test]
    fn arms_are_independent_of_sweep_composition() {
        let exp = experiment(Target::RescaledLp, vec![16.0, 64.0], 100);
        let full = alpha_sweep(&exp).unwrap();
        let again = exp.measure(64.0, 1, &exp.grid).unwrap();
        assert_eq!(full.rows[1], again);
    }

    #[test]
    fn velocity_target_needs_position_free_sigma() {
        let mut exp = experiment(Target::VelocityGaussianTv, vec![16.0], 200);
        exp.spec = builtin("trig").unwrap().build().unwrap();
        exp.grid = SolverGrid::capped(&exp.spec).unwrap();
        assert!(matches!(alpha_sweep(&exp), Err(Error::SigmaKind { .. })));
    }

    #[test]
    fn failing_arm_keeps_partial_table() {
        let spec = ModelSpec::builder(|_, x: f64| if x.abs() > 3.0 { f64::NAN } else { -x }, |_, _| 2.0)
            .sigma_kind(SigmaKind::Constant)
            .build()
            .unwrap();
        let grid = SolverGrid::capped(&spec).unwrap();
        let mut exp = experiment(Target::DisplacementLp, vec![1.0, 2.0], 50);
        exp.spec = spec;
        exp.grid = grid;
        match alpha_sweep(&exp) {
            Err(Error::SweepAborted { partial, source, .. }) => {
                assert!(matches!(*source, Error::Evaluation { .. } | Error::BlowUp { .. }));
                assert!(partial.rows.len() < 2);
            }
            other => panic!("expected an aborted sweep, got {:?}", other.map(|t| t.rows.len())),
        }
    }
}
