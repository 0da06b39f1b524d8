//! Command-line front end: JSON experiment configs, dispatch, and the CSV/JSON
//! artifacts each subcommand leaves in the output directory.
//!
//! Exit codes: 0 pass, 2 failed verdict, 1 error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::distances::{tv_empirical, tv_vs_normal, wasserstein_1d};
use crate::error::{Error, Result};
use crate::integrators::{
    simulate_limit, simulate_ou, simulate_rescaled, simulate_rescaled_opts,
    simulate_underdamped, w_alpha_variance, w_alpha_variance_oracle, PathBundle,
    RunOptions,
};
use crate::malliavin::tv_bound_rescaled;
use crate::model::{builtin, lambda_kernel, InlineCoefficients, ModelSpec, SolverGrid};
use crate::noise::{correlated_kick, kick_covariance, make_increments, standard_normals, SeedSpec};
use crate::ratefit::{
    alpha_sweep, chaos_monotone, is_monotone, loglog_fit, particle_sweep, Experiment, RateRow, RateTable, Target,
    Verdict, BOOTSTRAP_RESAMPLES, FIT_BOOTSTRAP_SEED, VERDICT_TOLERANCE,
};
use crate::special::sample_mean_sd;

/// Default output directory when neither `--out` nor the config names one.
pub const OUT_DIR_ENV: &str = "SKLIMIT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "sklimit-out";
pub const ROWS_HEADER: &str = "alpha,estimate,std_error,n_samples,method,excluded";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_FAIL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sklimit", version, about = "Zero-mass limit simulations and convergence-rate checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config; defaults apply to every omitted key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory, overriding the config and SKLIMIT_OUT_DIR.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Simulate one ensemble and write its trajectories.
    Simulate,
    /// Alpha sweep of one convergence target with a log-log fit.
    Sweep {
        #[arg(long, value_parser = parse_target)]
        target: Option<Target>,
    },
    /// Gaussianity of the scaled velocity across alphas.
    TvVelocity,
    /// Particle-system marginals against a large mean-field ensemble.
    Chaos,
    /// Total-variation bound against the empirical distance.
    MalliavinBound,
    /// Estimator self-calibration on Gaussian pairs.
    Validate,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Sweep { .. } => "sweep",
            Command::TvVelocity => "tv-velocity",
            Command::Chaos => "chaos",
            Command::MalliavinBound => "malliavin-bound",
            Command::Validate => "validate",
        }
    }
}

fn parse_target(s: &str) -> std::result::Result<Target, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A registry name or inline coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, expecting = "a built-in model name or an inline coefficient object")]
pub enum ModelRef {
    Name(String),
    Inline(InlineCoefficients),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    Underdamped,
    Limit,
    Rescaled,
    Ou,
}

fn default_model() -> ModelRef {
    ModelRef::Name("linear".into())
}
fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn default_alphas() -> Vec<f64> {
    vec![16.0, 64.0, 256.0, 1024.0]
}
fn default_m_paths() -> usize {
    10_000
}
fn default_particles() -> Vec<usize> {
    vec![8, 64, 512]
}
fn default_true() -> bool {
    true
}
fn default_threshold() -> f64 {
    0.05
}
fn default_process() -> Process {
    Process::Underdamped
}

/// Experiment description. Every key is optional; unknown keys are rejected.
/// The shipped JSON schema mirrors this struct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_model")]
    pub model: ModelRef,
    #[serde(default = "one")]
    pub kappa: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub y0: f64,
    #[serde(rename = "T", default = "one")]
    pub horizon: f64,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default = "default_m_paths")]
    pub m_paths: usize,
    /// Smallest grid within the step cap when absent.
    #[serde(default)]
    pub n_steps: Option<usize>,
    /// The horizon when absent.
    #[serde(default)]
    pub t_eval: Option<f64>,
    #[serde(default)]
    pub target: Option<Target>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sigma_floor: Option<f64>,
    /// Rerun the largest alpha on the halved grid during sweeps.
    #[serde(default = "default_true")]
    pub bias_check: bool,
    /// Process written by `simulate`.
    #[serde(default = "default_process")]
    pub process: Process,
    /// Particle counts for `chaos`.
    #[serde(default = "default_particles")]
    pub particles: Vec<usize>,
    /// Size of the mean-field reference ensemble for `chaos`.
    #[serde(default = "default_m_paths")]
    pub mean_field_paths: usize,
    /// `tv-velocity` passes when the largest alpha is below this.
    #[serde(default = "default_threshold")]
    pub tv_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Parses a config, reporting the line and field path of the first problem.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        Error::Config { line: inner.line(), field, message: inner.to_string() }
    })?;
    cfg.check(text)?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    parse_config(&text)
}

/// First line mentioning `"field"`, or 0.
fn line_of(text: &str, field: &str) -> usize {
    let key = format!("\"{field}\"");
    text.lines().position(|l| l.contains(&key)).map_or(0, |i| i + 1)
}

impl ExperimentConfig {
    fn check(&self, text: &str) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config { line: line_of(text, field), field: field.into(), message };
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(bad(field, format!("must be positive, got {v}")))
            }
        };
        positive("kappa", self.kappa)?;
        positive("T", self.horizon)?;
        positive("tv_threshold", self.tv_threshold)?;
        if !(self.gamma >= 0.0) {
            return Err(bad("gamma", format!("must be nonnegative, got {}", self.gamma)));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(bad("alphas", "must be a nonempty list of positive numbers".into()));
        }
        if !(self.p >= 1.0) {
            return Err(bad("p", format!("must be at least 1, got {}", self.p)));
        }
        if self.m_paths < 2 || self.mean_field_paths < 2 {
            return Err(bad(if self.m_paths < 2 { "m_paths" } else { "mean_field_paths" }, "need at least 2 paths".into()));
        }
        if self.n_steps == Some(0) {
            return Err(bad("n_steps", "must be positive".into()));
        }
        if let Some(t) = self.t_eval {
            if !(t > 0.0 && t <= self.horizon) {
                return Err(bad("t_eval", format!("must lie in (0, T], got {t}")));
            }
        }
        if self.particles.is_empty() || self.particles.contains(&0) {
            return Err(bad("particles", "must be a nonempty list of positive counts".into()));
        }
        if let ModelRef::Name(n) = &self.model {
            builtin(n).map_err(|e| bad("model", e.to_string()))?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let b = match &self.model {
            ModelRef::Name(n) => builtin(n)?,
            ModelRef::Inline(c) => c.builder(),
        };
        let b = b.kappa(self.kappa).gamma(self.gamma).initial(self.x0, self.y0).horizon(self.horizon);
        match self.sigma_floor {
            Some(f) => b.sigma_floor(f).build(),
            None => b.build(),
        }
    }

    pub fn grid(&self, spec: &ModelSpec) -> Result<SolverGrid> {
        match self.n_steps {
            Some(n) => SolverGrid::for_model(spec, n),
            None => SolverGrid::capped(spec),
        }
    }

    pub fn t_eval(&self) -> f64 {
        self.t_eval.unwrap_or(self.horizon)
    }

    pub fn seed(&self) -> SeedSpec {
        SeedSpec::new(self.seed, 0)
    }

    pub fn experiment(&self, target: Target) -> Result<Experiment> {
        let spec = self.model_spec()?;
        let grid = self.grid(&spec)?;
        Ok(Experiment {
            target,
            p: self.p,
            t_eval: self.t_eval(),
            alphas: self.alphas.clone(),
            m_paths: self.m_paths,
            seed: self.seed(),
            spec,
            grid,
            bias_check: self.bias_check,
        })
    }
}

/// One line of `rows.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub alpha: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub method: String,
    pub excluded: bool,
}

impl From<&RateRow> for CsvRow {
    fn from(r: &RateRow) -> Self {
        CsvRow {
            alpha: r.alpha,
            estimate: r.estimate,
            std_error: r.std_error,
            n_samples: r.n_samples,
            method: r.method.as_str().into(),
            excluded: r.excluded,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.into(), source }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io { path: path.into(), source: std::io::Error::other(e.to_string()) }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Rows written with the fixed sweep header; an empty table still gets the header.
pub fn write_rows(path: &Path, rows: &[CsvRow]) -> Result<()> {
    if rows.is_empty() {
        return fs::write(path, format!("{ROWS_HEADER}\n")).map_err(io_err(path));
    }
    write_csv(path, rows)
}

/// `M x (n+1)` matrix with one column per grid node.
fn write_paths(path: &Path, steps: usize, paths: &ndarray::Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = (0..=steps).map(|k| format!("t{k}")).collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in paths.rows() {
        w.write_record(row.iter().take(steps + 1).map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

/// Everything a run produced, before it is written out.
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    command: &'static str,
}

impl Ctx<'_> {
    fn manifest(&self, extra: serde_json::Value) -> Result<()> {
        let mut m = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.cfg.seed,
            "config": self.cfg,
            "fit": {
                "bootstrap_seed": FIT_BOOTSTRAP_SEED,
                "bootstrap_resamples": BOOTSTRAP_RESAMPLES,
                "verdict_tolerance": VERDICT_TOLERANCE,
            },
        });
        if let (Some(obj), serde_json::Value::Object(more)) = (m.as_object_mut(), extra) {
            obj.extend(more);
        }
        write_json(&self.out.join("run-manifest.json"), &m)
    }
}

fn table_json(t: &RateTable) -> serde_json::Value {
    let fit = t.fit.as_ref();
    json!({
        "target": t.target,
        "slope": fit.map(|f| f.slope),
        "intercept": fit.map(|f| f.intercept),
        "ci": fit.map(|f| [f.ci.0, f.ci.1]),
        "n_rows": fit.map(|f| f.n_rows),
        "predicted_slope": t.predicted_slope,
        "verdict": t.verdict,
        "monotone": t.monotone,
        "bias_check": t.bias_check,
    })
}

fn rows_provenance(rows: &[RateRow]) -> serde_json::Value {
    json!(rows
        .iter()
        .map(|r| json!({ "alpha": r.alpha, "noise_floor": r.noise_floor, "replicates": r.replicates }))
        .collect::<Vec<_>>())
}

fn verdict_block(name: &str, t: &RateTable) -> String {
    let mut s = format!("{name}: {} rows\n", t.rows.len());
    for r in &t.rows {
        s += &format!(
            "  alpha={:<8} estimate={:.5e} se={:.2e}{}\n",
            r.alpha,
            r.estimate,
            r.std_error,
            if r.excluded { " (excluded: noise floor)" } else { "" }
        );
    }
    if let Some(f) = &t.fit {
        s += &format!(
            "  slope={:.4} ci=[{:.4}, {:.4}] predicted={}\n",
            f.slope, f.ci.0, f.ci.1, t.predicted_slope
        );
    }
    s += &format!("  verdict: {:?}\n", t.verdict.unwrap_or(Verdict::InsufficientData));
    s
}

fn run_sweep(ctx: &Ctx, target: Target) -> Result<Outcome> {
    let exp = ctx.cfg.experiment(target)?;
    let table = match alpha_sweep(&exp) {
        Ok(t) => t,
        Err(Error::SweepAborted { alpha, source, partial }) => {
            let rows: Vec<CsvRow> = partial.rows.iter().map(CsvRow::from).collect();
            write_rows(&ctx.out.join("rows.csv"), &rows)?;
            return Err(Error::SweepAborted { alpha, source, partial });
        }
        Err(e) => return Err(e),
    };
    let rows: Vec<CsvRow> = table.rows.iter().map(CsvRow::from).collect();
    write_rows(&ctx.out.join("rows.csv"), &rows)?;
    write_json(&ctx.out.join("fit.json"), &table_json(&table))?;
    ctx.manifest(json!({
        "target": target,
        "grid": exp.grid,
        "t_eval": exp.t_eval,
        "rows": rows_provenance(&table.rows),
    }))?;
    if table.verdict == Some(Verdict::InsufficientData) {
        return Err(Error::InsufficientData(format!(
            "{} alphas swept; a verdict needs at least {}",
            exp.alphas.len(),
            crate::ratefit::MIN_VERDICT_ALPHAS
        )));
    }
    Ok(Outcome { passed: table.passed(), summary: verdict_block(target.as_str(), &table) })
}

fn run_tv_velocity(ctx: &Ctx) -> Result<Outcome> {
    let exp = ctx.cfg.experiment(Target::VelocityGaussianTv)?;
    let mut table = alpha_sweep(&exp)?;
    let last = table.rows.last().expect("validated sweep has rows").estimate;
    let monotone = is_monotone(&table.rows);
    let passed = last < ctx.cfg.tv_threshold && monotone;
    table.verdict = Some(if passed { Verdict::Pass } else { Verdict::Fail });
    let rows: Vec<CsvRow> = table.rows.iter().map(CsvRow::from).collect();
    write_rows(&ctx.out.join("rows.csv"), &rows)?;
    let mut fit = table_json(&table);
    fit["threshold"] = json!(ctx.cfg.tv_threshold);
    fit["largest_alpha_estimate"] = json!(last);
    write_json(&ctx.out.join("fit.json"), &fit)?;
    let spec = &exp.spec;
    let s = spec.sigma_raw(exp.t_eval, spec.x0);
    ctx.manifest(json!({
        "target": Target::VelocityGaussianTv,
        "grid": exp.grid,
        "t_eval": exp.t_eval,
        "reference_variance": s * s / (2.0 * spec.kappa_plus_gamma()),
        "rows": rows_provenance(&table.rows),
    }))?;
    let mut summary = verdict_block("velocity_gaussian_tv", &table);
    summary += &format!("  largest-alpha TV {last:.4} vs threshold {}\n", ctx.cfg.tv_threshold);
    Ok(Outcome { passed, summary })
}

fn run_chaos(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let spec = cfg.model_spec()?;
    let grid = cfg.grid(&spec)?;
    let alpha = cfg.alphas[0];
    let rows = particle_sweep(&spec, &grid, alpha, &cfg.particles, cfg.mean_field_paths, cfg.t_eval(), cfg.seed())?;
    write_csv(&ctx.out.join("chaos.csv"), &rows)?;
    let monotone = chaos_monotone(&rows);
    write_json(&ctx.out.join("fit.json"), &json!({ "monotone": monotone, "verdict": if monotone { "pass" } else { "fail" } }))?;
    ctx.manifest(json!({
        "alpha": alpha,
        "grid": grid,
        "t_eval": cfg.t_eval(),
        "rows": rows.iter().map(|r| json!({ "n_particles": r.n_particles, "replicates": r.replicates })).collect::<Vec<_>>(),
    }))?;
    let mut summary = format!("chaos at alpha={alpha}\n");
    for r in &rows {
        summary += &format!("  N={:<5} W2={:.5e} se={:.2e}\n", r.n_particles, r.estimate, r.std_error);
    }
    summary += &format!("  monotone: {monotone}\n");
    Ok(Outcome { passed: monotone, summary })
}

#[derive(Serialize)]
struct BoundRow {
    alpha: f64,
    t: f64,
    l2_term: f64,
    h_term: f64,
    bound: f64,
    empirical_tv: f64,
    tv_std_error: f64,
    noise_floor: f64,
    dominates: bool,
}

/// Bound slopes pass inside this interval.
pub const BOUND_SLOPE_RANGE: (f64, f64) = (-0.75, -0.25);

fn run_malliavin(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let spec = cfg.model_spec()?;
    let t = cfg.t_eval();
    let grid = SolverGrid::capped(&spec)?;
    let seed = cfg.seed();
    let s00 = spec.sigma00();
    let var = s00 * s00 * crate::model::lambda(t, 2.0 * spec.kappa_plus_gamma());
    let mut rows = Vec::new();
    for (i, &alpha) in cfg.alphas.iter().enumerate() {
        let arm = seed.arm(i as u64);
        let b = tv_bound_rescaled(alpha, t, &spec, cfg.m_paths, arm)?;
        let run = simulate_rescaled_opts(&spec, &grid, alpha, cfg.m_paths, arm, &RunOptions::until(t))?;
        let tv = tv_vs_normal(run.primary.y_final.as_ref().expect("velocities"), 0.0, var)?;
        let floor = tv.noise_floor.unwrap_or(0.0);
        rows.push(BoundRow {
            alpha,
            t,
            l2_term: b.l2_term,
            h_term: b.h_term,
            bound: b.bound,
            empirical_tv: tv.value,
            tv_std_error: tv.std_error,
            noise_floor: floor,
            dominates: b.bound >= tv.value - 2.0 * floor,
        });
    }
    write_csv(&ctx.out.join("bounds.csv"), &rows)?;
    let rate_rows: Vec<RateRow> = rows
        .iter()
        .map(|r| RateRow {
            alpha: r.alpha,
            estimate: r.bound,
            std_error: 0.0,
            n_samples: cfg.m_paths,
            method: crate::distances::Method::LpSup,
            excluded: false,
            noise_floor: None,
            replicates: Vec::new(),
        })
        .collect();
    let dominates = rows.iter().all(|r| r.dominates);
    let fit = loglog_fit(&rate_rows).ok();
    let slope_ok = fit.is_some_and(|f| (BOUND_SLOPE_RANGE.0..=BOUND_SLOPE_RANGE.1).contains(&f.slope));
    let passed = dominates && slope_ok && rows.len() >= 2;
    write_json(
        &ctx.out.join("fit.json"),
        &json!({
            "slope": fit.map(|f| f.slope),
            "intercept": fit.map(|f| f.intercept),
            "slope_range": [BOUND_SLOPE_RANGE.0, BOUND_SLOPE_RANGE.1],
            "dominates": dominates,
            "verdict": if passed { "pass" } else { "fail" },
        }),
    )?;
    ctx.manifest(json!({ "t_eval": t, "grid": grid, "reference_variance": var }))?;
    let mut summary = String::from("malliavin bound\n");
    for r in &rows {
        summary += &format!(
            "  alpha={:<8} bound={:.4e} tv={:.4e} floor={:.2e} dominates={}\n",
            r.alpha, r.bound, r.empirical_tv, r.noise_floor, r.dominates
        );
    }
    if let Some(f) = fit {
        summary += &format!("  bound slope={:.4}\n", f.slope);
    }
    Ok(Outcome { passed, summary })
}

/// Row of `validate.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub check: &'static str,
    pub estimate: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(check: &'static str, estimate: f64, expected: f64, tolerance: f64) -> Self {
        Check { check, estimate, expected, tolerance, passed: (estimate - expected).abs() <= tolerance }
    }
}

/// Distance estimators and kernels against Gaussian closed forms.
pub fn calibration_checks(seed: SeedSpec, n: usize) -> Result<Vec<Check>> {
    let z0 = standard_normals(seed.arm(0), n);
    let z1 = standard_normals(seed.arm(1), n);
    let shifted: Vec<f64> = z1.iter().map(|z| z + 0.5).collect();
    let scaled: Vec<f64> = z1.iter().map(|z| 2.0 * z).collect();
    // 2 Phi(1/4) - 1
    let tv_shift = 0.197_412_651_365_309_5;
    let mut out = vec![
        Check::new("tv_shifted_normals", tv_empirical(&z0, &shifted)?.value, tv_shift, 0.02),
        Check::new("tv_vs_normal_shift", tv_vs_normal(&z0, 0.5, 1.0)?.value, tv_shift, 0.02),
        Check::new("w2_scaled_normals", wasserstein_1d(&z0, &scaled, 2.0)?.value, 1.0, 0.03),
        Check::new("w1_shifted_normals", wasserstein_1d(&z0, &shifted, 1.0)?.value, 0.5, 0.03),
    ];

    let mut worst = 0.0f64;
    for &(t, a) in &[(1.0f64, 2.0f64), (0.5, 1e-9), (3.0, 40.0), (1e-3, 5.0)] {
        let direct = -(-a * t).exp_m1() / a;
        worst = worst.max((lambda_kernel(t, a)? - direct).abs() / direct);
    }
    out.push(Check::new("lambda_closed_form", worst, 0.0, 1e-12));

    // Kick covariance by Monte Carlo: standardized error of the cross moment.
    let (a, h) = (3.0, 0.2);
    let (_, _, c12) = kick_covariance(a, h);
    let m = n.min(50_000);
    let u = standard_normals(seed.arm(2), 2 * m);
    let prods: Vec<f64> = (0..m)
        .map(|i| {
            let (k1, k2) = correlated_kick(a, h, u[2 * i], u[2 * i + 1]).expect("valid kick parameters");
            k1 * k2
        })
        .collect();
    let (mean, sd) = sample_mean_sd(&prods);
    out.push(Check::new("kick_cross_moment_z", (mean - c12) / (sd / (m as f64).sqrt()), 0.0, 4.0));

    let spec = builtin("velocity_trig")?.build()?;
    let mut worst = 0.0f64;
    for &(alpha, t) in &[(4.0, 0.5), (64.0, 1.0), (1024.0, 0.1)] {
        let q = w_alpha_variance(&spec, alpha, t)?;
        let o = w_alpha_variance_oracle(&spec, alpha, t, 200_000)?;
        worst = worst.max((q - o).abs() / o);
    }
    out.push(Check::new("w_alpha_variance_vs_isometry", worst, 0.0, 1e-6));
    Ok(out)
}

fn run_validate(ctx: &Ctx) -> Result<Outcome> {
    let checks = calibration_checks(ctx.cfg.seed(), 100_000)?;
    write_csv(&ctx.out.join("validate.csv"), &checks)?;
    ctx.manifest(json!({ "n_samples": 100_000 }))?;
    let passed = checks.iter().all(|c| c.passed);
    let mut summary = String::from("estimator calibration\n");
    for c in &checks {
        summary += &format!(
            "  [{}] {:<30} {:.6} (expected {} +/- {})\n",
            if c.passed { "pass" } else { "FAIL" },
            c.check,
            c.estimate,
            c.expected,
            c.tolerance
        );
    }
    Ok(Outcome { passed, summary })
}

fn run_simulate(ctx: &Ctx) -> Result<Outcome> {
    let cfg = ctx.cfg;
    let spec = cfg.model_spec()?;
    let grid = cfg.grid(&spec)?;
    let seed = cfg.seed();
    let alpha = cfg.alphas[0];
    let m = cfg.m_paths;
    let bundle: PathBundle = match cfg.process {
        Process::Underdamped => simulate_underdamped(&spec, &grid, alpha, m, seed)?,
        Process::Rescaled => simulate_rescaled(&spec, &grid, alpha, m, seed)?.primary,
        Process::Limit => {
            let table = make_increments(seed, m, grid.n_steps(), grid.dt())?;
            simulate_limit(&spec, &grid, m, &table)?
        }
        Process::Ou => {
            let table = make_increments(seed, m, grid.n_steps(), grid.dt())?;
            simulate_ou(spec.sigma00(), spec.kappa_plus_gamma(), &grid, m, &table)?
        }
    };
    let steps = bundle.steps_taken;
    if let Some(x) = &bundle.x_paths {
        write_paths(&ctx.out.join("trajectories.csv"), steps, x)?;
    }
    if let Some(y) = &bundle.y_paths {
        write_paths(&ctx.out.join("velocities.csv"), steps, y)?;
    }
    let times: Vec<f64> = (0..=steps).map(|k| grid.time(k)).collect();
    ctx.manifest(json!({
        "process": cfg.process,
        "alpha": alpha,
        "grid": grid,
        "times": times,
        "noise_fingerprint": bundle.audit.fingerprint,
    }))?;
    Ok(Outcome { passed: true, summary: format!("simulated {m} paths x {} nodes\n", steps + 1) })
}

/// Output directory: `--out`, then the config, then the environment, then the default.
pub fn resolve_out_dir(flag: Option<&Path>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

fn execute(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let ctx = Ctx { cfg, out, command: cli.command.name() };
    match &cli.command {
        Command::Simulate => run_simulate(&ctx),
        Command::Sweep { target } => {
            let target = target.or(cfg.target).ok_or_else(|| Error::Config {
                line: 0,
                field: "target".into(),
                message: "sweep needs a target (config key or --target)".into(),
            })?;
            run_sweep(&ctx, target)
        }
        Command::TvVelocity => run_tv_velocity(&ctx),
        Command::Chaos => run_chaos(&ctx),
        Command::MalliavinBound => run_malliavin(&ctx),
        Command::Validate => run_validate(&ctx),
    }
}

fn log_error(out: &Path, e: &Error) {
    eprintln!("error: {e}");
    let mut chain = format!("{e}\n");
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        chain += &format!("caused by: {s}\n");
        src = s.source();
    }
    if fs::create_dir_all(out).is_ok() {
        let _ = fs::write(out.join("error.log"), chain);
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let cfg = match &cli.config {
        Some(p) => load_config(p),
        None => Ok(ExperimentConfig::default()),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            log_error(&resolve_out_dir(cli.out.as_deref(), None), &e);
            return EXIT_ERROR;
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::Sweep { target: Some(t) } = cli.command {
        cfg.target = Some(t);
    }
    let out = resolve_out_dir(cli.out.as_deref(), Some(&cfg));
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| execute(&cli, &cfg, &out)),
            Err(e) => Err(Error::Resource(format!("thread pool: {e}"))),
        },
        None => execute(&cli, &cfg, &out),
    };
    match result {
        Ok(o) => {
            print!("{}", o.summary);
            if o.passed {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }
        Err(e) => {
            log_error(&out, &e);
            EXIT_ERROR
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = ExperimentConfig::default();
        assert_eq!(c.model, ModelRef::Name("linear".into()));
        assert_eq!(c.alphas, vec![16.0, 64.0, 256.0, 1024.0]);
        assert_eq!(c.t_eval(), 1.0);
        assert!(c.model_spec().is_ok());
    }

    #[test]
    fn inline_model_parses() {
        let c = parse_config(r#"{"model": {"g_sin": 1.0, "g_t": 0.1, "s_t": 0.2}, "kappa": 2}"#).unwrap();
        let spec = c.model_spec().unwrap();
        assert!((spec.sigma00() - 1.0).abs() < 1e-15);
        assert_eq!(spec.kappa, 2.0);
    }

    #[test]
    fn unknown_key_reports_line_and_field() {
        let text = "{\n  \"kappa\": 1.0,\n  \"alpha\": [1, 2]\n}";
        match parse_config(text) {
            Err(Error::Config { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("alpha"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_error_names_the_field() {
        let text = "{\n  \"alphas\": [1, \"x\"]\n}";
        match parse_config(text) {
            Err(Error::Config { line, field, .. }) => {
                assert_eq!(line, 2);
                assert!(field.starts_with("alphas"), "{field}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_checks_point_at_the_key() {
        let text = "{\n  \"T\": 1.0,\n  \"t_eval\": 2.0\n}";
        match parse_config(text) {
            Err(Error::Config { line, field, .. }) => assert_eq!((line, field.as_str()), (3, "t_eval")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config(r#"{"model": "nope"}"#), Err(Error::Config { .. })));
    }

    #[test]
    fn calibration_passes() {
        let checks = calibration_checks(SeedSpec::new(11, 0), 100_000).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
    }
}
