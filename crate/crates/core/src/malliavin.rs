//! Malliavin derivatives along simulated paths, their `H`-norms, and the
//! total-variation bound for the scaled velocity against its OU limit.
//!
//! All derivatives use the discrete convention of the simulators: for `r` in
//! the step `[t_k, t_{k+1})` the derivative is the sensitivity to that step's
//! noise, so propagation starts from the coefficients frozen at `t_k`. Slices
//! are exactly zero for `r >= t`.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::integrators::{simulate_displacement_coupled, simulate_rescaled_opts, PathBundle, ProcessKind, RunOptions, SecondOrder};
use crate::model::{lambda, CoefficientName, ModelSpec, SolverGrid};
use crate::noise::{Kicks, SeedSpec};
use crate::special::pairwise_mean;

/// Fewest differentiation times accepted by [`hnorm_sq`].
pub const MIN_R_NODES: usize = 8;
pub const DEFAULT_R_NODES: usize = 32;
/// Closest approach of the default r grid to `t`, relative to `t`.
const R_GRID_REACH: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessTag {
    UnderdampedPosition,
    UnderdampedVelocity,
    Limit,
    /// Scaled velocity on the rescaled clock.
    RescaledVelocity,
    OrnsteinUhlenbeck,
}

/// `D_r F_t` on a coarse grid of differentiation times, one row per path.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeSlice {
    pub process: ProcessTag,
    pub t: f64,
    pub r_grid: Vec<f64>,
    /// `paths x r_grid.len()`.
    pub values: Array2<f64>,
}

impl DerivativeSlice {
    /// Pathwise difference of two slices on the same `r` grid.
    pub fn minus(&self, other: &DerivativeSlice) -> Result<DerivativeSlice> {
        if self.r_grid != other.r_grid || self.values.dim() != other.values.dim() || self.t != other.t {
            return Err(domain("slices differ in shape, time or r grid"));
        }
        Ok(DerivativeSlice { values: &self.values - &other.values, ..self.clone() })
    }
}

/// Differentiation times in `[0, t]`: `r = t - d` with `d` geometric from
/// `1e-4 t` to `t`, plus `r = t`. Dense near `t`, where fast derivatives live.
pub fn r_grid(t: f64, n_r: usize) -> Result<Vec<f64>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(domain(format!("r grid needs t > 0, got {t}")));
    }
    if n_r < MIN_R_NODES {
        return Err(Error::Resolution(format!("r grid needs at least {MIN_R_NODES} nodes, got {n_r}")));
    }
    let k = n_r - 2;
    let mut r: Vec<f64> = (0..=k)
        .map(|i| {
            let d = t * R_GRID_REACH.powf(i as f64 / k as f64);
            t - d
        })
        .collect();
    r[0] = 0.0;
    r.push(t);
    Ok(r)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HNorm {
    pub per_path: Vec<f64>,
    pub mean: f64,
}

/// Integral of nonnegative samples under log-linear interpolation: exact for
/// exponentials, trapezoid wherever a node is zero.
fn exp_trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| {
            let w = x[1] - x[0];
            let (a, b) = (y[0], y[1]);
            if a > 0.0 && b > 0.0 {
                let l = (b / a).ln();
                if l.abs() > 1e-6 {
                    return w * (b - a) / l;
                }
            }
            0.5 * w * (a + b)
        })
        .sum()
}

/// `int |D_r F_t|^2 dr` per path over the slice's r grid, interpolating
/// `|D_r F_t|^2` log-linearly between nodes.
pub fn hnorm_sq(slice: &DerivativeSlice) -> Result<HNorm> {
    if slice.r_grid.len() < MIN_R_NODES {
        return Err(Error::Resolution(format!(
            "H-norm needs at least {MIN_R_NODES} r nodes, got {}",
            slice.r_grid.len()
        )));
    }
    let per_path: Vec<f64> = slice
        .values
        .outer_iter()
        .map(|row| {
            let sq: Vec<f64> = row.iter().map(|v| v * v).collect();
            exp_trapezoid(&slice.r_grid, &sq)
        })
        .collect();
    Ok(HNorm { mean: pairwise_mean(&per_path), per_path })
}

/// `D_r Y~_t` of the OU limit in the original clock: `sqrt(alpha) sigma00
/// e^{(kappa+gamma)(r alpha - t)}` for `r alpha < t`, else zero.
pub fn ou_derivative(r: f64, t: f64, alpha: f64, kappa: f64, gamma: f64, sigma00: f64) -> f64 {
    if r * alpha >= t {
        0.0
    } else {
        alpha.sqrt() * sigma00 * ((kappa + gamma) * (r * alpha - t)).exp()
    }
}

/// One stored path of a bundle, with everything needed to replay its noise.
#[derive(Clone, Copy, Debug)]
pub struct PathRecord<'a> {
    bundle: &'a PathBundle,
    index: usize,
}

impl<'a> PathRecord<'a> {
    pub fn new(bundle: &'a PathBundle, index: usize) -> Result<Self> {
        if bundle.x_paths.is_none() {
            return Err(Error::Provenance("bundle was simulated without stored paths".into()));
        }
        if index >= bundle.m_paths() {
            return Err(domain(format!("path {index} out of range for {} paths", bundle.m_paths())));
        }
        Ok(Self { bundle, index })
    }

    fn x(&self, k: usize) -> f64 {
        self.bundle.x_paths.as_ref().expect("checked on construction")[[self.index, k]]
    }

    fn cell(&self, k: usize) -> [f64; 3] {
        self.bundle.increments.normals(self.index, k)
    }

    fn nodes(&self) -> usize {
        self.bundle.steps_taken + 1
    }

    /// Step containing `r`, i.e. the `k` with `t_k <= r < t_{k+1}`.
    fn step_of(&self, r: f64) -> Result<usize> {
        let g = &self.bundle.grid;
        if !(r >= 0.0) || r >= self.bundle.t_final() {
            return Err(domain(format!("r={r} must lie in [0, {})", self.bundle.t_final())));
        }
        let k = ((r / g.dt()) * (1.0 + 1e-12)).floor() as usize;
        Ok(k.min(self.bundle.steps_taken - 1))
    }
}

/// Trace of a derivative from `t = r` to the end of the stored path.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativePath {
    /// `r` followed by every later grid node.
    pub t: Vec<f64>,
    pub dx: Vec<f64>,
    /// Empty for first-order processes.
    pub dy: Vec<f64>,
}

/// `exp(A h)` for `A = [[0, c], [-f, -a]]`, stable for large `a h`.
pub(crate) fn expm2(a: f64, c: f64, f: f64, h: f64) -> [[f64; 2]; 2] {
    let cf = c * f;
    let d2 = 0.25 * a * a - cf;
    if d2 >= 0.0 {
        let d = d2.sqrt();
        let lam_plus = if 0.5 * a + d > 0.0 { -cf / (0.5 * a + d) } else { 0.0 };
        let e_plus = (lam_plus * h).exp();
        let e_minus = ((-0.5 * a - d) * h).exp();
        if d > 0.25 * a && d > 0.0 {
            // Well separated roots: combine the two modes without cancellation.
            let w = (2.0 * d + a) / (4.0 * d);
            let v = cf / (d * (a + 2.0 * d));
            let s = (e_plus - e_minus) / (2.0 * d);
            return [[e_plus * w - e_minus * v, s * c], [-s * f, -e_plus * v + e_minus * w]];
        }
        let s = if d * h < 1e-8 {
            e_minus * h * (1.0 + d * h)
        } else if d * h > 1.0 {
            (e_plus - e_minus) / (2.0 * d)
        } else {
            e_minus * (2.0 * d * h).exp_m1() / (2.0 * d)
        };
        let cc = 0.5 * (e_plus + e_minus);
        [[cc + 0.5 * a * s, s * c], [-s * f, cc - 0.5 * a * s]]
    } else {
        let w = (-d2).sqrt();
        let e = (-0.5 * a * h).exp();
        let cc = e * (w * h).cos();
        let s = e * (w * h).sin() / w;
        [[cc + 0.5 * a * s, s * c], [-s * f, cc - 0.5 * a * s]]
    }
}

/// Per-step data of one path that does not depend on `r`.
struct PairSteps {
    prop: Vec<[[f64; 2]; 2]>,
    sigma_dx: Vec<f64>,
    sigma: Vec<f64>,
    force_dx: Vec<f64>,
    kicks: Vec<Kicks>,
}

fn pair_system(rec: &PathRecord<'_>, alpha: f64, spec: &ModelSpec) -> Result<SecondOrder> {
    let b = rec.bundle;
    match b.alpha {
        Some(a) if (a - alpha).abs() <= 1e-12 * alpha.abs() => {}
        _ => return Err(Error::Provenance(format!("path was simulated at alpha={:?}, not {alpha}", b.alpha))),
    }
    if b.y_paths.is_none() {
        return Err(Error::Provenance("bundle was simulated without stored velocities".into()));
    }
    match b.kind {
        ProcessKind::Underdamped => Ok(SecondOrder::underdamped(spec, alpha)),
        ProcessKind::Rescaled => Ok(SecondOrder::rescaled(spec, alpha)),
        other => Err(domain(format!("{other:?} bundles carry no second-order derivative"))),
    }
}

fn pair_steps(rec: &PathRecord<'_>, sys: &SecondOrder, spec: &ModelSpec) -> Result<PairSteps> {
    let grid = rec.bundle.grid;
    let h = grid.dt();
    let coeffs = sys.coeffs(h);
    let n = rec.nodes() - 1;
    let mut out = PairSteps {
        prop: Vec::with_capacity(n),
        sigma_dx: Vec::with_capacity(n),
        sigma: Vec::with_capacity(n),
        force_dx: Vec::with_capacity(n),
        kicks: Vec::with_capacity(n),
    };
    for k in 0..n {
        let tc = grid.time(k) * sys.time_scale;
        let x = rec.x(k);
        let gp = spec.eval_spatial_derivative(tc, x, CoefficientName::Drift)?;
        let sp = spec.eval_spatial_derivative(tc, x, CoefficientName::Diffusion)?;
        let (_, s) = spec.eval_coefficients(tc, x)?;
        // d(Dy) = [-a Dy - F Dx] dt + ...,  F = force_scale g'.
        let f = sys.force_scale * gp;
        out.prop.push(expm2(sys.a, sys.c_x, f, h));
        out.force_dx.push(f);
        out.sigma_dx.push(sys.noise_scale * sp);
        out.sigma.push(sys.noise_scale * s);
        out.kicks.push(coeffs.kick.apply(rec.cell(k)));
    }
    Ok(out)
}

fn propagate_pair_with(
    steps: &PairSteps,
    sys: &SecondOrder,
    grid: &SolverGrid,
    k: usize,
    r: f64,
    end: usize,
    mut visit: impl FnMut(usize, f64, f64),
) {
    // Inside the step that contains r only the deterministic part acts.
    let p = expm2(sys.a, sys.c_x, steps.force_dx[k], grid.time(k + 1) - r);
    let s = steps.sigma[k];
    let (mut dx, mut dy) = (p[0][1] * s, p[1][1] * s);
    visit(k + 1, dx, dy);
    for j in (k + 1)..end {
        let m = &steps.prop[j];
        let ds = steps.sigma_dx[j] * dx;
        let kick = &steps.kicks[j];
        let nx = m[0][0] * dx + m[0][1] * dy + ds * sys.c_x * kick.xi2;
        let ny = m[1][0] * dx + m[1][1] * dy + ds * kick.xi1;
        dx = nx;
        dy = ny;
        visit(j + 1, dx, dy);
    }
}

/// First variation of the second-order pair with respect to the noise at
/// time `r`: `d(DX) = c_x DY dt`, `d(DY) = [-a DY - F g' DX] dt + s sigma' DX dW`,
/// started from `DX_r = 0`, `DY_r = s sigma(r, X_r)`. Mean-field terms are
/// deterministic and drop out.
///
/// Works for mean-field underdamped bundles (original clock) and rescaled
/// bundles (rescaled clock, derivative with respect to the rescaled noise).
pub fn propagate_derivative_pair(
    rec: &PathRecord<'_>,
    r: f64,
    alpha: f64,
    spec: &ModelSpec,
) -> Result<DerivativePath> {
    let sys = pair_system(rec, alpha, spec)?;
    let k = rec.step_of(r)?;
    let steps = pair_steps(rec, &sys, spec)?;
    let grid = rec.bundle.grid;
    let mut out = DerivativePath { t: vec![r], dx: vec![0.0], dy: vec![steps.sigma[k]] };
    propagate_pair_with(&steps, &sys, &grid, k, r, rec.nodes() - 1, |j, dx, dy| {
        out.t.push(grid.time(j));
        out.dx.push(dx);
        out.dy.push(dy);
    });
    Ok(out)
}

fn limit_check(rec: &PathRecord<'_>) -> Result<()> {
    if rec.bundle.kind != ProcessKind::Limit {
        return Err(domain(format!("{:?} bundle is not a first-order limit", rec.bundle.kind)));
    }
    Ok(())
}

/// Per-step `(sigma, -g'/c - sigma'^2/(2c^2), sigma'/c)` of a limit path, `c = kappa + gamma`.
fn limit_terms(rec: &PathRecord<'_>, spec: &ModelSpec) -> Result<Vec<(f64, f64, f64)>> {
    let kpg = spec.kappa_plus_gamma();
    let grid = rec.bundle.grid;
    (0..rec.nodes())
        .map(|k| {
            let t = grid.time(k);
            let x = rec.x(k);
            let gp = spec.eval_spatial_derivative(t, x, CoefficientName::Drift)?;
            let sp = spec.eval_spatial_derivative(t, x, CoefficientName::Diffusion)?;
            let (_, s) = spec.eval_coefficients(t, x)?;
            Ok((s, -gp / kpg - sp * sp / (2.0 * kpg * kpg), sp / kpg))
        })
        .collect()
}

/// Closed form of the limit's derivative,
///
/// ```text
/// D_r X_t = sigma(r, X_r)/c * exp( int_r^t [-g'/c - sigma'^2/(2c^2)] ds + (1/c) int_r^t sigma' dW ),
/// ```
///
/// with the time integral by trapezoid and the stochastic one by left points
/// of the path's own increments.
pub fn propagate_derivative_limit(rec: &PathRecord<'_>, r: f64, spec: &ModelSpec) -> Result<DerivativePath> {
    limit_check(rec)?;
    let terms = limit_terms(rec, spec)?;
    let k = rec.step_of(r)?;
    Ok(limit_closed_form(rec, &terms, k, r, spec.kappa_plus_gamma()))
}

fn limit_closed_form(rec: &PathRecord<'_>, terms: &[(f64, f64, f64)], k: usize, r: f64, kpg: f64) -> DerivativePath {
    let grid = rec.bundle.grid;
    let h = grid.dt();
    let sqrt_h = h.sqrt();
    let d0 = terms[k].0 / kpg;
    let mut out = DerivativePath { t: vec![r, grid.time(k + 1)], dx: vec![d0, d0], dy: Vec::new() };
    let mut expo = 0.0;
    for j in (k + 1)..(rec.nodes() - 1) {
        let dw = sqrt_h * rec.cell(j)[0];
        expo += 0.5 * h * (terms[j].1 + terms[j + 1].1) + terms[j].2 * dw;
        out.t.push(grid.time(j + 1));
        out.dx.push(d0 * expo.exp());
    }
    out
}

/// Direct Euler integration of the limit's variational equation
/// `c d(DX) = -g' DX dt + sigma' DX dW` on the stored increments; an oracle for
/// [`propagate_derivative_limit`].
pub fn integrate_limit_variation(rec: &PathRecord<'_>, r: f64, spec: &ModelSpec) -> Result<DerivativePath> {
    limit_check(rec)?;
    let kpg = spec.kappa_plus_gamma();
    let terms = limit_terms(rec, spec)?;
    let grid = rec.bundle.grid;
    let h = grid.dt();
    let sqrt_h = h.sqrt();
    let k = rec.step_of(r)?;
    let mut d = terms[k].0 / kpg;
    let mut out = DerivativePath { t: vec![r, grid.time(k + 1)], dx: vec![d, d], dy: Vec::new() };
    for j in (k + 1)..(rec.nodes() - 1) {
        let gp = spec.eval_spatial_derivative(grid.time(j), rec.x(j), CoefficientName::Drift)?;
        let dw = sqrt_h * rec.cell(j)[0];
        d += d * (-gp * h + terms[j].2 * kpg * dw) / kpg;
        out.t.push(grid.time(j + 1));
        out.dx.push(d);
    }
    Ok(out)
}

fn end_node(bundle: &PathBundle, t: f64) -> Result<usize> {
    let k = bundle.grid.node_index(t)?;
    if k == 0 || k > bundle.steps_taken {
        return Err(domain(format!("t={t} must be a positive stored node")));
    }
    Ok(k)
}

/// Derivatives of `X^alpha_t` and `Y^alpha_t` (or `X^_t`, `Y~_t` for a rescaled
/// bundle) at every `r` of the grid, for every stored path.
pub fn slice_pair(
    bundle: &PathBundle,
    spec: &ModelSpec,
    alpha: f64,
    t: f64,
    r_nodes: &[f64],
) -> Result<(DerivativeSlice, DerivativeSlice)> {
    let end = end_node(bundle, t)?;
    let m = bundle.m_paths();
    let probe = PathRecord::new(bundle, 0)?;
    let sys = pair_system(&probe, alpha, spec)?;
    let grid = bundle.grid;
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let rec = PathRecord { bundle, index: i };
            let steps = pair_steps(&rec, &sys, spec)?;
            let mut rx = vec![0.0; r_nodes.len()];
            let mut ry = vec![0.0; r_nodes.len()];
            for (q, &r) in r_nodes.iter().enumerate() {
                if r >= t {
                    continue;
                }
                let k = rec.step_of(r)?;
                propagate_pair_with(&steps, &sys, &grid, k, r, end, |j, dx, dy| {
                    if j == end {
                        rx[q] = dx;
                        ry[q] = dy;
                    }
                });
            }
            Ok((rx, ry))
        })
        .collect::<Result<_>>()?;
    let (px, py) = match bundle.kind {
        ProcessKind::Rescaled => (ProcessTag::UnderdampedPosition, ProcessTag::RescaledVelocity),
        _ => (ProcessTag::UnderdampedPosition, ProcessTag::UnderdampedVelocity),
    };
    let to_slice = |tag, pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        let mut values = Array2::zeros((m, r_nodes.len()));
        for (i, row) in rows.iter().enumerate() {
            values.row_mut(i).iter_mut().zip(pick(row)).for_each(|(d, s)| *d = *s);
        }
        DerivativeSlice { process: tag, t, r_grid: r_nodes.to_vec(), values }
    };
    Ok((to_slice(px, |r| &r.0), to_slice(py, |r| &r.1)))
}

/// Derivatives of the limit's `X_t` at every `r` of the grid, for every path.
pub fn slice_limit(bundle: &PathBundle, spec: &ModelSpec, t: f64, r_nodes: &[f64]) -> Result<DerivativeSlice> {
    let end = end_node(bundle, t)?;
    let m = bundle.m_paths();
    limit_check(&PathRecord::new(bundle, 0)?)?;
    let kpg = spec.kappa_plus_gamma();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let rec = PathRecord { bundle, index: i };
            let terms = limit_terms(&rec, spec)?;
            r_nodes
                .iter()
                .map(|&r| {
                    if r >= t {
                        return Ok(0.0);
                    }
                    let k = rec.step_of(r)?;
                    let path = limit_closed_form(&rec, &terms[..=end], k, r, kpg);
                    Ok(*path.dx.last().expect("non-empty trace"))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut values = Array2::zeros((m, r_nodes.len()));
    for (i, row) in rows.iter().enumerate() {
        values.row_mut(i).iter_mut().zip(row).for_each(|(d, s)| *d = *s);
    }
    Ok(DerivativeSlice { process: ProcessTag::Limit, t, r_grid: r_nodes.to_vec(), values })
}

/// The OU derivative on the rescaled clock, `sigma00 e^{-(kappa+gamma)(t - r)}`
/// for `r < t`, identical on every path.
pub fn slice_ou(sigma00: f64, kappa_plus_gamma: f64, t: f64, r_nodes: &[f64], m_paths: usize) -> DerivativeSlice {
    let row: Vec<f64> =
        r_nodes.iter().map(|&r| if r >= t { 0.0 } else { sigma00 * (-kappa_plus_gamma * (t - r)).exp() }).collect();
    let mut values = Array2::zeros((m_paths, r_nodes.len()));
    for mut v in values.outer_iter_mut() {
        v.iter_mut().zip(&row).for_each(|(d, s)| *d = *s);
    }
    DerivativeSlice { process: ProcessTag::OrnsteinUhlenbeck, t, r_grid: r_nodes.to_vec(), values }
}

/// Ingredients and value of the total-variation bound between the scaled
/// velocity and its OU limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvBound {
    pub alpha: f64,
    pub t: f64,
    /// `E |Y~^alpha_t - Y~_t|^2`.
    pub l2_term: f64,
    /// `E ||D(Y~^alpha_t - Y~_t)||_H^2`.
    pub h_term: f64,
    /// `(l2_term + h_term)^{1/2}`.
    pub sobolev_norm: f64,
    /// `2 / (sigma00 lambda(t, 2(kappa+gamma))^{1/2})`.
    pub prefactor: f64,
    pub bound: f64,
    pub m_paths: usize,
}

/// `d_TV(Y~^alpha_t, Y~_t) <= ||Y~^alpha_t - Y~_t||_{1,2} * 2 / ||D Y~_t||_H`,
/// which is what the general bound reduces to because the OU limit has a
/// deterministic first derivative and no second one.
pub fn tv_bound_rescaled(alpha: f64, t: f64, spec: &ModelSpec, m_paths: usize, seed: SeedSpec) -> Result<TvBound> {
    if !(t > 0.0) {
        return Err(domain(format!("bound needs t > 0, got {t}")));
    }
    let grid = SolverGrid::capped(spec)?;
    let opts = RunOptions { store_paths: true, snapshot_times: Vec::new(), stop_at: Some(t) };
    let run = simulate_rescaled_opts(spec, &grid, alpha, m_paths, seed, &opts)?;
    let sigma00 = spec.sigma00();
    let kpg = spec.kappa_plus_gamma();
    let ya = run.primary.y_final.as_ref().expect("second-order bundle has velocities");
    let yo = run.companion.y_final.as_ref().expect("OU bundle has velocities");
    let sq: Vec<f64> = ya.iter().zip(yo).map(|(a, b)| (a - b) * (a - b)).collect();
    let l2_term = pairwise_mean(&sq);

    let nodes = r_grid(t, DEFAULT_R_NODES)?;
    let (_, dy) = slice_pair(&run.primary, spec, alpha, t, &nodes)?;
    let diff = dy.minus(&slice_ou(sigma00, kpg, t, &nodes, m_paths))?;
    let h_term = hnorm_sq(&diff)?.mean;
    let sobolev_norm = (l2_term + h_term).sqrt();
    let prefactor = tv_prefactor(sigma00, kpg, t)?;
    Ok(TvBound { alpha, t, l2_term, h_term, sobolev_norm, prefactor, bound: prefactor * sobolev_norm, m_paths })
}

/// `2 / ||D Y~_t||_H = 2 / (|sigma00| lambda(t, 2c)^{1/2})`.
pub fn tv_prefactor(sigma00: f64, kappa_plus_gamma: f64, t: f64) -> Result<f64> {
    if sigma00 == 0.0 {
        return Err(Error::Degenerate("the OU limit has no noise".into()));
    }
    Ok(2.0 / (sigma00.abs() * lambda(t, 2.0 * kappa_plus_gamma).sqrt()))
}

/// `E ||D X^alpha_t - D X_t||_H^2` over a coupled displacement run with stored paths.
pub fn displacement_derivative_gap(
    spec: &ModelSpec,
    grid: &SolverGrid,
    alpha: f64,
    t: f64,
    m_paths: usize,
    seed: SeedSpec,
) -> Result<f64> {
    let run = simulate_displacement_coupled(spec, grid, alpha, m_paths, seed, &RunOptions::full_paths())?;
    let nodes = r_grid(t, DEFAULT_R_NODES)?;
    let (dx, _) = slice_pair(&run.primary, spec, alpha, t, &nodes)?;
    let lim = slice_limit(&run.companion, spec, t, &nodes)?;
    Ok(hnorm_sq(&dx.minus(&lim)?)?.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::{simulate_limit, simulate_underdamped};
    use crate::model::{builtin, SigmaKind};
    use crate::noise::make_increments;
    use crate::special::ols_slope;

    fn expm_series(a: f64, c: f64, f: f64, h: f64) -> [[f64; 2]; 2] {
        // Scaling and squaring with a long Taylor series.
        let s = 6;
        let sc = h / f64::from(1 << s);
        let m = [[0.0, c * sc], [-f * sc, -a * sc]];
        let mul = |p: [[f64; 2]; 2], q: [[f64; 2]; 2]| {
            let mut o = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    o[i][j] = p[i][0] * q[0][j] + p[i][1] * q[1][j];
                }
            }
            o
        };
        let mut e = [[1.0, 0.0], [0.0, 1.0]];
        let mut term = e;
        for n in 1..30 {
            term = mul(term, m);
            term.iter_mut().flatten().for_each(|v| *v /= n as f64);
            for i in 0..2 {
                for j in 0..2 {
                    e[i][j] += term[i][j];
                }
            }
        }
        for _ in 0..s {
            e = mul(e, e);
        }
        e
    }

    #[test]
    fn expm2_matches_series_in_every_regime() {
        for &(a, c, f, h) in &[
            (2.0, 1.0, 0.0, 0.1),
            (2.0, 1.0, 1.0, 0.1),   // critical
            (2.0, 1.0, 0.999_999_9, 0.1),
            (2.0, 1.0, 5.0, 0.3),   // oscillatory
            (50.0, 1.0, 3.0, 0.05), // overdamped
            (1.0, 0.5, -2.0, 0.2),  // unstable mode
        ] {
            let got = expm2(a, c, f, h);
            let want = expm_series(a, c, f, h);
            for i in 0..2 {
                for j in 0..2 {
                    assert!((got[i][j] - want[i][j]).abs() < 1e-10, "{a} {c} {f} {h}: {got:?} vs {want:?}");
                }
            }
        }
        let stiff = expm2(1e6, 1.0, 1e6, 0.005);
        assert!(stiff.iter().flatten().all(|v| v.is_finite()));
        // Slow mode -cf/a = -1 survives; fast mode is gone.
        assert!((stiff[0][0] - (-0.005f64 / (1.0 - 1e-6)).exp()).abs() < 1e-6);
    }

    #[test]
    fn r_grid_shape() {
        let r = r_grid(1.0, 32).unwrap();
        assert_eq!(r.len(), 32);
        assert_eq!(r[0], 0.0);
        assert_eq!(*r.last().unwrap(), 1.0);
        assert!(r.windows(2).all(|w| w[0] < w[1]));
        assert!((1.0 - r[30] - 1e-4).abs() < 1e-15);
        assert!(matches!(r_grid(1.0, 7), Err(Error::Resolution(_))));
    }

    #[test]
    fn ou_derivative_examples_and_norm() {
        assert_eq!(ou_derivative(0.5, 1.0, 2.0, 1.0, 0.0, 1.0), 0.0);
        let v = ou_derivative(0.0, 1.0, 4.0, 1.0, 1.0, 1.5);
        assert!((v - 2.0 * 1.5 * (-2.0f64).exp()).abs() < 1e-15);
        // Original-clock norm against the closed form.
        let (alpha, t, c, s) = (9.0, 1.0, 2.0, 1.3);
        let norm = crate::special::integrate(
            |r| ou_derivative(r, t, alpha, 1.0, 1.0, s).powi(2),
            0.0,
            t / alpha,
            1e-15,
            1e-13,
        );
        assert!((norm - s * s * lambda(t, 2.0 * c)).abs() < 1e-12);

        let nodes = r_grid(t, 32).unwrap();
        let slice = slice_ou(s, c, t, &nodes, 4);
        let hn = hnorm_sq(&slice).unwrap();
        assert!(hn.per_path.iter().all(|&v| v == hn.per_path[0]));
        // Exact up to the sliver next to r = t, where the slice is set to zero.
        assert!((hn.mean / (s * s * lambda(t, 2.0 * c)) - 1.0).abs() < 1e-3, "{}", hn.mean);
        let fine = hnorm_sq(&slice_ou(s, c, t, &r_grid(t, 64).unwrap(), 1)).unwrap().mean;
        assert!((fine / hn.mean - 1.0).abs() < 0.01);
        let zero = DerivativeSlice { values: Array2::zeros((3, 32)), ..slice };
        assert_eq!(hnorm_sq(&zero).unwrap().mean, 0.0);
    }

    fn frozen_model(g_slope: f64, sigma: f64) -> ModelSpec {
        ModelSpec::builder(move |_, x| g_slope * x, move |_, _| sigma)
            .sigma_kind(SigmaKind::Constant)
            .g_dx(move |_, _| g_slope)
            .kappa(1.0)
            .gamma(0.5)
            .initial(0.3, 0.2)
            .build()
            .unwrap()
    }

    #[test]
    fn pair_derivative_without_coefficient_slopes() {
        let spec = frozen_model(0.0, 0.7);
        let grid = SolverGrid::capped(&spec).unwrap();
        let alpha = 8.0;
        let b = simulate_underdamped(&spec, &grid, alpha, 3, SeedSpec::new(1, 1)).unwrap();
        let rec = PathRecord::new(&b, 1).unwrap();
        let r = 0.2;
        let d = propagate_derivative_pair(&rec, r, alpha, &spec).unwrap();
        assert_eq!(d.t[0], r);
        assert_eq!(d.dx[0], 0.0);
        assert_eq!(d.dy[0], alpha * 0.7);
        let a = alpha * spec.kappa_plus_gamma();
        for q in 1..d.t.len() {
            let s = d.t[q] - r;
            let y = alpha * 0.7 * (-a * s).exp();
            let x = 0.7 / spec.kappa_plus_gamma() * (-(-a * s).exp_m1());
            assert!((d.dy[q] - y).abs() < 1e-10 * alpha, "{q}");
            assert!((d.dx[q] - x).abs() < 1e-12, "{q}");
        }
    }

    #[test]
    fn pair_derivative_linear_drift_matches_ode() {
        // x'' = -a x' - alpha c x with x(r) = 0, x'(r) = alpha sigma.
        let (c, sigma, alpha) = (1.3, 0.9, 5.0);
        let spec = frozen_model(c, sigma);
        let grid = SolverGrid::capped(&spec).unwrap();
        let b = simulate_underdamped(&spec, &grid, alpha, 2, SeedSpec::new(2, 1)).unwrap();
        let rec = PathRecord::new(&b, 0).unwrap();
        let r = 0.1234;
        let d = propagate_derivative_pair(&rec, r, alpha, &spec).unwrap();
        let a = alpha * spec.kappa_plus_gamma();
        let k = alpha * c;
        // Underdamped or overdamped roots of m^2 + a m + k = 0.
        let disc = a * a - 4.0 * k;
        let exact = |s: f64| -> f64 {
            let v0 = alpha * sigma;
            if disc > 0.0 {
                let q = disc.sqrt();
                let (m1, m2) = ((-a + q) / 2.0, (-a - q) / 2.0);
                v0 * ((m1 * s).exp() - (m2 * s).exp()) / (m1 - m2)
            } else {
                let w = (-disc).sqrt() / 2.0;
                v0 * (-a * s / 2.0).exp() * (w * s).sin() / w
            }
        };
        for q in 0..d.t.len() {
            assert!((d.dx[q] - exact(d.t[q] - r)).abs() < 1e-6, "{q}: {} vs {}", d.dx[q], exact(d.t[q] - r));
        }
    }

    #[test]
    fn missing_paths_is_a_provenance_error() {
        let spec = frozen_model(0.0, 1.0);
        let grid = SolverGrid::capped(&spec).unwrap();
        let b =
            crate::integrators::simulate_underdamped_opts(&spec, &grid, 2.0, 2, SeedSpec::new(1, 1), &RunOptions::default())
                .unwrap();
        assert!(matches!(PathRecord::new(&b, 0), Err(Error::Provenance(_))));
    }

    fn limit_bundle(spec: &ModelSpec, n_steps: usize, m: usize, seed: SeedSpec) -> PathBundle {
        let grid = SolverGrid::new(spec.horizon, n_steps).unwrap();
        let table = make_increments(seed, m, n_steps, grid.dt()).unwrap();
        simulate_limit(spec, &grid, m, &table).unwrap()
    }

    #[test]
    fn limit_derivative_trivial_exponent() {
        let spec = ModelSpec::builder(|_, _| 0.4, |_, _| 1.1)
            .sigma_kind(SigmaKind::Constant)
            .kappa(1.0)
            .gamma(1.0)
            .build()
            .unwrap();
        let b = limit_bundle(&spec, 200, 2, SeedSpec::new(3, 3));
        let d = propagate_derivative_limit(&PathRecord::new(&b, 1).unwrap(), 0.3, &spec).unwrap();
        assert!(d.dx.iter().all(|&v| (v - 0.55).abs() < 1e-15));
    }

    #[test]
    fn limit_closed_form_agrees_with_direct_integration() {
        // Sign check: the closed form must follow the variational equation.
        let spec = builtin("linear_trig").unwrap().kappa(1.0).gamma(1.0).initial(0.5, 0.0).build().unwrap();
        let b = limit_bundle(&spec, 2000, 8, SeedSpec::new(5, 0));
        for i in 0..8 {
            let rec = PathRecord::new(&b, i).unwrap();
            let closed = propagate_derivative_limit(&rec, 0.25, &spec).unwrap();
            let direct = integrate_limit_variation(&rec, 0.25, &spec).unwrap();
            let (a, e) = (closed.dx.last().unwrap(), direct.dx.last().unwrap());
            assert!(((a - e) / e).abs() < 1e-3, "{i}: {a} vs {e}");
        }
    }

    #[test]
    fn limit_derivative_lower_bound() {
        // |g'| <= 1.5 and sigma >= 0.5 bound the derivative from below.
        let spec = ModelSpec::builder(|_, x: f64| x + 0.5 * x.sin(), |_, _| 0.8)
            .sigma_kind(SigmaKind::Constant)
            .sigma_floor(0.5)
            .kappa(1.0)
            .gamma(1.0)
            .build()
            .unwrap();
        let b = limit_bundle(&spec, 400, 20, SeedSpec::new(8, 0));
        for i in 0..20 {
            let d = propagate_derivative_limit(&PathRecord::new(&b, i).unwrap(), 0.0, &spec).unwrap();
            for (t, v) in d.t.iter().zip(&d.dx) {
                assert!(v.abs() >= 0.5 / 2.0 * (-1.5 * t / 2.0).exp() * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn limit_derivative_matches_bumped_increment() {
        let spec = builtin("trig").unwrap().kappa(1.0).gamma(0.0).initial(0.4, 0.0).build().unwrap();
        let n = 400;
        let grid = SolverGrid::new(1.0, n).unwrap();
        let table = make_increments(SeedSpec::new(9, 0), 4, n, grid.dt()).unwrap();
        let b = simulate_limit(&spec, &grid, 4, &table).unwrap();
        let h = grid.dt();
        let path_end = |i: usize, bump_at: usize, eps: f64| {
            let mut x = spec.x0;
            for k in 0..n {
                let (g, s) = spec.eval_coefficients(grid.time(k), x).unwrap();
                let mut dw = h.sqrt() * table.normals(i, k)[0];
                if k == bump_at {
                    dw += eps;
                }
                x = crate::integrators::first_order::limit_step(x, g, g, s, dw, 0.0, h, 1.0, 0.0);
            }
            x
        };
        for i in 0..4 {
            assert_eq!(path_end(i, usize::MAX, 0.0), b.x_final[i]);
            let rec = PathRecord::new(&b, i).unwrap();
            for &k in &[0usize, 137, 300] {
                let eps = 1e-4;
                let fd = (path_end(i, k, eps) - path_end(i, k, -eps)) / (2.0 * eps);
                let d = propagate_derivative_limit(&rec, grid.time(k), &spec).unwrap();
                let v = *d.dx.last().unwrap();
                assert!(((v - fd) / fd).abs() < 0.02, "{i} {k}: {v} vs {fd}");
            }
        }
    }

    #[test]
    fn slices_vanish_past_t() {
        let spec = builtin("trig").unwrap().kappa(1.0).gamma(1.0).build().unwrap();
        let grid = SolverGrid::capped(&spec).unwrap();
        let b = simulate_underdamped(&spec, &grid, 4.0, 5, SeedSpec::new(2, 2)).unwrap();
        let nodes = vec![0.0, 0.1, 0.2, 0.3, 0.5, 0.6, 0.8, 0.9];
        let (dx, dy) = slice_pair(&b, &spec, 4.0, 0.5, &nodes).unwrap();
        for q in 4..8 {
            assert!(dx.values.column(q).iter().all(|&v| v == 0.0));
            assert!(dy.values.column(q).iter().all(|&v| v == 0.0));
        }
        assert!(dx.values.column(0).iter().all(|&v| v != 0.0));
    }

    #[test]
    fn tv_bound_prefactor_is_monotone_in_sigma() {
        let a = tv_prefactor(1.0, 2.0, 1.0).unwrap();
        let b = tv_prefactor(2.0, 2.0, 1.0).unwrap();
        assert!(b < a);
        assert!((a - 2.0 / lambda(1.0, 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn tv_bound_scales_like_inverse_root_alpha() {
        let spec = builtin("trig").unwrap().kappa(1.0).gamma(1.0).initial(0.3, 0.5).build().unwrap();
        let lo = tv_bound_rescaled(100.0, 1.0, &spec, 400, SeedSpec::new(4, 1)).unwrap();
        let hi = tv_bound_rescaled(400.0, 1.0, &spec, 400, SeedSpec::new(4, 1)).unwrap();
        let ratio = lo.bound / hi.bound;
        assert!((1.6..=2.6).contains(&ratio), "{ratio}: {lo:?} {hi:?}");
    }

    #[test]
    fn derivative_gap_decays_like_inverse_alpha() {
        let spec = builtin("linear_trig").unwrap().kappa(1.0).gamma(1.0).initial(0.5, 0.0).build().unwrap();
        let grid = SolverGrid::capped(&spec).unwrap();
        let alphas = [16.0f64, 64.0, 256.0];
        let gaps: Vec<f64> = alphas
            .iter()
            .map(|&a| displacement_derivative_gap(&spec, &grid, a, 1.0, 200, SeedSpec::new(6, 0)).unwrap())
            .collect();
        let slope = ols_slope(&alphas.map(f64::ln), &gaps.iter().map(|g| g.ln()).collect::<Vec<_>>());
        assert!((-1.4..=-0.6).contains(&slope), "{slope}: {gaps:?}");
    }
}
