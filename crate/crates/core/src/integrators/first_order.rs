use ndarray::Array2;
use rayon::prelude::*;

use super::second_order::stop_node;
use super::{PathBundle, ProcessKind, RunOptions, Snapshot};
use crate::error::{domain, Error, Result};
use crate::model::{lambda, ModelSpec, SolverGrid};
use crate::noise::{IncrementTable, NoiseAudit, NormalCursor, SplitKick};
use crate::special::pairwise_mean;

/// Drift of the first-order limit, `(-g - (gamma/kappa) E[g]) / (kappa + gamma)`.
pub fn limit_drift(spec: &ModelSpec, g: f64, g_mean: f64) -> f64 {
    (-g - spec.gamma / spec.kappa * g_mean) / spec.kappa_plus_gamma()
}

/// One Euler–Maruyama step of the limit equation. `common` is the ensemble
/// mean of `sigma dW`: the mean velocity of a finite ensemble carries it, and
/// it vanishes as the ensemble grows.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn limit_step(
    x: f64,
    g: f64,
    g_mean: f64,
    sigma: f64,
    dw: f64,
    common: f64,
    h: f64,
    kpg: f64,
    ratio: f64,
) -> f64 {
    x + (-g - ratio * g_mean) / kpg * h + (sigma * dw + ratio * common) / kpg
}

fn check_table(grid: &SolverGrid, m_paths: usize, table: &IncrementTable) -> Result<()> {
    if table.m_paths < m_paths || table.n_steps < grid.n_steps() {
        return Err(Error::Coupling(format!(
            "increment table {}x{} is smaller than the requested {}x{}",
            table.m_paths,
            table.n_steps,
            m_paths,
            grid.n_steps()
        )));
    }
    if (table.dt - grid.dt()).abs() > 1e-12 * grid.dt() {
        return Err(Error::Coupling(format!("increment dt {} differs from grid dt {}", table.dt, grid.dt())));
    }
    Ok(())
}

struct Lane {
    x: f64,
    g: f64,
    s: f64,
    dw: f64,
    cursor: NormalCursor,
    audit: NoiseAudit,
}

/// First-order mean-field limit
/// `(kappa+gamma) dX = -[g(t,X) + (gamma/kappa) E g(t,X)] dt + sigma(t,X) dW`
/// by Euler–Maruyama on the given increments, with full paths stored.
///
/// Expectations are ensemble means, and the ensemble mean of `sigma dW` enters
/// with weight `gamma/kappa` exactly as the underdamped ensemble's mean velocity
/// transmits it; both effects are `O(M^{-1/2})`.
pub fn simulate_limit(
    spec: &ModelSpec,
    grid: &SolverGrid,
    m_paths: usize,
    increments: &IncrementTable,
) -> Result<PathBundle> {
    simulate_limit_opts(spec, grid, m_paths, increments, &RunOptions::full_paths())
}

pub fn simulate_limit_opts(
    spec: &ModelSpec,
    grid: &SolverGrid,
    m_paths: usize,
    increments: &IncrementTable,
    opts: &RunOptions,
) -> Result<PathBundle> {
    if m_paths == 0 {
        return Err(domain("need at least one path"));
    }
    check_table(grid, m_paths, increments)?;
    let n_run = stop_node(grid, opts)?;
    let h = grid.dt();
    let kpg = spec.kappa_plus_gamma();
    let ratio = spec.gamma / spec.kappa;
    let mut lanes: Vec<Lane> = (0..m_paths)
        .map(|i| Lane { x: spec.x0, g: 0.0, s: 0.0, dw: 0.0, cursor: increments.cursor(i), audit: NoiseAudit::default() })
        .collect();
    let mut x_paths = opts.store_paths.then(|| Array2::<f64>::zeros((m_paths, n_run + 1)));
    let mut snapshots = Vec::new();
    let mut mean_g_trace = Vec::with_capacity(n_run + 1);
    let snap_nodes: Vec<usize> = opts.snapshot_times.iter().map(|&t| grid.node_index(t)).collect::<Result<_>>()?;
    let mut gs = vec![0.0; m_paths];

    for k in 0..=n_run {
        if let Some(a) = x_paths.as_mut() {
            for (i, l) in lanes.iter().enumerate() {
                a[[i, k]] = l.x;
            }
        }
        if snap_nodes.contains(&k) {
            snapshots.push(Snapshot { t: grid.time(k), x: lanes.iter().map(|l| l.x).collect(), y: None });
        }
        let t = grid.time(k);
        let ok = lanes.par_iter_mut().with_min_len(256).all(|l| match spec.eval_coefficients(t, l.x) {
            Ok((g, s)) => {
                l.g = g;
                l.s = s;
                true
            }
            Err(_) => false,
        });
        if !ok {
            for l in &lanes {
                spec.eval_coefficients(t, l.x)?;
            }
        }
        for (i, l) in lanes.iter().enumerate() {
            gs[i] = l.g;
        }
        let g_mean = pairwise_mean(&gs);
        mean_g_trace.push(g_mean);
        if k == n_run {
            break;
        }
        let sqrt_h = h.sqrt();
        lanes.par_iter_mut().with_min_len(256).for_each(|l| {
            let u = l.cursor.next_cell();
            l.audit.record(u[0]);
            l.dw = sqrt_h * u[0];
        });
        for (i, l) in lanes.iter().enumerate() {
            gs[i] = l.s * l.dw;
        }
        let common = pairwise_mean(&gs);
        let finite = lanes.par_iter_mut().with_min_len(256).all(|l| {
            l.x = limit_step(l.x, l.g, g_mean, l.s, l.dw, common, h, kpg, ratio);
            l.x.is_finite()
        });
        if !finite {
            return Err(Error::BlowUp { step: k + 1, t: grid.time(k + 1) });
        }
    }
    let mut audit = NoiseAudit::default();
    for l in &lanes {
        audit.merge(l.audit);
    }
    Ok(PathBundle {
        kind: ProcessKind::Limit,
        grid: *grid,
        alpha: None,
        seed: increments.seed,
        increments: IncrementTable { m_paths, ..*increments },
        audit,
        group_size: m_paths,
        steps_taken: n_run,
        x_paths,
        y_paths: None,
        x_final: lanes.iter().map(|l| l.x).collect(),
        y_final: None,
        snapshots,
        mean_trace: Vec::new(),
        mean_g_trace,
        running_sup: None,
    })
}

/// Ornstein–Uhlenbeck limit `dY = -(kappa+gamma) Y dt + sigma00 dW`, `Y_0 = 0`,
/// stepped exactly: `Y' = e^{-(kappa+gamma) h} Y + sigma00 xi1`.
///
/// The kick is anchored at the decay rate itself; the rescaled simulation
/// carries its own OU companion that shares the rescaled pair's kicks.
pub fn simulate_ou(
    sigma00: f64,
    kappa_plus_gamma: f64,
    grid: &SolverGrid,
    m_paths: usize,
    increments: &IncrementTable,
) -> Result<PathBundle> {
    simulate_ou_opts(sigma00, kappa_plus_gamma, grid, m_paths, increments, &RunOptions::full_paths())
}

pub fn simulate_ou_opts(
    sigma00: f64,
    kappa_plus_gamma: f64,
    grid: &SolverGrid,
    m_paths: usize,
    increments: &IncrementTable,
    opts: &RunOptions,
) -> Result<PathBundle> {
    if !(kappa_plus_gamma > 0.0) || !sigma00.is_finite() {
        return Err(domain("OU needs a positive rate and a finite diffusion"));
    }
    if m_paths == 0 {
        return Err(domain("need at least one path"));
    }
    check_table(grid, m_paths, increments)?;
    let n_run = stop_node(grid, opts)?;
    let h = grid.dt();
    let kick = SplitKick::new(kappa_plus_gamma, kappa_plus_gamma, h);
    let decay = (-kappa_plus_gamma * h).exp();
    let mut y = vec![0.0; m_paths];
    let mut cursors: Vec<(NormalCursor, NoiseAudit)> =
        (0..m_paths).map(|i| (increments.cursor(i), NoiseAudit::default())).collect();
    let mut y_paths = opts.store_paths.then(|| Array2::<f64>::zeros((m_paths, n_run + 1)));
    let snap_nodes: Vec<usize> = opts.snapshot_times.iter().map(|&t| grid.node_index(t)).collect::<Result<_>>()?;
    let mut snapshots = Vec::new();
    let mut mean_trace = Vec::with_capacity(n_run + 1);
    for k in 0..=n_run {
        if let Some(a) = y_paths.as_mut() {
            a.column_mut(k).iter_mut().zip(&y).for_each(|(d, s)| *d = *s);
        }
        if snap_nodes.contains(&k) {
            snapshots.push(Snapshot { t: grid.time(k), x: Vec::new(), y: Some(y.clone()) });
        }
        mean_trace.push(pairwise_mean(&y));
        if k == n_run {
            break;
        }
        y.par_iter_mut().zip(cursors.par_iter_mut()).with_min_len(256).for_each(|(v, (c, audit))| {
            let u = c.next_cell();
            audit.record(u[0]);
            *v = decay * *v + sigma00 * kick.apply(u).xi1;
        });
    }
    let mut audit = NoiseAudit::default();
    for (_, a) in &cursors {
        audit.merge(*a);
    }
    Ok(PathBundle {
        kind: ProcessKind::OrnsteinUhlenbeck,
        grid: *grid,
        alpha: None,
        seed: increments.seed,
        increments: IncrementTable { m_paths, ..*increments },
        audit,
        group_size: m_paths,
        steps_taken: n_run,
        x_paths: None,
        y_paths,
        x_final: Vec::new(),
        y_final: Some(y),
        snapshots,
        mean_trace,
        mean_g_trace: Vec::new(),
        running_sup: None,
    })
}

/// Mean-velocity ODE `n' = -alpha kappa n - alpha E g` driven by the bundle's
/// recorded `E g` trace.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanOdeResidual {
    pub ode: Vec<f64>,
    /// `|n(t_k) - mean_trace(t_k)|`.
    pub residual: Vec<f64>,
}

/// Integrates the mean ODE exactly over each step (with `E g` frozen) and
/// compares it with the ensemble mean.
pub fn simulate_mean_ode(bundle: &PathBundle, spec: &ModelSpec, alpha: f64) -> Result<MeanOdeResidual> {
    if !matches!(bundle.kind, ProcessKind::Underdamped) {
        return Err(domain("the mean ODE applies to mean-field underdamped bundles"));
    }
    if bundle.mean_g_trace.len() != bundle.mean_trace.len() || bundle.mean_trace.is_empty() {
        return Err(Error::Provenance("bundle lacks mean traces".into()));
    }
    let h = bundle.grid.dt();
    let rate = alpha * spec.kappa;
    let decay = (-rate * h).exp();
    let lam = lambda(h, rate);
    let mut n = spec.y0;
    let mut ode = Vec::with_capacity(bundle.mean_trace.len());
    for k in 0..bundle.mean_trace.len() {
        ode.push(n);
        n = decay * n - alpha * bundle.mean_g_trace[k] * lam;
    }
    let residual = ode.iter().zip(&bundle.mean_trace).map(|(a, b)| (a - b).abs()).collect();
    Ok(MeanOdeResidual { ode, residual })
}
