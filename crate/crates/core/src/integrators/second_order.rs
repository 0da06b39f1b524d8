use ndarray::Array2;
use rayon::prelude::*;

use super::first_order::limit_step;
use super::{group_means, EnsembleState, PathBundle, ProcessKind, RunOptions, Snapshot, StepCoeffs};
use crate::error::{domain, Error, Result};
use crate::model::{ModelSpec, SolverGrid};
use crate::noise::{make_increments, rescaled_increments, IncrementTable, Kicks, NoiseAudit, NormalCursor, SeedSpec};
use crate::special::pairwise_mean;

/// Scalings that turn the model coefficients into `f`, `s` of the shared
/// linear structure (see the module docs).
#[derive(Clone, Copy, Debug)]
pub(crate) struct SecondOrder {
    pub a: f64,
    pub a_m: f64,
    pub c_x: f64,
    pub force_scale: f64,
    pub noise_scale: f64,
    pub time_scale: f64,
}

impl SecondOrder {
    pub fn underdamped(spec: &ModelSpec, alpha: f64) -> Self {
        Self {
            a: alpha * spec.kappa_plus_gamma(),
            a_m: alpha * spec.kappa,
            c_x: 1.0,
            force_scale: alpha,
            noise_scale: alpha,
            time_scale: 1.0,
        }
    }

    /// `X^_t = X^alpha_{t/alpha}`, `Y~_t = Y^alpha_{t/alpha} / sqrt(alpha)`.
    pub fn rescaled(spec: &ModelSpec, alpha: f64) -> Self {
        let root = alpha.sqrt();
        Self {
            a: spec.kappa_plus_gamma(),
            a_m: spec.kappa,
            c_x: 1.0 / root,
            force_scale: 1.0 / root,
            noise_scale: 1.0,
            time_scale: 1.0 / alpha,
        }
    }

    pub fn coeffs(&self, h: f64) -> StepCoeffs {
        StepCoeffs::new(self.a, self.a_m, self.c_x, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Companion {
    None,
    /// First-order limit driven by the same `dW`; sup of `|x - x_lim|`.
    Limit,
    /// OU limit driven by the same velocity kick; sup of `|y - y_ou|`.
    Ou { sigma00: f64 },
}

struct Lane {
    x: f64,
    y: f64,
    g: f64,
    s: f64,
    cx: f64,
    cy: f64,
    cg: f64,
    cs: f64,
    sup: f64,
    k: Kicks,
    cursor: NormalCursor,
    audit: NoiseAudit,
}

/// Pair of bundles driven by one increment table.
#[derive(Clone, Debug)]
pub struct CoupledRun {
    pub primary: PathBundle,
    pub companion: PathBundle,
}

pub(crate) struct Setup<'a> {
    pub spec: &'a ModelSpec,
    pub grid: SolverGrid,
    pub alpha: f64,
    pub sys: SecondOrder,
    pub kind: ProcessKind,
    pub group: usize,
    pub table: IncrementTable,
    pub y_init: f64,
    pub companion: Companion,
}

fn snapshot_nodes(grid: &SolverGrid, opts: &RunOptions, n_run: usize) -> Result<Vec<usize>> {
    let mut nodes = Vec::with_capacity(opts.snapshot_times.len());
    for &t in &opts.snapshot_times {
        let k = grid.node_index(t)?;
        if k > n_run {
            return Err(Error::Resolution(format!("snapshot t={t} lies past the stopping time")));
        }
        nodes.push(k);
    }
    Ok(nodes)
}

pub(crate) fn stop_node(grid: &SolverGrid, opts: &RunOptions) -> Result<usize> {
    match opts.stop_at {
        Some(t) => grid.node_index(t),
        None => Ok(grid.n_steps()),
    }
}

fn first_failure(spec: &ModelSpec, lanes: &[Lane], t: f64, companion: bool) -> Error {
    for l in lanes {
        if let Err(e) = spec.eval_coefficients(t, l.x) {
            return e;
        }
        if companion {
            if let Err(e) = spec.eval_coefficients(t, l.cx) {
                return e;
            }
        }
    }
    Error::Numerical("coefficient evaluation failed without a reproducible error".into())
}

pub(crate) fn run(setup: Setup<'_>, opts: &RunOptions) -> Result<(PathBundle, Option<PathBundle>)> {
    let Setup { spec, grid, alpha, sys, kind, group, table, y_init, companion } = setup;
    let m = table.m_paths;
    if group == 0 || m % group != 0 {
        return Err(domain(format!("{m} paths cannot be split into groups of {group}")));
    }
    let n_run = stop_node(&grid, opts)?;
    let snaps = snapshot_nodes(&grid, opts, n_run)?;
    let h = grid.dt();
    let coeffs = sys.coeffs(h);
    let kpg = spec.kappa_plus_gamma();
    let ratio = spec.gamma / spec.kappa;
    let with_limit = matches!(companion, Companion::Limit);
    let has_companion = !matches!(companion, Companion::None);

    let mut lanes: Vec<Lane> = (0..m)
        .map(|i| Lane {
            x: spec.x0,
            y: y_init,
            g: 0.0,
            s: 0.0,
            cx: spec.x0,
            cy: 0.0,
            cg: 0.0,
            cs: 0.0,
            sup: match companion {
                Companion::Ou { .. } => y_init.abs(),
                _ => 0.0,
            },
            k: Kicks::default(),
            cursor: table.cursor(i),
            audit: NoiseAudit::default(),
        })
        .collect();

    let mut x_paths = opts.store_paths.then(|| Array2::<f64>::zeros((m, n_run + 1)));
    let mut y_paths = opts.store_paths.then(|| Array2::<f64>::zeros((m, n_run + 1)));
    let mut cx_paths = (opts.store_paths && with_limit).then(|| Array2::<f64>::zeros((m, n_run + 1)));
    let mut cy_paths =
        (opts.store_paths && matches!(companion, Companion::Ou { .. })).then(|| Array2::<f64>::zeros((m, n_run + 1)));
    let mut snapshots = Vec::new();
    let mut c_snapshots = Vec::new();
    let mut mean_trace = Vec::with_capacity(n_run + 1);
    let mut mean_g_trace = Vec::with_capacity(n_run + 1);
    let mut c_mean_trace = Vec::new();
    let mut c_mean_g_trace = Vec::new();

    let record = |lanes: &[Lane],
                  k: usize,
                  x_paths: &mut Option<Array2<f64>>,
                  y_paths: &mut Option<Array2<f64>>,
                  cx_paths: &mut Option<Array2<f64>>,
                  cy_paths: &mut Option<Array2<f64>>,
                  snapshots: &mut Vec<Snapshot>,
                  c_snapshots: &mut Vec<Snapshot>| {
        if let Some(a) = x_paths.as_mut() {
            for (i, l) in lanes.iter().enumerate() {
                a[[i, k]] = l.x;
            }
        }
        if let Some(a) = y_paths.as_mut() {
            for (i, l) in lanes.iter().enumerate() {
                a[[i, k]] = l.y;
            }
        }
        if let Some(a) = cx_paths.as_mut() {
            for (i, l) in lanes.iter().enumerate() {
                a[[i, k]] = l.cx;
            }
        }
        if let Some(a) = cy_paths.as_mut() {
            for (i, l) in lanes.iter().enumerate() {
                a[[i, k]] = l.cy;
            }
        }
        if snaps.contains(&k) {
            let t = grid.time(k);
            snapshots.push(Snapshot {
                t,
                x: lanes.iter().map(|l| l.x).collect(),
                y: Some(lanes.iter().map(|l| l.y).collect()),
            });
            match companion {
                Companion::Limit => c_snapshots.push(Snapshot { t, x: lanes.iter().map(|l| l.cx).collect(), y: None }),
                Companion::Ou { .. } => c_snapshots.push(Snapshot {
                    t,
                    x: Vec::new(),
                    y: Some(lanes.iter().map(|l| l.cy).collect()),
                }),
                Companion::None => {}
            }
        }
    };

    record(&lanes, 0, &mut x_paths, &mut y_paths, &mut cx_paths, &mut cy_paths, &mut snapshots, &mut c_snapshots);

    let mut ys = vec![0.0; m];
    let mut gs = vec![0.0; m];
    let mut cgs = vec![0.0; m];
    let mut noise_ys = vec![0.0; m];
    let mut noise_xs = vec![0.0; m];
    for k in 0..=n_run {
        let t = grid.time(k);
        let tc = t * sys.time_scale;
        let ok = lanes.par_iter_mut().with_min_len(256).all(|l| {
            match spec.eval_coefficients(tc, l.x) {
                Ok((g, s)) => {
                    l.g = g;
                    l.s = s;
                }
                Err(_) => return false,
            }
            if with_limit {
                match spec.eval_coefficients(tc, l.cx) {
                    Ok((g, s)) => {
                        l.cg = g;
                        l.cs = s;
                    }
                    Err(_) => return false,
                }
            }
            true
        });
        if !ok {
            return Err(first_failure(spec, &lanes, tc, with_limit));
        }
        for (i, l) in lanes.iter().enumerate() {
            ys[i] = l.y;
            gs[i] = l.g;
            cgs[i] = l.cg;
        }
        let m_y = group_means(&ys, group);
        let m_g = group_means(&gs, group);
        mean_trace.push(m_y[0]);
        mean_g_trace.push(m_g[0]);
        let m_cg = if with_limit { group_means(&cgs, group) } else { Vec::new() };
        if with_limit {
            c_mean_g_trace.push(m_cg[0]);
        }
        if matches!(companion, Companion::Ou { .. }) {
            c_mean_trace.push(pairwise_mean(&lanes.iter().take(group).map(|l| l.cy).collect::<Vec<_>>()));
        }
        if k == n_run {
            break;
        }

        lanes.par_iter_mut().with_min_len(256).for_each(|l| {
            let u = l.cursor.next_cell();
            l.audit.record(u[0]);
            l.k = coeffs.kick.apply(u);
        });
        for (i, l) in lanes.iter().enumerate() {
            let s = sys.noise_scale * l.s;
            noise_ys[i] = s * (l.k.eta - l.k.xi1);
            noise_xs[i] = s * (l.k.zeta - l.k.xi2);
        }
        let n_y = group_means(&noise_ys, group);
        let n_x = group_means(&noise_xs, group);
        // Companions are the large-alpha limits of this finite ensemble, so
        // they keep the common noise carried by its empirical means.
        let (c_common, c_mean) = match companion {
            Companion::None => (Vec::new(), Vec::new()),
            Companion::Limit => {
                for (i, l) in lanes.iter().enumerate() {
                    noise_ys[i] = l.cs * l.k.dw;
                }
                (group_means(&noise_ys, group), Vec::new())
            }
            Companion::Ou { .. } => {
                for (i, l) in lanes.iter().enumerate() {
                    noise_ys[i] = l.k.eta - l.k.xi1;
                    noise_xs[i] = l.cy;
                }
                (group_means(&noise_ys, group), group_means(&noise_xs, group))
            }
        };
        let finite = lanes.par_iter_mut().with_min_len(256).enumerate().all(|(i, l)| {
            let gi = i / group;
            let f = -sys.force_scale * l.g;
            let f_bar = -sys.force_scale * m_g[gi];
            let s = sys.noise_scale * l.s;
            let (x, y) = coeffs.advance(l.x, l.y, m_y[gi], f, f_bar, s, &l.k, n_y[gi], n_x[gi]);
            l.x = x;
            l.y = y;
            match companion {
                Companion::None => {}
                Companion::Limit => {
                    l.cx = limit_step(l.cx, l.cg, m_cg[gi], l.cs, l.k.dw, c_common[gi], h, kpg, ratio);
                    l.sup = l.sup.max((l.x - l.cx).abs());
                }
                Companion::Ou { sigma00 } => {
                    l.cy = coeffs.decay * l.cy
                        + (coeffs.decay_m - coeffs.decay) * c_mean[gi]
                        + sigma00 * (l.k.xi1 + c_common[gi]);
                    l.sup = l.sup.max((l.y - l.cy).abs());
                }
            }
            x.is_finite() && y.is_finite() && l.cx.is_finite() && l.cy.is_finite()
        });
        if !finite {
            return Err(Error::BlowUp { step: k + 1, t: grid.time(k + 1) });
        }
        record(&lanes, k + 1, &mut x_paths, &mut y_paths, &mut cx_paths, &mut cy_paths, &mut snapshots, &mut c_snapshots);
    }

    let mut audit = NoiseAudit::default();
    for l in &lanes {
        audit.merge(l.audit);
    }
    let sup = has_companion.then(|| lanes.iter().map(|l| l.sup).collect::<Vec<_>>());
    let primary = PathBundle {
        kind,
        grid,
        alpha: Some(alpha),
        seed: table.seed,
        increments: table,
        audit,
        group_size: group,
        steps_taken: n_run,
        x_paths,
        y_paths,
        x_final: lanes.iter().map(|l| l.x).collect(),
        y_final: Some(lanes.iter().map(|l| l.y).collect()),
        snapshots,
        mean_trace,
        mean_g_trace,
        running_sup: sup.clone(),
    };
    let companion_bundle = match companion {
        Companion::None => None,
        Companion::Limit => Some(PathBundle {
            kind: ProcessKind::Limit,
            alpha: None,
            x_paths: cx_paths,
            y_paths: None,
            x_final: lanes.iter().map(|l| l.cx).collect(),
            y_final: None,
            snapshots: c_snapshots,
            mean_trace: Vec::new(),
            mean_g_trace: c_mean_g_trace,
            running_sup: sup,
            ..primary.clone_header()
        }),
        Companion::Ou { .. } => Some(PathBundle {
            kind: ProcessKind::OrnsteinUhlenbeck,
            alpha: None,
            x_paths: None,
            y_paths: cy_paths,
            x_final: Vec::new(),
            y_final: Some(lanes.iter().map(|l| l.cy).collect()),
            snapshots: c_snapshots,
            mean_trace: c_mean_trace,
            mean_g_trace: Vec::new(),
            running_sup: sup,
            ..primary.clone_header()
        }),
    };
    Ok((primary, companion_bundle))
}

impl PathBundle {
    /// Copy of the bookkeeping fields with empty data.
    fn clone_header(&self) -> PathBundle {
        PathBundle {
            kind: self.kind,
            grid: self.grid,
            alpha: self.alpha,
            seed: self.seed,
            increments: self.increments,
            audit: self.audit,
            group_size: self.group_size,
            steps_taken: self.steps_taken,
            x_paths: None,
            y_paths: None,
            x_final: Vec::new(),
            y_final: None,
            snapshots: Vec::new(),
            mean_trace: Vec::new(),
            mean_g_trace: Vec::new(),
            running_sup: None,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(domain(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

/// One exponential step of the mean-field system. `cells` holds each path's
/// standard normal triple, turned into kicks by [`crate::noise::SplitKick`] at
/// rates `alpha (kappa + gamma)` and `alpha kappa`.
///
/// Coefficients are frozen at `state.t`; the means are recomputed after every
/// path has advanced.
pub fn step_underdamped(
    state: &EnsembleState,
    h: f64,
    alpha: f64,
    spec: &ModelSpec,
    cells: &[[f64; 3]],
) -> Result<EnsembleState> {
    check_alpha(alpha)?;
    if !(h > 0.0) {
        return Err(domain(format!("step must be positive, got {h}")));
    }
    if cells.len() != state.x.len() || state.y.len() != state.x.len() {
        return Err(domain("state and noise lengths differ"));
    }
    let sys = SecondOrder::underdamped(spec, alpha);
    let coeffs = sys.coeffs(h);
    let mut gs = Vec::with_capacity(state.x.len());
    let mut ss = Vec::with_capacity(state.x.len());
    for &x in &state.x {
        let (g, s) = spec.eval_coefficients(state.t, x)?;
        gs.push(g);
        ss.push(s);
    }
    let g_bar = pairwise_mean(&gs);
    let kicks: Vec<Kicks> = cells.iter().map(|&u| coeffs.kick.apply(u)).collect();
    let n_y: Vec<f64> = kicks.iter().zip(&ss).map(|(k, s)| alpha * s * (k.eta - k.xi1)).collect();
    let n_x: Vec<f64> = kicks.iter().zip(&ss).map(|(k, s)| alpha * s * (k.zeta - k.xi2)).collect();
    let (n_y, n_x) = (pairwise_mean(&n_y), pairwise_mean(&n_x));
    let mut x_new = Vec::with_capacity(state.x.len());
    let mut y_new = Vec::with_capacity(state.x.len());
    for i in 0..state.x.len() {
        let (x, y) = coeffs.advance(
            state.x[i],
            state.y[i],
            state.mean_y,
            -alpha * gs[i],
            -alpha * g_bar,
            alpha * ss[i],
            &kicks[i],
            n_y,
            n_x,
        );
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::BlowUp { step: (state.t / h).round() as usize + 1, t: state.t + h });
        }
        x_new.push(x);
        y_new.push(y);
    }
    let t = state.t + h;
    let mut g_new = Vec::with_capacity(x_new.len());
    for &x in &x_new {
        g_new.push(spec.eval_coefficients(t, x)?.0);
    }
    Ok(EnsembleState { t, mean_y: pairwise_mean(&y_new), mean_g: pairwise_mean(&g_new), x: x_new, y: y_new })
}

/// Mean-field underdamped ensemble with full paths stored.
pub fn simulate_underdamped(
    spec: &ModelSpec,
    grid: &SolverGrid,
    alpha: f64,
    m_paths: usize,
    seed: SeedSpec,
) -> Result<PathBundle> {
    simulate_underdamped_opts(spec, grid, alpha, m_paths, seed, &RunOptions::full_paths())
}

pub fn simulate_underdamped_opts(
    spec: &ModelSpec,
    grid: &SolverGrid,
    alpha: f64,
    m_paths: usize,
    seed: SeedSpec,
    opts: &RunOptions,
) -> Result<PathBundle> {
    check_alpha(alpha)?;
    grid.check_cap(spec)?;
    let table = make_increments(seed, m_paths, grid.n_steps(), grid.dt())?;
    let setup = Setup {
        spec,
        grid: *grid,
        alpha,
        sys: SecondOrder::underdamped(spec, alpha),
        kind: ProcessKind::Underdamped,
        group: m_paths,
        table,
        y_init: spec.y0,
        companion: Companion::None,
    };
    Ok(run(setup, opts)?.0)
}

/// Underdamped ensemble and first-order limit driven by the same increments,
/// with the per-path running supremum of `|X^alpha - X|`.
pub fn simulate_displacement_coupled(
    spec: &ModelSpec,
    grid: &SolverGrid,
    alpha: f64,
    m_paths: usize,
    seed: SeedSpec,
    opts: &RunOptions,
) -> Result<CoupledRun> {
    check_alpha(alpha)?;
    grid.check_cap(spec)?;
    let table = make_increments(seed, m_paths, grid.n_steps(), grid.dt())?;
    let setup = Setup {
        spec,
        grid: *grid,
        alpha,
        sys: SecondOrder::underdamped(spec, alpha),
        kind: ProcessKind::Underdamped,
        group: m_paths,
        table,
        y_init: spec.y0,
        companion: Companion::Limit,
    };
    let (primary, companion) = run(setup, opts)?;
    Ok(CoupledRun { primary, companion: companion.expect("limit companion requested") })
}

/// One system of `n_particles` interacting through their empirical mean velocity.
pub fn simulate_particles(
    spec: &ModelSpec,
    grid: &SolverGrid,
    alpha: f64,
    n_particles: usize,
    seed: SeedSpec,
) -> Result<PathBundle> {
    simulate_particle_replicas(spec, grid, alpha, n_particles, 1, seed, &RunOptions::full_paths())
}

/// `replicas` independent particle systems advanced together. Path
/// `r * n_particles + i` is particle `i` of replica `r`.
pub fn simulate_particle_replicas(
    spec: &ModelSpec,
    grid: &SolverGrid,
    alpha: f64,
    n_particles: usize,
    replicas: usize,
    seed: SeedSpec,
    opts: &RunOptions,
) -> Result<PathBundle> {
    check_alpha(alpha)?;
    grid.check_cap(spec)?;
    if n_particles == 0 || replicas == 0 {
        return Err(domain("particle systems need at least one particle and one replica"));
    }
    let table = make_increments(seed, n_particles * replicas, grid.n_steps(), grid.dt())?;
    let setup = Setup {
        spec,
        grid: *grid,
        alpha,
        sys: SecondOrder::underdamped(spec, alpha),
        kind: ProcessKind::Particles { n_particles },
        group: n_particles,
        table,
        y_init: spec.y0,
        companion: Companion::None,
    };
    Ok(run(setup, opts)?.0)
}

/// Rescaled pair `(X^_t, Y~^alpha_t)` on `[0, T]` and its OU limit, both driven
/// by `W~_t = sqrt(alpha) W_{t/alpha}`. Full paths are stored.
pub fn simulate_rescaled(
    spec: &ModelSpec,
    grid: &SolverGrid,
    alpha: f64,
    m_paths: usize,
    seed: SeedSpec,
) -> Result<CoupledRun> {
    simulate_rescaled_opts(spec, grid, alpha, m_paths, seed, &RunOptions::full_paths())
}

pub fn simulate_rescaled_opts(
    spec: &ModelSpec,
    grid: &SolverGrid,
    alpha: f64,
    m_paths: usize,
    seed: SeedSpec,
    opts: &RunOptions,
) -> Result<CoupledRun> {
    if !(alpha >= 1.0) {
        return Err(domain(format!("the rescaled system needs alpha >= 1, got {alpha}")));
    }
    grid.check_cap(spec)?;
    let base = make_increments(seed, m_paths, grid.n_steps(), grid.dt() / alpha)?;
    let table = rescaled_increments(&base, alpha)?;
    let setup = Setup {
        spec,
        grid: *grid,
        alpha,
        sys: SecondOrder::rescaled(spec, alpha),
        kind: ProcessKind::Rescaled,
        group: m_paths,
        table,
        y_init: spec.y0 / alpha.sqrt(),
        companion: Companion::Ou { sigma00: spec.sigma00() },
    };
    let (primary, companion) = run(setup, opts)?;
    Ok(CoupledRun { primary, companion: companion.expect("OU companion requested") })
}
