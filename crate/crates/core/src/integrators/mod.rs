//! Time steppers for the underdamped system, its particle approximation, the
//! first-order limit, the rescaled-velocity pair with its OU limit and the
//! Gaussian `W^alpha` process.
//!
//! The second-order systems all share one linear structure,
//!
//! ```text
//! dy = [-a y + (a - a_m) m + f(t, x)] dt + s(t, x) dW,     dx = c_x y dt,
//! ```
//!
//! where `m` is the ensemble (or particle-group) mean of `y`. The mean relaxes
//! at rate `a_m` and the deviations at rate `a`; both are integrated exactly with
//! `f`, `s` frozen over the step, including the part of the noise that moves
//! the group mean.

pub(crate) mod first_order;
mod second_order;
mod w_alpha;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use first_order::{
    limit_drift, simulate_limit, simulate_limit_opts, simulate_mean_ode, simulate_ou, simulate_ou_opts, MeanOdeResidual,
};
pub use second_order::{
    simulate_displacement_coupled, simulate_particle_replicas, simulate_particles, simulate_rescaled,
    simulate_rescaled_opts, simulate_underdamped, simulate_underdamped_opts, step_underdamped, CoupledRun,
};
pub(crate) use second_order::SecondOrder;
pub use w_alpha::{sample_w_alpha, variance_clamp_count, w_alpha_variance, w_alpha_variance_oracle};

use crate::model::{lambda, SolverGrid};
use crate::noise::{IncrementTable, Kicks, NoiseAudit, SeedSpec, SplitKick};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "process")]
pub enum ProcessKind {
    Underdamped,
    Particles { n_particles: usize },
    Limit,
    Rescaled,
    OrnsteinUhlenbeck,
}

/// Snapshot of a lockstep ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleState {
    pub t: f64,
    pub x: Vec<f64>,
    /// Empty for first-order processes.
    pub y: Vec<f64>,
    pub mean_y: f64,
    pub mean_g: f64,
}

/// What a simulation keeps besides the terminal state.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Keep every node of every path.
    pub store_paths: bool,
    /// Grid times at which to copy the ensemble.
    pub snapshot_times: Vec<f64>,
    /// Stop at this grid time instead of the horizon.
    pub stop_at: Option<f64>,
}

impl RunOptions {
    pub fn full_paths() -> Self {
        Self { store_paths: true, ..Self::default() }
    }

    pub fn until(t: f64) -> Self {
        Self { stop_at: Some(t), ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Option<Vec<f64>>,
}

/// Output of one lockstep simulation.
#[derive(Clone, Debug)]
pub struct PathBundle {
    pub kind: ProcessKind,
    pub grid: SolverGrid,
    pub alpha: Option<f64>,
    pub seed: SeedSpec,
    /// Descriptor of the increments that drove the run.
    pub increments: IncrementTable,
    pub audit: NoiseAudit,
    /// Size of the groups over which means are taken.
    pub group_size: usize,
    pub steps_taken: usize,
    pub x_paths: Option<Array2<f64>>,
    pub y_paths: Option<Array2<f64>>,
    pub x_final: Vec<f64>,
    pub y_final: Option<Vec<f64>>,
    pub snapshots: Vec<Snapshot>,
    /// Mean of `y` over the first group at every node.
    pub mean_trace: Vec<f64>,
    /// Mean of `g(t, x)` over the first group at every node.
    pub mean_g_trace: Vec<f64>,
    /// Per-path running supremum of the coupled difference, when coupled.
    pub running_sup: Option<Vec<f64>>,
}

impl PathBundle {
    pub fn m_paths(&self) -> usize {
        self.increments.m_paths
    }

    pub fn snapshot(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| (s.t - t).abs() <= 1e-9 * self.grid.horizon().max(1.0))
    }

    /// Final time reached.
    pub fn t_final(&self) -> f64 {
        self.grid.time(self.steps_taken)
    }
}

/// Coefficients of one exact step of the linear part.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StepCoeffs {
    pub decay: f64,
    pub decay_m: f64,
    pub lam: f64,
    pub lam_m: f64,
    pub cum: f64,
    pub cum_m: f64,
    pub c_x: f64,
    pub kick: SplitKick,
}

impl StepCoeffs {
    pub fn new(a: f64, a_m: f64, c_x: f64, h: f64) -> Self {
        let lam = lambda(h, a);
        let lam_m = lambda(h, a_m);
        Self {
            decay: (-a * h).exp(),
            decay_m: (-a_m * h).exp(),
            lam,
            lam_m,
            cum: h * h * crate::special::phi(2, a * h),
            cum_m: h * h * crate::special::phi(2, a_m * h),
            c_x,
            kick: SplitKick::new(a, a_m, h),
        }
    }

    /// Advances one path given the group mean `m`, the frozen forcing `f`, its
    /// group mean `f_bar`, the noise amplitude `s`, the path's kicks and the
    /// group averages `noise_y = <s (eta - xi1)>`, `noise_x = <s (zeta - xi2)>`.
    #[inline]
    #[allow(clippy::too_many_arguments)]
    pub fn advance(
        &self,
        x: f64,
        y: f64,
        m: f64,
        f: f64,
        f_bar: f64,
        s: f64,
        k: &Kicks,
        noise_y: f64,
        noise_x: f64,
    ) -> (f64, f64) {
        let y_new = self.decay * y
            + (self.decay_m - self.decay) * m
            + f * self.lam
            + f_bar * (self.lam_m - self.lam)
            + s * k.xi1
            + noise_y;
        let x_new = x
            + self.c_x
                * (y * self.lam
                    + m * (self.lam_m - self.lam)
                    + f * self.cum
                    + f_bar * (self.cum_m - self.cum)
                    + s * k.xi2
                    + noise_x);
        (x_new, y_new)
    }
}

pub(crate) fn group_means(values: &[f64], group: usize) -> Vec<f64> {
    values.chunks(group).map(crate::special::pairwise_mean).collect()
}
