//! Problem definitions: coefficients, physical constants, the time grid and
//! the `lambda(t, a) = (1 - e^{-at}) / a` kernel.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// A deterministic coefficient `(t, x) -> value`.
pub type Coefficient = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaKind {
    General,
    TimeOnly,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoefficientName {
    Drift,
    Diffusion,
}

/// `lambda(t, a) = (1 - e^{-at}) / a`, continuously extended by `t` at `a = 0`.
pub fn lambda_kernel(t: f64, a: f64) -> Result<f64> {
    if !(t >= 0.0) || !(a >= 0.0) {
        return Err(domain(format!("lambda_kernel needs t >= 0 and a >= 0, got t={t}, a={a}")));
    }
    Ok(lambda(t, a))
}

/// Unchecked kernel for hot paths.
#[inline]
pub(crate) fn lambda(t: f64, a: f64) -> f64 {
    let at = a * t;
    if at < 1e-8 {
        t * (1.0 - at / 2.0 + at * at / 6.0)
    } else {
        -(-at).exp_m1() / a
    }
}

/// The drift/diffusion pair together with the constants of the second-order system.
#[derive(Clone)]
pub struct ModelSpec {
    pub kappa: f64,
    pub gamma: f64,
    pub x0: f64,
    pub y0: f64,
    pub horizon: f64,
    pub sigma_kind: SigmaKind,
    pub sigma_floor: Option<f64>,
    /// Resolution hint for the drift's Lipschitz scale; enters the step cap.
    pub drift_scale: f64,
    name: String,
    g: Coefficient,
    sigma: Coefficient,
    g_dx: Option<Coefficient>,
    sigma_dx: Option<Coefficient>,
    sigma_dt: Option<Coefficient>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("kappa", &self.kappa)
            .field("gamma", &self.gamma)
            .field("x0", &self.x0)
            .field("y0", &self.y0)
            .field("horizon", &self.horizon)
            .field("sigma_kind", &self.sigma_kind)
            .field("sigma_floor", &self.sigma_floor)
            .field("drift_scale", &self.drift_scale)
            .finish_non_exhaustive()
    }
}

pub struct ModelBuilder {
    spec: ModelSpec,
}

impl ModelBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.spec.name = name.into();
        self
    }
    pub fn kappa(mut self, kappa: f64) -> Self {
        self.spec.kappa = kappa;
        self
    }
    pub fn gamma(mut self, gamma: f64) -> Self {
        self.spec.gamma = gamma;
        self
    }
    pub fn initial(mut self, x0: f64, y0: f64) -> Self {
        self.spec.x0 = x0;
        self.spec.y0 = y0;
        self
    }
    pub fn horizon(mut self, horizon: f64) -> Self {
        self.spec.horizon = horizon;
        self
    }
    pub fn sigma_kind(mut self, kind: SigmaKind) -> Self {
        self.spec.sigma_kind = kind;
        self
    }
    pub fn sigma_floor(mut self, floor: f64) -> Self {
        self.spec.sigma_floor = Some(floor);
        self
    }
    pub fn drift_scale(mut self, scale: f64) -> Self {
        self.spec.drift_scale = scale;
        self
    }
    pub fn g_dx(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.g_dx = Some(Arc::new(f));
        self
    }
    pub fn sigma_dx(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.sigma_dx = Some(Arc::new(f));
        self
    }
    pub fn sigma_dt(mut self, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.spec.sigma_dt = Some(Arc::new(f));
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let s = self.spec;
        if !(s.kappa > 0.0) || !s.kappa.is_finite() {
            return Err(domain(format!("kappa must be positive, got {}", s.kappa)));
        }
        if !(s.gamma >= 0.0) || !s.gamma.is_finite() {
            return Err(domain(format!("gamma must be nonnegative, got {}", s.gamma)));
        }
        if !(s.horizon > 0.0) || !s.horizon.is_finite() {
            return Err(domain(format!("horizon must be positive, got {}", s.horizon)));
        }
        if !s.x0.is_finite() || !s.y0.is_finite() {
            return Err(domain("initial point must be finite"));
        }
        if let Some(floor) = s.sigma_floor {
            if !(floor > 0.0) {
                return Err(domain(format!("sigma floor must be positive, got {floor}")));
            }
        }
        if !(s.drift_scale > 0.0) {
            return Err(domain(format!("drift scale must be positive, got {}", s.drift_scale)));
        }
        Ok(s)
    }
}

impl ModelSpec {
    /// Starts a builder with `kappa = 1`, `gamma = 0`, `(x0, y0) = (0, 0)`, `T = 1`.
    pub fn builder(
        g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> ModelBuilder {
        ModelBuilder {
            spec: ModelSpec {
                kappa: 1.0,
                gamma: 0.0,
                x0: 0.0,
                y0: 0.0,
                horizon: 1.0,
                sigma_kind: SigmaKind::General,
                sigma_floor: None,
                drift_scale: 1.0,
                name: "custom".into(),
                g: Arc::new(g),
                sigma: Arc::new(sigma),
                g_dx: None,
                sigma_dx: None,
                sigma_dt: None,
            },
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kappa_plus_gamma(&self) -> f64 {
        self.kappa + self.gamma
    }

    /// `sigma(0, x0)`, the diffusion of the Ornstein–Uhlenbeck limit.
    pub fn sigma00(&self) -> f64 {
        (self.sigma)(0.0, self.x0)
    }

    #[inline]
    pub(crate) fn sigma_raw(&self, t: f64, x: f64) -> f64 {
        (self.sigma)(t, x)
    }

    /// `(g(t,x), sigma(t,x))` with finiteness, ellipticity and kind checks.
    pub fn eval_coefficients(&self, t: f64, x: f64) -> Result<(f64, f64)> {
        let g = (self.g)(t, x);
        if !g.is_finite() {
            return Err(Error::Evaluation { which: "g", t, x });
        }
        let s = (self.sigma)(t, x);
        if !s.is_finite() {
            return Err(Error::Evaluation { which: "sigma", t, x });
        }
        if let Some(floor) = self.sigma_floor {
            if s.abs() < floor {
                return Err(Error::Ellipticity { t, x, value: s.abs(), floor });
            }
        }
        match self.sigma_kind {
            SigmaKind::General => {}
            SigmaKind::TimeOnly => {
                let probe = (self.sigma)(t, x + 1.0);
                if probe != s {
                    return Err(Error::SigmaKind { t });
                }
            }
            SigmaKind::Constant => {
                let probe = (self.sigma)(0.0, x + 1.0);
                if probe != s {
                    return Err(Error::SigmaKind { t });
                }
            }
        }
        Ok((g, s))
    }

    /// Spatial derivative of `g` or `sigma`: analytic when supplied, otherwise a
    /// central difference with step `max(1e-6, 1e-6 |x|)`.
    pub fn eval_spatial_derivative(&self, t: f64, x: f64, which: CoefficientName) -> Result<f64> {
        let (analytic, f, label) = match which {
            CoefficientName::Drift => (self.g_dx.as_ref(), &self.g, "g_dx"),
            CoefficientName::Diffusion => {
                if self.sigma_kind != SigmaKind::General && self.sigma_dx.is_none() {
                    return Ok(0.0);
                }
                (self.sigma_dx.as_ref(), &self.sigma, "sigma_dx")
            }
        };
        let v = match analytic {
            Some(d) => d(t, x),
            None => {
                let h = 1e-6_f64.max(1e-6 * x.abs());
                (f(t, x + h) - f(t, x - h)) / (2.0 * h)
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation { which: label, t, x })
        }
    }

    /// Time derivative of a time-only diffusion, analytic or by central difference.
    pub fn eval_sigma_time_derivative(&self, t: f64) -> Result<f64> {
        let x = self.x0;
        let v = match &self.sigma_dt {
            Some(d) => d(t, x),
            None => {
                let h = 1e-6_f64.max(1e-6 * t.abs());
                let lo = (t - h).max(0.0);
                let hi = t + h;
                ((self.sigma)(hi, x) - (self.sigma)(lo, x)) / (hi - lo)
            }
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation { which: "sigma_dt", t, x })
        }
    }
}

/// Uniform time grid `t_k = k dt`, `k = 0..=n_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverGrid {
    n_steps: usize,
    dt: f64,
    horizon: f64,
}

impl SolverGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(domain(format!("grid horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(domain("grid needs at least one step"));
        }
        Ok(Self { n_steps, dt: horizon / n_steps as f64, horizon })
    }

    /// `min(T/200, 0.5/(kappa+gamma), 0.1/drift_scale)`.
    pub fn stiffness_cap(horizon: f64, kappa_plus_gamma: f64, drift_scale: f64) -> f64 {
        (horizon / 200.0).min(0.5 / kappa_plus_gamma).min(0.1 / drift_scale)
    }

    /// Grid for `spec` with `n_steps`, rejected if it violates the step cap.
    pub fn for_model(spec: &ModelSpec, n_steps: usize) -> Result<Self> {
        let grid = Self::new(spec.horizon, n_steps)?;
        grid.check_cap(spec)?;
        Ok(grid)
    }

    /// Smallest grid for `spec` that satisfies the step cap.
    pub fn capped(spec: &ModelSpec) -> Result<Self> {
        let cap = Self::stiffness_cap(spec.horizon, spec.kappa_plus_gamma(), spec.drift_scale);
        let n = (spec.horizon / cap * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Self::for_model(spec, n)
    }

    pub fn check_cap(&self, spec: &ModelSpec) -> Result<()> {
        let cap = Self::stiffness_cap(self.horizon, spec.kappa_plus_gamma(), spec.drift_scale);
        if self.dt > cap * (1.0 + 1e-12) {
            return Err(Error::StepCap { dt: self.dt, cap });
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    /// The same horizon with twice as many steps.
    pub fn halved(&self) -> Self {
        Self { n_steps: 2 * self.n_steps, dt: self.horizon / (2 * self.n_steps) as f64, horizon: self.horizon }
    }

    /// Index of the grid node at time `t`; `t` must coincide with a node.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k as usize > self.n_steps || (k * self.dt - t).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(Error::Resolution(format!(
                "t={t} is not a node of the grid (dt={}, n={})",
                self.dt, self.n_steps
            )));
        }
        Ok(k as usize)
    }
}

/// Parameters of the inline coefficient family
/// `g = g_lin x + g_sin sin x + g_t t`, `sigma = s0 + s_t t + s_cos cos x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineCoefficients {
    #[serde(default)]
    pub g_lin: f64,
    #[serde(default)]
    pub g_sin: f64,
    #[serde(default)]
    pub g_t: f64,
    #[serde(default = "one")]
    pub s0: f64,
    #[serde(default)]
    pub s_t: f64,
    #[serde(default)]
    pub s_cos: f64,
}

fn one() -> f64 {
    1.0
}

impl InlineCoefficients {
    pub fn builder(self) -> ModelBuilder {
        let Self { g_lin, g_sin, g_t, s0, s_t, s_cos } = self;
        let kind = if s_cos != 0.0 {
            SigmaKind::General
        } else if s_t != 0.0 {
            SigmaKind::TimeOnly
        } else {
            SigmaKind::Constant
        };
        ModelSpec::builder(
            move |t, x| g_lin * x + g_sin * x.sin() + g_t * t,
            move |t, x| s0 + s_t * t + s_cos * x.cos(),
        )
        .name("inline")
        .sigma_kind(kind)
        .g_dx(move |_, x| g_lin + g_sin * x.cos())
        .sigma_dx(move |_, x| -s_cos * x.sin())
        .sigma_dt(move |_, _| s_t)
        .drift_scale((g_lin.abs() + g_sin.abs()).max(1.0))
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_MODELS: &[&str] = &["linear", "linear_trig", "double_well", "trig", "velocity_trig"];

/// Built-in models by name, returned as builders so constants can be set.
///
/// * `linear`: `g = x`, `sigma = 1`.
/// * `linear_trig`: `g = x + 0.5 sin x`, `sigma = 1 + 0.2 cos x`, floor 0.5.
/// * `double_well`: `g = (x^3 - x) / (1 + 0.1 x^2)` (saturated cubic), `sigma = 1`.
/// * `trig`: `g = sin x`, `sigma = 1 + 0.3 cos x`, floor 0.5.
/// * `velocity_trig`: `g = sin x + 0.1 t`, `sigma = 1 + 0.2 t` (time only).
pub fn builtin(name: &str) -> Result<ModelBuilder> {
    let b = match name {
        "linear" => ModelSpec::builder(|_, x| x, |_, _| 1.0)
            .sigma_kind(SigmaKind::Constant)
            .g_dx(|_, _| 1.0)
            .sigma_dx(|_, _| 0.0)
            .sigma_dt(|_, _| 0.0),
        "linear_trig" => ModelSpec::builder(|_, x| x + 0.5 * x.sin(), |_, x| 1.0 + 0.2 * x.cos())
            .sigma_floor(0.5)
            .drift_scale(1.5)
            .g_dx(|_, x| 1.0 + 0.5 * x.cos())
            .sigma_dx(|_, x| -0.2 * x.sin()),
        "double_well" => ModelSpec::builder(
            |_, x| (x * x * x - x) / (1.0 + 0.1 * x * x),
            |_, _| 1.0,
        )
        .sigma_kind(SigmaKind::Constant)
        .drift_scale(10.0)
        .g_dx(|_, x| {
            let d = 1.0 + 0.1 * x * x;
            ((3.0 * x * x - 1.0) * d - (x * x * x - x) * 0.2 * x) / (d * d)
        })
        .sigma_dx(|_, _| 0.0)
        .sigma_dt(|_, _| 0.0),
        "trig" => ModelSpec::builder(|_, x| x.sin(), |_, x| 1.0 + 0.3 * x.cos())
            .sigma_floor(0.5)
            .g_dx(|_, x| x.cos())
            .sigma_dx(|_, x| -0.3 * x.sin()),
        "velocity_trig" => ModelSpec::builder(|t, x| x.sin() + 0.1 * t, |t, _| 1.0 + 0.2 * t)
            .sigma_kind(SigmaKind::TimeOnly)
            .g_dx(|_, x| x.cos())
            .sigma_dx(|_, _| 0.0)
            .sigma_dt(|_, _| 0.2),
        other => {
            return Err(domain(format!(
                "unknown model `{other}`; known models: {}",
                BUILTIN_MODELS.join(", ")
            )))
        }
    };
    Ok(b.name(name))
}
