//! Fixed-step explicit time integration shared by every solver.
//!
//! A system receives its nonautonomous inputs per stage, so forcing signals
//! are sampled once per step by the caller ([`crate::forcing::SignalBank`])
//! and the same stage values drive both micro and macro solvers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    Rk4,
    Euler,
    EulerMaruyama,
    /// Stochastic Heun: second order for smooth inputs and Stratonovich
    /// consistent when inputs are white noise.
    Heun,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Rk4 => "rk4",
            Scheme::Euler => "euler",
            Scheme::EulerMaruyama => "euler-maruyama",
            Scheme::Heun => "heun",
        }
    }

    /// Offsets of the stage times as fractions of `dt`.
    pub fn stage_offsets(self) -> &'static [f64] {
        match self {
            Scheme::Rk4 => &[0.0, 0.5, 0.5, 1.0],
            Scheme::Euler | Scheme::EulerMaruyama => &[0.0],
            Scheme::Heun => &[0.0, 1.0],
        }
    }

    pub fn accepts_white_noise(self) -> bool {
        matches!(self, Scheme::EulerMaruyama | Scheme::Heun)
    }

    pub fn check_white_noise(self, has_white_noise: bool) -> Result<()> {
        if has_white_noise && !self.accepts_white_noise() {
            return Err(Error::SchemeMismatch { scheme: self.name() });
        }
        Ok(())
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rk4" => Ok(Scheme::Rk4),
            "euler" => Ok(Scheme::Euler),
            "euler-maruyama" | "em" => Ok(Scheme::EulerMaruyama),
            "heun" => Ok(Scheme::Heun),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

/// A semi-discrete system `dy/dt = f(t, y, inputs)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    /// Number of forcing inputs consumed per stage.
    fn n_inputs(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]);
}

/// Input vectors for each stage of one step, in stage order.
#[derive(Debug, Clone, Default)]
pub struct Stages {
    pub values: Vec<Vec<f64>>,
}

impl Stages {
    /// Inputs that are the same at every stage.
    pub fn constant(scheme: Scheme, inputs: Vec<f64>) -> Self {
        Stages {
            values: vec![inputs; scheme.stage_offsets().len()],
        }
    }

    /// Inputs from a closure evaluated at each stage time.
    pub fn sampled(scheme: Scheme, t: f64, dt: f64, mut f: impl FnMut(f64) -> Vec<f64>) -> Self {
        Stages {
            values: scheme.stage_offsets().iter().map(|c| f(t + c * dt)).collect(),
        }
    }
}

/// Scratch buffers reused across steps.
#[derive(Debug, Default)]
pub struct Workspace {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Workspace {
    pub fn new(dim: usize) -> Self {
        Workspace {
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
        }
    }

    fn ensure(&mut self, dim: usize) {
        if self.tmp.len() != dim {
            *self = Workspace::new(dim);
        }
    }
}

/// Advance `y` from `t` to `t + dt` in place.
///
/// `stages` must hold one input vector per stage of `scheme`. White noise
/// inputs arrive already scaled by `1/√dt`, which turns Euler into
/// Euler–Maruyama and Heun into the Stratonovich Heun scheme.
pub fn step<S: OdeSystem + ?Sized>(
    sys: &S,
    scheme: Scheme,
    t: f64,
    dt: f64,
    y: &mut [f64],
    stages: &Stages,
    ws: &mut Workspace,
) {
    let n = y.len();
    ws.ensure(n);
    let need = scheme.stage_offsets().len();
    assert!(
        stages.values.len() >= need,
        "scheme {} needs {need} stage inputs, got {}",
        scheme.name(),
        stages.values.len()
    );
    let inp = &stages.values;
    let Workspace { k, tmp } = ws;
    match scheme {
        Scheme::Euler | Scheme::EulerMaruyama => {
            sys.rhs(t, y, &inp[0], &mut k[0]);
            for i in 0..n {
                y[i] += dt * k[0][i];
            }
        }
        Scheme::Heun => {
            sys.rhs(t, y, &inp[0], &mut k[0]);
            for i in 0..n {
                tmp[i] = y[i] + dt * k[0][i];
            }
            sys.rhs(t + dt, tmp, &inp[1], &mut k[1]);
            for i in 0..n {
                y[i] += 0.5 * dt * (k[0][i] + k[1][i]);
            }
        }
        Scheme::Rk4 => {
            let (k1, rest) = k.split_at_mut(1);
            let (k2, rest) = rest.split_at_mut(1);
            let (k3, k4) = rest.split_at_mut(1);
            let (k1, k2, k3, k4) = (&mut k1[0], &mut k2[0], &mut k3[0], &mut k4[0]);
            sys.rhs(t, y, &inp[0], k1);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k1[i];
            }
            sys.rhs(t + 0.5 * dt, tmp, &inp[1], k2);
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * dt * k2[i];
            }
            sys.rhs(t + 0.5 * dt, tmp, &inp[2], k3);
            for i in 0..n {
                tmp[i] = y[i] + dt * k3[i];
            }
            sys.rhs(t + dt, tmp, &inp[3], k4);
            for i in 0..n {
                y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
}

/// Step `sys` `n_steps` times from `t0`, pulling stage inputs from `bank`.
/// `observe(i, t, y)` runs after step `i` (1-based). Non-finite state aborts
/// with [`Error::Unstable`] naming `what`.
#[allow(clippy::too_many_arguments)]
pub fn integrate<S: OdeSystem + ?Sized>(
    sys: &S,
    scheme: Scheme,
    bank: &mut crate::forcing::SignalBank,
    y: &mut [f64],
    t0: f64,
    dt: f64,
    n_steps: usize,
    what: &str,
    observe: impl FnMut(usize, f64, &[f64]) -> Result<()>,
) -> Result<()> {
    integrate_with(sys, scheme, bank, y, t0, dt, n_steps, what, &|k| format!("{what} (state component {k})"), observe)
}

/// [`integrate`] with a custom description of the first non-finite component.
#[allow(clippy::too_many_arguments)]
pub fn integrate_with<S: OdeSystem + ?Sized>(
    sys: &S,
    scheme: Scheme,
    bank: &mut crate::forcing::SignalBank,
    y: &mut [f64],
    t0: f64,
    dt: f64,
    n_steps: usize,
    what: &str,
    describe: &dyn Fn(usize) -> String,
    mut observe: impl FnMut(usize, f64, &[f64]) -> Result<()>,
) -> Result<()> {
    if bank.n_inputs() != sys.n_inputs() {
        return Err(Error::Config(format!(
            "{what}: system takes {} inputs, forcing provides {}",
            sys.n_inputs(),
            bank.n_inputs()
        )));
    }
    if y.len() != sys.dim() {
        return Err(Error::Config(format!(
            "{what}: state has {} entries, system dimension is {}",
            y.len(),
            sys.dim()
        )));
    }
    let mut ws = Workspace::new(y.len());
    for i in 0..n_steps {
        let t = t0 + i as f64 * dt;
        let stages = bank.step(dt, scheme)?;
        step(sys, scheme, t, dt, y, &stages, &mut ws);
        let t1 = t0 + (i + 1) as f64 * dt;
        if let Some(k) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Unstable { what: describe(k), t: t1 });
        }
        observe(i + 1, t1, y)?;
    }
    Ok(())
}

/// Adapter turning a closure into an [`OdeSystem`].
pub struct FnSystem<F> {
    pub dim: usize,
    pub n_inputs: usize,
    pub f: F,
}

impl<F> OdeSystem for FnSystem<F>
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_inputs(&self) -> usize {
        self.n_inputs
    }
    fn rhs(&self, t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]) {
        (self.f)(t, y, inputs, dy)
    }
}
