//! Reference solvers: forced Burgers' equation on a fine periodic grid, the
//! forced Burgers-like lattice, and the overlapping-element embedding with
//! nonlocal coupling conditions used to measure emergence rates.

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::stepper::OdeSystem;

/// Discretisation of the advection term `α u u_x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Advection {
    /// `u_i (u_{i+1} − u_{i−1}) / 2Δx`, the same shape as the lattice model.
    #[default]
    Advective,
    /// `(u_{i+1}² − u_{i−1}²) / 4Δx`.
    Conservative,
    /// Skew-symmetric mix of the two, weights ⅓ and ⅔.
    Fornberg,
}

impl std::str::FromStr for Advection {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "advective" => Ok(Advection::Advective),
            "conservative" => Ok(Advection::Conservative),
            "fornberg" => Ok(Advection::Fornberg),
            other => config(format!("unknown advection form `{other}`")),
        }
    }
}

#[inline]
fn advect(form: Advection, um: f64, u: f64, up: f64, dx: f64) -> f64 {
    match form {
        Advection::Advective => u * (up - um) / (2.0 * dx),
        Advection::Conservative => (up * up - um * um) / (4.0 * dx),
        Advection::Fornberg => (u * (up - um) + (up * up - um * um)) / (6.0 * dx),
    }
}

/// `du_i/dt = δ²u_i/Δx² − α·adv(u)_i + ε φ_i` on a periodic grid. An empty
/// `forcing` slice means `φ ≡ 0`.
pub fn burgers_rhs(
    u: &[f64],
    forcing: &[f64],
    dx: f64,
    alpha: f64,
    eps: f64,
    form: Advection,
    du: &mut [f64],
) {
    let n = u.len();
    let inv = 1.0 / (dx * dx);
    for i in 0..n {
        let um = u[(i + n - 1) % n];
        let up = u[(i + 1) % n];
        let f = if forcing.is_empty() { 0.0 } else { forcing[i] };
        du[i] = inv * (up - 2.0 * u[i] + um) - alpha * advect(form, um, u[i], up, dx) + eps * f;
    }
}

/// `du_i/dt = (4/H²)δ²u_i − (α/H)u_i(u_{i+1} − u_{i−1}) + ε φ_i` on `2m`
/// points with spacing `H/2`.
pub fn lattice_rhs(u: &[f64], forcing: &[f64], h: f64, alpha: f64, eps: f64, du: &mut [f64]) {
    burgers_rhs(u, forcing, 0.5 * h, alpha, eps, Advection::Advective, du)
}

/// Grid points `x_i = i Δx`, `i = 0..n`.
pub fn grid_points(n: usize, dx: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 * dx).collect()
}

/// Fine periodic grid for Burgers' equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurgersSystem {
    pub n: usize,
    pub dx: f64,
    pub alpha: f64,
    pub eps: f64,
    pub form: Advection,
    /// Whether per-point forcing inputs are consumed.
    pub forced: bool,
}

impl BurgersSystem {
    /// Grid of `n` points on a domain of length `length`.
    pub fn new(length: f64, n: usize, alpha: f64, eps: f64) -> Result<Self> {
        if n < 3 {
            return config(format!("fine grid needs at least 3 points, got {n}"));
        }
        if !(length > 0.0 && length.is_finite()) {
            return config(format!("domain length must be positive, got {length}"));
        }
        Ok(BurgersSystem {
            n,
            dx: length / n as f64,
            alpha,
            eps,
            form: Advection::default(),
            forced: true,
        })
    }

    /// Grid with spacing `dx` that must divide `length`.
    pub fn with_spacing(length: f64, dx: f64, alpha: f64, eps: f64) -> Result<Self> {
        let n = (length / dx).round();
        if !(dx > 0.0) || ((n * dx - length).abs() > 1e-9 * length) {
            return config(format!("dx = {dx} does not divide the domain length {length}"));
        }
        Self::new(length, n as usize, alpha, eps)
    }

    pub fn with_form(mut self, form: Advection) -> Self {
        self.form = form;
        self
    }

    pub fn unforced(mut self) -> Self {
        self.forced = false;
        self
    }

    pub fn points(&self) -> Vec<f64> {
        grid_points(self.n, self.dx)
    }

    pub fn length(&self) -> f64 {
        self.n as f64 * self.dx
    }
}

impl OdeSystem for BurgersSystem {
    fn dim(&self) -> usize {
        self.n
    }
    fn n_inputs(&self) -> usize {
        if self.forced {
            self.n
        } else {
            0
        }
    }
    fn rhs(&self, _t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]) {
        burgers_rhs(y, inputs, self.dx, self.alpha, self.eps, self.form, dy)
    }
}

/// Fine lattice `x_i = iH/2` with `2m` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSystem {
    pub m: usize,
    pub h: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl LatticeSystem {
    pub fn new(m: usize, h: f64, alpha: f64, eps: f64) -> Result<Self> {
        if m < 3 {
            return config(format!("lattice needs at least 3 coarse elements, got {m}"));
        }
        if !(h > 0.0 && h.is_finite()) {
            return config(format!("element size must be positive, got {h}"));
        }
        Ok(LatticeSystem { m, h, alpha, eps })
    }
}

impl OdeSystem for LatticeSystem {
    fn dim(&self) -> usize {
        2 * self.m
    }
    fn n_inputs(&self) -> usize {
        2 * self.m
    }
    fn rhs(&self, _t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]) {
        lattice_rhs(y, inputs, self.h, self.alpha, self.eps, dy)
    }
}

/// `m` overlapping elements `|x − X_j| ≤ H`, each resolved by `intervals`
/// equal steps, evolving Burgers' dynamics with the coupling condition
/// `u_j(X_{j±1}) = (1 − γ) u_j(X_j) + γ u_{j±1}(X_{j±1})`.
///
/// State is element-major over the interior points `p = 1..intervals`; the
/// two edge values are implied by the coupling. With `intervals = 4` this is
/// exactly the lattice embedding on points `2j, 2j ± 1, 2j ± 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementArray {
    pub m: usize,
    pub h: f64,
    pub intervals: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl ElementArray {
    pub fn new(m: usize, h: f64, intervals: usize, gamma: f64) -> Result<Self> {
        if m < 1 {
            return config("need at least one element");
        }
        if intervals < 2 || intervals % 2 != 0 {
            return config(format!("element intervals must be even and >= 2, got {intervals}"));
        }
        if !(h > 0.0 && h.is_finite()) {
            return config(format!("element size must be positive, got {h}"));
        }
        Ok(ElementArray {
            m,
            h,
            intervals,
            gamma,
            alpha: 0.0,
            eps: 0.0,
        })
    }

    pub fn lattice(m: usize, h: f64, gamma: f64) -> Result<Self> {
        Self::new(m, h, 4, gamma)
    }

    pub fn with_physics(mut self, alpha: f64, eps: f64) -> Self {
        self.alpha = alpha;
        self.eps = eps;
        self
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.h / self.intervals as f64
    }

    pub fn per_element(&self) -> usize {
        self.intervals - 1
    }

    /// Index of the centre point within an element's interior slice.
    pub fn centre_index(&self) -> usize {
        self.intervals / 2 - 1
    }

    /// Subgrid angles `θ = π(x − X_j)/H` of the interior points.
    pub fn thetas(&self) -> Vec<f64> {
        let n = self.intervals as f64;
        (1..self.intervals)
            .map(|p| std::f64::consts::PI * (2.0 * p as f64 / n - 1.0))
            .collect()
    }

    pub fn centre(&self, y: &[f64], e: usize) -> f64 {
        y[e * self.per_element() + self.centre_index()]
    }

    /// Edge values `(left, right)` of element `e` from the coupling.
    pub fn edges(&self, y: &[f64], e: usize) -> (f64, f64) {
        let m = self.m;
        let c = self.centre(y, e);
        let l = self.centre(y, (e + m - 1) % m);
        let r = self.centre(y, (e + 1) % m);
        let g = self.gamma;
        ((1.0 - g) * c + g * l, (1.0 - g) * c + g * r)
    }

    /// Initial state `U_e + amp · shape(θ)` in every element.
    pub fn initial(&self, base: &[f64], shape: impl Fn(f64) -> f64) -> Vec<f64> {
        let th = self.thetas();
        let mut y = Vec::with_capacity(self.m * self.per_element());
        for e in 0..self.m {
            let b = base[e % base.len()];
            y.extend(th.iter().map(|&t| b + shape(t)));
        }
        y
    }

    /// Max over all elements of `|u_j(x) − u_j(X_j)|`, including the edges.
    pub fn deviation(&self, y: &[f64]) -> f64 {
        let np = self.per_element();
        (0..self.m)
            .map(|e| {
                let c = self.centre(y, e);
                let (l, r) = self.edges(y, e);
                y[e * np..(e + 1) * np]
                    .iter()
                    .chain([l, r].iter())
                    .map(|v| (v - c).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

impl OdeSystem for ElementArray {
    fn dim(&self) -> usize {
        self.m * self.per_element()
    }
    /// Forcing at every interior point when `ε ≠ 0`.
    fn n_inputs(&self) -> usize {
        if self.eps != 0.0 {
            self.dim()
        } else {
            0
        }
    }
    fn rhs(&self, _t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]) {
        let np = self.per_element();
        let dx = self.dx();
        let inv = 1.0 / (dx * dx);
        for e in 0..self.m {
            let (l, r) = self.edges(y, e);
            let u = &y[e * np..(e + 1) * np];
            for p in 0..np {
                let um = if p == 0 { l } else { u[p - 1] };
                let up = if p + 1 == np { r } else { u[p + 1] };
                let f = if inputs.is_empty() { 0.0 } else { inputs[e * np + p] };
                dy[e * np + p] = inv * (up - 2.0 * u[p] + um)
                    - self.alpha * u[p] * (up - um) / (2.0 * dx)
                    + self.eps * f;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forcing::{SignalBank, SignalSpec};
    use crate::stepper::{integrate, step, FnSystem, Scheme, Stages, Workspace};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn run_unforced<S: OdeSystem>(sys: &S, y: &mut [f64], dt: f64, t_end: f64) {
        let mut ws = Workspace::new(y.len());
        let st = Stages::constant(Scheme::Rk4, vec![]);
        for i in 0..(t_end / dt).round() as usize {
            step(sys, Scheme::Rk4, i as f64 * dt, dt, y, &st, &mut ws);
        }
    }

    #[test]
    fn constants_are_equilibria() {
        for form in [Advection::Advective, Advection::Conservative, Advection::Fornberg] {
            let u = vec![1.7; 16];
            let mut du = vec![1.0; 16];
            burgers_rhs(&u, &[], 0.1, 0.9, 0.0, form, &mut du);
            assert!(du.iter().all(|&d| d.abs() < 1e-12));
        }
        let mut du = vec![1.0; 8];
        lattice_rhs(&[0.4; 8], &[3.0; 8], 0.5, 0.3, 0.0, &mut du);
        assert!(du.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn heat_eigenfunction_second_order() {
        let err = |n: usize| {
            let dx = 2.0 * PI / n as f64;
            let u: Vec<f64> = grid_points(n, dx).iter().map(|x| x.sin()).collect();
            let mut du = vec![0.0; n];
            burgers_rhs(&u, &[], dx, 0.0, 0.0, Advection::Advective, &mut du);
            u.iter().zip(&du).map(|(u, d)| (d + u).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(32), err(64));
        assert!(e1 < 1e-2);
        assert!((e1 / e2).log2() > 1.9);
    }

    #[test]
    fn advection_forms_are_consistent() {
        // all three approximate u u_x for smooth u at second order
        for form in [Advection::Advective, Advection::Conservative, Advection::Fornberg] {
            let err = |n: usize| {
                let dx = 2.0 * PI / n as f64;
                let x = grid_points(n, dx);
                let u: Vec<f64> = x.iter().map(|x| 1.0 + 0.5 * x.sin()).collect();
                let mut du = vec![0.0; n];
                // isolate −α u u_x by subtracting the diffusion-only response
                let mut d0 = vec![0.0; n];
                burgers_rhs(&u, &[], dx, 1.0, 0.0, form, &mut du);
                burgers_rhs(&u, &[], dx, 0.0, 0.0, form, &mut d0);
                (0..n)
                    .map(|i| {
                        let exact = (1.0 + 0.5 * x[i].sin()) * 0.5 * x[i].cos();
                        (d0[i] - du[i] - exact).abs()
                    })
                    .fold(0.0, f64::max)
            };
            let order = (err(32) / err(64)).log2();
            assert!(order > 1.9, "{form:?}: {order}");
        }
    }

    #[test]
    fn lattice_impulse() {
        let h = 0.5;
        let mut u = vec![0.0; 8];
        u[3] = 1.0;
        let mut du = vec![0.0; 8];
        lattice_rhs(&u, &[], h, 0.0, 0.0, &mut du);
        let s = 4.0 / (h * h);
        assert_eq!(&du[2..5], &[s, -2.0 * s, s]);
        assert!(du[..2].iter().chain(&du[5..]).all(|&d| d == 0.0));
    }

    #[test]
    fn lattice_element_eigenmodes() {
        // one decoupled element: interior (2j−1, 2j, 2j+1), edges tied to centre
        let h = 0.7;
        let arr = ElementArray::lattice(1, h, 0.0).unwrap();
        // f1 = (0, −1, 0, 1, 0): interior (−1, 0, 1)
        let f1 = [-1.0, 0.0, 1.0];
        let mut d = [0.0; 3];
        arr.rhs(0.0, &f1, &[], &mut d);
        for p in 0..3 {
            assert_abs_diff_eq!(d[p], -8.0 / (h * h) * f1[p], epsilon = 1e-12);
        }
        // f2 = (1, −1, 1, −1, 1); the edges follow the centre
        let f2 = [-1.0, 1.0, -1.0];
        arr.rhs(0.0, &f2, &[], &mut d);
        for p in 0..3 {
            assert_abs_diff_eq!(d[p], -16.0 / (h * h) * f2[p], epsilon = 1e-12);
        }
    }

    #[test]
    fn coupling_at_full_strength_reproduces_neighbour_centres() {
        let arr = ElementArray::new(3, 1.0, 8, 1.0).unwrap();
        let y = arr.initial(&[1.0, 2.0, 3.0], |_| 0.0);
        assert_eq!(arr.edges(&y, 0), (3.0, 2.0));
        assert_eq!(arr.edges(&y, 1), (1.0, 3.0));
        let half = ElementArray { gamma: 0.5, ..arr };
        assert_eq!(half.edges(&y, 1), (1.5, 2.5));
    }

    #[test]
    fn mean_invariant_and_energy_decays_without_advection() {
        let sys = BurgersSystem::new(2.0 * PI, 32, 0.0, 0.0).unwrap().unforced();
        let mut u: Vec<f64> = sys.points().iter().map(|x| 1.0 + x.sin() + 0.3 * (3.0 * x).cos()).collect();
        let mean0: f64 = u.iter().sum::<f64>() / 32.0;
        let mut ws = Workspace::new(32);
        let st = Stages::constant(Scheme::Rk4, vec![]);
        let mut energy = f64::INFINITY;
        for i in 0..200 {
            step(&sys, Scheme::Rk4, i as f64 * 0.01, 0.01, &mut u, &st, &mut ws);
            let mean: f64 = u.iter().sum::<f64>() / 32.0;
            assert!((mean - mean0).abs() < 1e-13);
            let e: f64 = u.iter().map(|v| (v - mean).powi(2)).sum();
            assert!(e <= energy);
            energy = e;
        }
    }

    #[test]
    fn decays_to_mean_at_slowest_rate() {
        let sys = BurgersSystem::new(2.0 * PI, 32, 0.0, 0.0).unwrap().unforced();
        let mut u: Vec<f64> = sys.points().iter().map(|x| 2.0 + x.cos() + (2.0 * x).sin()).collect();
        let dev = |u: &[f64]| u.iter().map(|v| (v - 2.0).abs()).fold(0.0, f64::max);
        run_unforced(&sys, &mut u, 0.01, 2.0);
        let d1 = dev(&u);
        run_unforced(&sys, &mut u, 0.01, 2.0);
        let d2 = dev(&u);
        let rate = (d1 / d2).ln() / 2.0;
        assert!((rate - 1.0).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn grid_refinement_second_order() {
        // smooth deterministic forcing so the field is grid independent
        let solve = |n: usize| {
            let sys = BurgersSystem::new(2.0 * PI, n, 0.3, 0.5).unwrap();
            let x = sys.points();
            let mut u: Vec<f64> = x.iter().map(|x| 1.0 + 0.5 * x.sin()).collect();
            let mut ws = Workspace::new(n);
            let dt = 1e-3;
            for i in 0..1000 {
                let t = i as f64 * dt;
                let st = Stages::sampled(Scheme::Rk4, t, dt, |s| x.iter().map(|x| x.cos() * s.cos()).collect());
                step(&sys, Scheme::Rk4, t, dt, &mut u, &st, &mut ws);
            }
            u
        };
        let (a, b, c) = (solve(16), solve(32), solve(64));
        let e1 = (0..16).map(|i| (a[i] - b[2 * i]).abs()).fold(0.0, f64::max);
        let e2 = (0..16).map(|i| (b[2 * i] - c[4 * i]).abs()).fold(0.0, f64::max);
        assert!((e1 / e2).log2() >= 1.8, "order {}", (e1 / e2).log2());
    }

    #[test]
    fn ornstein_uhlenbeck_ensemble() {
        let sys = FnSystem {
            dim: 1,
            n_inputs: 1,
            f: |_t: f64, y: &[f64], w: &[f64], dy: &mut [f64]| dy[0] = -y[0] + w[0],
        };
        let (dt, n_steps, paths) = (0.005, 200, 10_000);
        let mut finals = Vec::with_capacity(paths);
        for p in 0..paths {
            let mut bank = SignalBank::direct(&[SignalSpec::white_noise(1.0, 1000 + p as u64)]).unwrap();
            let mut y = [0.0];
            integrate(&sys, Scheme::EulerMaruyama, &mut bank, &mut y, 0.0, dt, n_steps, "ou", |_, _, _| Ok(()))
                .unwrap();
            finals.push(y[0]);
        }
        let n = paths as f64;
        let mean = finals.iter().sum::<f64>() / n;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let exact = 0.5 * (1.0 - (-2.0f64).exp());
        let se = exact * (2.0 / (n - 1.0)).sqrt();
        assert!((var - exact).abs() < 3.0 * se, "var {var} vs {exact} (se {se})");

        // fixed seed reproduces the path exactly
        let path = |seed| {
            let mut bank = SignalBank::direct(&[SignalSpec::white_noise(1.0, seed)]).unwrap();
            let mut y = [0.0];
            integrate(&sys, Scheme::EulerMaruyama, &mut bank, &mut y, 0.0, dt, 50, "ou", |_, _, _| Ok(())).unwrap();
            y[0]
        };
        assert_eq!(path(5), path(5));
    }

    #[test]
    fn integrate_reports_blow_up() {
        let sys = BurgersSystem::new(2.0 * PI, 16, 0.0, 0.0).unwrap().unforced();
        let mut u: Vec<f64> = sys.points().iter().map(|x| (4.0 * x).sin()).collect();
        let mut bank = SignalBank::direct(&[]).unwrap();
        // far beyond the explicit stability limit
        let r = integrate(&sys, Scheme::Euler, &mut bank, &mut u, 0.0, 1.0, 2000, "fine grid", |_, _, _| Ok(()));
        assert!(matches!(r, Err(crate::Error::Unstable { .. })));
    }

    #[test]
    fn spacing_must_divide_domain() {
        assert!(BurgersSystem::with_spacing(2.0 * PI, PI / 16.0, 0.3, 0.05).is_ok());
        assert_eq!(BurgersSystem::with_spacing(2.0 * PI, PI / 16.0, 0.3, 0.05).unwrap().n, 32);
        assert!(BurgersSystem::with_spacing(2.0 * PI, 0.3, 0.3, 0.05).is_err());
    }
}
