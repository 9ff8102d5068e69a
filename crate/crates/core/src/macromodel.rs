//! Macroscale discrete models for the grid values `U_j(t)`: the low-order
//! holistic model, the coarse lattice model, the single-correlated-forcing
//! strong model with its slow-manifold field, and the general strong model
//! with three forcing modes.
//!
//! Continuum models read per-element forcing modes laid out element-major,
//! `modes[e * K + k] = φ_{e,k}`, where element `e` is the `(e + 1)`th grid
//! point. Strong models carry a bank of convolution chains appended to the
//! state after the `m` grid values.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::convolution::ChainBank;
use crate::error::{config, Error, Result};
use crate::forcing::{ElementGeometry, SignalBank};
use crate::stepper::{integrate_with, OdeSystem, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Lowg,
    #[serde(alias = "lattice")]
    LatticeCoarse,
    Ssm1,
    Strongquad,
    WeakSsm1,
    WeakStrongquad,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Lowg,
        Variant::LatticeCoarse,
        Variant::Ssm1,
        Variant::Strongquad,
        Variant::WeakSsm1,
        Variant::WeakStrongquad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lowg => "lowg",
            Variant::LatticeCoarse => "lattice-coarse",
            Variant::Ssm1 => "ssm1",
            Variant::Strongquad => "strongquad",
            Variant::WeakSsm1 => "weak-ssm1",
            Variant::WeakStrongquad => "weak-strongquad",
        }
    }

    pub fn is_weak(self) -> bool {
        matches!(self, Variant::WeakSsm1 | Variant::WeakStrongquad)
    }

    /// The strong model a weak variant is reduced from.
    pub fn strong_base(self) -> Variant {
        match self {
            Variant::WeakSsm1 => Variant::Ssm1,
            Variant::WeakStrongquad => Variant::Strongquad,
            v => v,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lattice" => Ok(Variant::LatticeCoarse),
            _ => Variant::ALL
                .into_iter()
                .find(|v| v.name() == s)
                .ok_or_else(|| Error::Config(format!("unknown model `{s}`"))),
        }
    }
}

fn default_gamma() -> f64 {
    1.0
}
fn default_modes() -> usize {
    3
}
fn default_dt() -> f64 {
    1e-3
}
fn default_psi1() -> [f64; 3] {
    [-0.5, 0.0, 0.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub eps: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub h: f64,
    pub m: usize,
    /// Forcing modes per element.
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    /// Weights of `(φ_{2j−1}, φ_{2j}, φ_{2j+1})` in the lattice model's
    /// mode-1 restriction `ψ_{j1}`.
    #[serde(default = "default_psi1")]
    pub psi1: [f64; 3],
}

impl ModelConfig {
    pub fn new(variant: Variant, alpha: f64, eps: f64, h: f64, m: usize) -> Self {
        ModelConfig {
            variant,
            alpha,
            eps,
            gamma: 1.0,
            h,
            m,
            modes: 3,
            scheme: Scheme::Rk4,
            dt: default_dt(),
            seed: 0,
            psi1: default_psi1(),
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return config(format!("H must be positive, got {}", self.h));
        }
        if self.m < 3 {
            return config(format!("need m >= 3 elements, got {}", self.m));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return config(format!("coupling gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.dt > 0.0) {
            return config(format!("time step must be positive, got {}", self.dt));
        }
        for (name, v) in [("alpha", self.alpha), ("eps", self.eps)] {
            if !v.is_finite() {
                return config(format!("{name} must be finite"));
            }
        }
        let k = self.modes;
        match self.variant.strong_base() {
            Variant::Lowg | Variant::Strongquad if k != 3 => {
                config(format!("{} needs exactly 3 forcing modes, got {k}", self.variant.name()))
            }
            Variant::Ssm1 if k < 2 => config(format!("ssm1 needs at least 2 forcing modes, got {k}")),
            _ => Ok(()),
        }
    }

    pub fn geometry(&self) -> Result<ElementGeometry> {
        ElementGeometry::new(self.m, self.h)
    }

    /// Decay rate `β_k = π²k²/H²` of subgrid mode `k`.
    pub fn beta(&self, k: usize) -> f64 {
        continuum_rate(k, self.h)
    }

    /// Number of forcing inputs the model reads (before any extra noises).
    pub fn forcing_inputs(&self) -> usize {
        match self.variant {
            Variant::LatticeCoarse => 2 * self.m,
            _ => self.m * self.modes,
        }
    }
}

pub fn continuum_rate(k: usize, h: f64) -> f64 {
    let k = k as f64;
    PI * PI * k * k / (h * h)
}

/// Stencil applied across the element index before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StencilOp {
    Id,
    Delta2,
    MuDelta,
    Delta4,
}

impl StencilOp {
    pub fn weights(self) -> &'static [(isize, f64)] {
        match self {
            StencilOp::Id => &[(0, 1.0)],
            StencilOp::Delta2 => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
            StencilOp::MuDelta => &[(-1, -0.5), (1, 0.5)],
            StencilOp::Delta4 => &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
        }
    }

    /// Eigenvalue on the alternating sequence `(−1)^j`.
    pub fn alternating_factor(self) -> f64 {
        match self {
            StencilOp::Id => 1.0,
            StencilOp::Delta2 => -4.0,
            StencilOp::MuDelta => 0.0,
            StencilOp::Delta4 => 16.0,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            StencilOp::Id => "",
            StencilOp::Delta2 => "δ²",
            StencilOp::MuDelta => "μδ",
            StencilOp::Delta4 => "δ⁴",
        }
    }
}

#[inline]
fn wrap(e: usize, off: isize, m: usize) -> usize {
    (e as isize + off).rem_euclid(m as isize) as usize
}

/// `op φ_{·,mode}` evaluated at an element.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModeExpr {
    pub op: StencilOp,
    pub mode: usize,
}

impl ModeExpr {
    pub const fn new(op: StencilOp, mode: usize) -> Self {
        ModeExpr { op, mode }
    }

    pub fn eval(&self, modes: &[f64], k: usize, m: usize, e: usize) -> f64 {
        self.op
            .weights()
            .iter()
            .map(|&(off, w)| w * modes[wrap(e, off, m) * k + self.mode])
            .sum()
    }

    /// `(input index, weight)` pairs making up this expression at `e`.
    pub fn input_weights(&self, k: usize, m: usize, e: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for &(off, w) in self.op.weights() {
            let i = wrap(e, off, m) * k + self.mode;
            match out.iter_mut().find(|(j, _)| *j == i) {
                Some(p) => p.1 += w,
                None => out.push((i, w)),
            }
        }
        out
    }
}

impl fmt::Display for ModeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}φ{}", self.op.symbol(), self.mode)
    }
}

const fn me(op: StencilOp, mode: usize) -> ModeExpr {
    ModeExpr::new(op, mode)
}

/// Grid-value factor multiplying a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UFactor {
    One,
    U,
    U2,
    U3,
    MuDeltaU,
    Delta2U,
}

impl UFactor {
    #[inline]
    pub fn eval(self, u: &[f64], e: usize) -> f64 {
        let m = u.len();
        match self {
            UFactor::One => 1.0,
            UFactor::U => u[e],
            UFactor::U2 => u[e] * u[e],
            UFactor::U3 => u[e] * u[e] * u[e],
            UFactor::MuDeltaU => 0.5 * (u[wrap(e, 1, m)] - u[wrap(e, -1, m)]),
            UFactor::Delta2U => u[wrap(e, 1, m)] - 2.0 * u[e] + u[wrap(e, -1, m)],
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            UFactor::One => "1",
            UFactor::U => "U",
            UFactor::U2 => "U²",
            UFactor::U3 => "U³",
            UFactor::MuDeltaU => "μδU",
            UFactor::Delta2U => "δ²U",
        }
    }
}

/// `c · ε^eps · α^alpha · γ^gamma · H^h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coeff {
    pub c: f64,
    pub eps: u8,
    pub alpha: u8,
    pub gamma: u8,
    pub h: i8,
}

impl Coeff {
    pub const fn new(c: f64, eps: u8, alpha: u8, gamma: u8, h: i8) -> Self {
        Coeff { c, eps, alpha, gamma, h }
    }

    pub fn eval(&self, cfg: &ModelConfig) -> f64 {
        self.c
            * cfg.eps.powi(self.eps as i32)
            * cfg.alpha.powi(self.alpha as i32)
            * cfg.gamma.powi(self.gamma as i32)
            * cfg.h.powi(self.h as i32)
    }

    pub fn orders(&self) -> (u8, u8, u8) {
        (self.eps, self.alpha, self.gamma)
    }
}

impl fmt::Display for Coeff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.c)?;
        for (s, p) in [("ε", self.eps as i32), ("α", self.alpha as i32), ("γ", self.gamma as i32), ("H", self.h as i32)] {
            match p {
                0 => {}
                1 => write!(f, " {s}")?,
                p => write!(f, " {s}^{p}")?,
            }
        }
        Ok(())
    }
}

/// `coeff · u(U) · φ-expression`, or `coeff · u(U)` when `phi` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearTerm {
    pub coeff: Coeff,
    pub u: UFactor,
    pub phi: Option<ModeExpr>,
}

impl fmt::Display for LinearTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} · {}", self.coeff, self.u.symbol())?;
        if let Some(p) = self.phi {
            write!(f, " · {p}")?;
        }
        Ok(())
    }
}

/// `coeff · u(U) · left · Z_{rates} right`; rates are subgrid mode numbers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadTerm {
    pub coeff: Coeff,
    pub u: UFactor,
    pub left: ModeExpr,
    pub rates: Vec<usize>,
    pub right: ModeExpr,
}

impl QuadTerm {
    pub fn betas(&self, h: f64) -> Vec<f64> {
        self.rates.iter().map(|&k| continuum_rate(k, h)).collect()
    }
}

impl fmt::Display for QuadTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r: Vec<String> = self.rates.iter().map(|k| k.to_string()).collect();
        write!(
            f,
            "{} · {} · {} Z{} {}",
            self.coeff,
            self.u.symbol(),
            self.left,
            r.join(","),
            self.right
        )
    }
}

/// Forcing-dependent terms of a model, before numeric resolution.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TermTable {
    pub linear: Vec<LinearTerm>,
    pub quad: Vec<QuadTerm>,
}

fn lin(c: f64, eps: u8, alpha: u8, gamma: u8, h: i8, u: UFactor, phi: Option<ModeExpr>) -> LinearTerm {
    LinearTerm {
        coeff: Coeff::new(c, eps, alpha, gamma, h),
        u,
        phi,
    }
}

fn quad(c: Coeff, u: UFactor, left: ModeExpr, rates: &[usize], right: ModeExpr) -> QuadTerm {
    QuadTerm {
        coeff: c,
        u,
        left,
        rates: rates.to_vec(),
        right,
    }
}

use StencilOp::{Delta2 as D2, Delta4 as D4, Id, MuDelta as MD};

/// Forcing terms of the low-order holistic model.
pub fn lowg_terms() -> TermTable {
    let pi2 = PI * PI;
    TermTable {
        linear: vec![
            lin(1.0, 1, 0, 0, 0, UFactor::One, Some(me(Id, 0))),
            lin(-2.0 / pi2, 1, 1, 0, 1, UFactor::U, Some(me(Id, 1))),
            lin(-8.0 / (3.0 * pi2 * pi2), 1, 2, 0, 2, UFactor::U2, Some(me(Id, 2))),
            lin(0.01643, 2, 2, 0, 2, UFactor::U, None),
        ],
        quad: Vec::new(),
    }
}

/// Forcing terms of the single-correlated-forcing strong model, written on
/// the per-element mode `φ_{j,1} = (−1)^j φ` so that the alternating sign
/// is carried by the input itself.
pub fn ssm1_terms() -> TermTable {
    let pi2 = PI * PI;
    let p1 = Some(me(Id, 1));
    let z = |c: f64| Coeff::new(c, 2, 2, 0, 0);
    TermTable {
        linear: vec![
            lin(-2.0 / pi2, 1, 1, 0, 1, UFactor::U, p1),
            lin(-0.1028, 1, 1, 1, 1, UFactor::U, p1),
            lin(-0.0716, 1, 1, 1, 1, UFactor::Delta2U, p1),
            lin(0.00363, 1, 3, 0, 3, UFactor::U3, p1),
        ],
        quad: vec![
            quad(z(-8.0 / (15.0 * pi2)), UFactor::U, me(Id, 1), &[2, 1], me(Id, 1)),
            quad(z(-8.0 / (255.0 * pi2)), UFactor::U, me(Id, 1), &[4, 1], me(Id, 1)),
            quad(z(-8.0 / (1295.0 * pi2)), UFactor::U, me(Id, 1), &[6, 1], me(Id, 1)),
            quad(Coeff::new(0.0195, 2, 2, 0, 2), UFactor::U, me(Id, 1), &[1], me(Id, 1)),
        ],
    }
}

/// Forcing terms of the general strong model with modes `φ_{j,0..2}`.
pub fn strongquad_terms() -> TermTable {
    let pi2 = PI * PI;
    let pi4 = pi2 * pi2;
    let s = |op, k| Some(me(op, k));
    // αγH/π² prefactor of the γ-coupled ε-linear bracket
    let ag = |c: f64| c / pi2;
    let linear = vec![
        lin(1.0, 1, 0, 0, 0, UFactor::One, s(Id, 0)),
        lin(-1.0 / 24.0, 1, 0, 1, 0, UFactor::One, s(D2, 0)),
        lin(3.0 / 640.0 + 1.0 / (8.0 * pi4), 1, 0, 2, 0, UFactor::One, s(D4, 0)),
        lin(1.0 / (4.0 * pi2), 1, 0, 1, 0, UFactor::One, s(D2, 2)),
        lin(-(1.0 / (48.0 * pi2) + 1.0 / (16.0 * pi4)), 1, 0, 2, 0, UFactor::One, s(D4, 2)),
        lin(-2.0 / pi2, 1, 1, 0, 1, UFactor::U, s(Id, 1)),
        lin(ag(8.0 / pi2), 1, 1, 1, 1, UFactor::U, s(MD, 0)),
        lin(ag(-0.25), 1, 1, 1, 1, UFactor::U, s(MD, 2)),
        lin(ag(1.0 / 12.0 + 5.0 / (3.0 * pi2)), 1, 1, 1, 1, UFactor::U, s(D2, 1)),
        lin(ag(0.25), 1, 1, 1, 1, UFactor::MuDeltaU, s(Id, 2)),
        lin(ag(1.0 / 6.0 + 10.0 / (3.0 * pi2)), 1, 1, 1, 1, UFactor::MuDeltaU, s(MD, 1)),
        lin(ag(-(1.0 / 6.0 + 1.0 / (3.0 * pi2))), 1, 1, 1, 1, UFactor::Delta2U, s(Id, 1)),
        lin(ag(1.0 / 24.0 + 5.0 / (6.0 * pi2)), 1, 1, 1, 1, UFactor::Delta2U, s(D2, 1)),
        lin(-8.0 / (3.0 * pi4), 1, 2, 0, 2, UFactor::U2, s(Id, 0)),
    ];

    let g1 = |c: f64| Coeff::new(c / pi2, 2, 1, 0, 1);
    let g2 = |c: f64| Coeff::new(c / pi2, 2, 1, 1, -1);
    let g3 = |c: f64| Coeff::new(c / pi2, 2, 1, 1, 1);
    let g4 = |c: f64| Coeff::new(c / pi2, 2, 2, 0, 0);
    let g4h = |c: f64| Coeff::new(c / pi4, 2, 2, 0, 2);
    let one = UFactor::One;
    let u = UFactor::U;
    let q = |c, uf, l: (StencilOp, usize), r: &[usize], rt: (StencilOp, usize)| {
        quad(c, uf, me(l.0, l.1), r, me(rt.0, rt.1))
    };
    let quad = vec![
        // αH/π²
        q(g1(-2.0), one, (Id, 0), &[1], (Id, 1)),
        q(g1(0.4), one, (Id, 1), &[2], (Id, 2)),
        q(g1(0.4), one, (Id, 2), &[1], (Id, 1)),
        // αγ/(Hπ²)
        q(g2(-32.0), one, (Id, 0), &[1, 2], (MD, 2)),
        q(g2(-0.8), one, (Id, 1), &[2, 2], (D2, 2)),
        q(g2(32.0 / 5.0), one, (Id, 2), &[1, 2], (MD, 2)),
        // αγH/π²
        q(g3(8.0 / pi2), one, (Id, 0), &[1], (MD, 0)),
        q(g3(8.0 / pi2), one, (Id, 0), &[1], (MD, 2)),
        q(g3(1.0 / 12.0 + 5.0 / (3.0 * pi2)), one, (Id, 0), &[1], (D2, 1)),
        q(g3(-(0.25 + 8.0 / pi2)), one, (Id, 0), &[2], (MD, 2)),
        q(g3(0.2), one, (Id, 1), &[2], (D2, 0)),
        q(g3(-(1.0 / 20.0 + 13.0 / (150.0 * pi2))), one, (Id, 1), &[2], (Id, 2)),
        q(g3(-8.0 / (5.0 * pi2)), one, (Id, 2), &[1], (MD, 0)),
        q(g3(-8.0 / (5.0 * pi2)), one, (Id, 2), &[1], (MD, 2)),
        q(g3(-(1.0 / 60.0 + 17.0 / (75.0 * pi2))), one, (Id, 2), &[1], (D2, 1)),
        q(g3(0.125 + 4.0 / (5.0 * pi2)), one, (Id, 2), &[2], (MD, 2)),
        q(g3(-(1.0 / 12.0 + 2.0 / (15.0 * pi2))), one, (D2, 0), &[1], (Id, 1)),
        q(g3(1.0 / 24.0 + 5.0 / (6.0 * pi2)), one, (D2, 0), &[1], (D2, 1)),
        q(g3(-(1.0 / 60.0 + 17.0 / (75.0 * pi2))), one, (D2, 1), &[2], (Id, 2)),
        q(g3(-(1.0 / 120.0 + 17.0 / (150.0 * pi2))), one, (D2, 1), &[2], (D2, 2)),
        q(g3(-(1.0 / 20.0 + 44.0 / (75.0 * pi2))), one, (D2, 2), &[1], (Id, 1)),
        q(g3(-(1.0 / 120.0 + 17.0 / (150.0 * pi2))), one, (D2, 2), &[1], (D2, 1)),
        q(g3(1.0 / 6.0 + 10.0 / (3.0 * pi2)), one, (MD, 0), &[1], (MD, 1)),
        q(g3(0.25 - 8.0 / (5.0 * pi2)), one, (MD, 0), &[2], (Id, 2)),
        q(g3(-(1.0 / 30.0 + 34.0 / (75.0 * pi2))), one, (MD, 1), &[2], (MD, 2)),
        q(g3(-(1.0 / 30.0 + 34.0 / (75.0 * pi2))), one, (MD, 2), &[1], (MD, 1)),
        q(g3(0.125 - 4.0 / (5.0 * pi2)), one, (MD, 2), &[2], (Id, 2)),
        // α²U/π²
        q(g4(-32.0 / 3.0), u, (Id, 0), &[1, 2], (Id, 2)),
        q(g4h(-16.0 / 3.0), u, (Id, 0), &[2], (Id, 2)),
        q(g4(-8.0 / 15.0), u, (Id, 1), &[2, 1], (Id, 1)),
        q(g4h(32.0 / 15.0), u, (Id, 1), &[1], (Id, 1)),
        q(g4(32.0 / 15.0), u, (Id, 2), &[1, 2], (Id, 2)),
        q(g4h(16.0 / 15.0), u, (Id, 2), &[2], (Id, 2)),
    ];
    TermTable { linear, quad }
}

/// Forcing terms of a variant's strong form.
pub fn term_table(variant: Variant) -> TermTable {
    match variant.strong_base() {
        Variant::Lowg => lowg_terms(),
        Variant::Ssm1 => ssm1_terms(),
        Variant::Strongquad => strongquad_terms(),
        _ => TermTable::default(),
    }
}

/// Key of a specialised coefficient: `(ε, α, γ, H powers, U factor, sorted
/// rates)`; empty rates for linear terms.
pub type SpecialKey = (u8, u8, u8, i8, UFactor, Vec<usize>);

/// Substitute `φ_{j,0} = φ_{j,2} = 0`, `φ_{j,1} = (−1)^j φ` and collect the
/// coefficients. Linear coefficients multiply `φ_{j,1}`; quadratic ones
/// multiply `φ Z φ`.
pub fn specialize_alternating(table: &TermTable) -> Vec<(SpecialKey, f64)> {
    let mut out: Vec<(SpecialKey, f64)> = Vec::new();
    let mut push = |key: SpecialKey, v: f64| {
        if v == 0.0 {
            return;
        }
        match out.iter_mut().find(|(k, _)| *k == key) {
            Some(p) => p.1 += v,
            None => out.push((key, v)),
        }
    };
    for t in &table.linear {
        if let Some(p) = t.phi {
            if p.mode == 1 {
                let c = t.coeff;
                push((c.eps, c.alpha, c.gamma, c.h, t.u, vec![]), c.c * p.op.alternating_factor());
            }
        }
    }
    for t in &table.quad {
        if t.left.mode == 1 && t.right.mode == 1 {
            let c = t.coeff;
            let mut r = t.rates.clone();
            r.sort_unstable();
            let f = t.left.op.alternating_factor() * t.right.op.alternating_factor();
            push((c.eps, c.alpha, c.gamma, c.h, t.u, r), c.c * f);
        }
    }
    out
}

/// Deterministic (forcing-free) part of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetKind {
    /// `(1/H²)(1 + α²H²U²/12)δ²U − (α/2H)U(U₊ − U₋)`.
    Lowg,
    /// `δ²U/H² − (α/2H)U(U₊ − U₋)` with lattice restriction forcing.
    LatticeCoarse,
    /// `γδ²U/H² − γ²δ⁴U/(12H²) − αγUμδU/H + α²γU²δ²U/12`.
    Ssm1,
    /// As [`DetKind::Ssm1`] without the `α²` term.
    Strongquad,
}

impl DetKind {
    pub fn of(variant: Variant) -> Self {
        match variant.strong_base() {
            Variant::Lowg => DetKind::Lowg,
            Variant::LatticeCoarse => DetKind::LatticeCoarse,
            Variant::Ssm1 => DetKind::Ssm1,
            _ => DetKind::Strongquad,
        }
    }

    /// Right-hand side at element `e` with no forcing.
    pub fn eval(self, u: &[f64], e: usize, alpha: f64, gamma: f64, h: f64) -> f64 {
        let m = u.len();
        let (um, uc, up) = (u[wrap(e, -1, m)], u[e], u[wrap(e, 1, m)]);
        let d2 = up - 2.0 * uc + um;
        let md = 0.5 * (up - um);
        let h2 = h * h;
        match self {
            DetKind::Lowg => d2 / h2 + alpha * alpha * uc * uc * d2 / 12.0 - alpha * uc * md / h,
            DetKind::LatticeCoarse => d2 / h2 - alpha * uc * md / h,
            DetKind::Ssm1 | DetKind::Strongquad => {
                let d4 = u[wrap(e, 2, m)] - 4.0 * up + 6.0 * uc - 4.0 * um + u[wrap(e, -2, m)];
                let base = gamma * d2 / h2 - gamma * gamma * d4 / (12.0 * h2) - alpha * gamma * uc * md / h;
                if self == DetKind::Ssm1 {
                    base + alpha * alpha * gamma * uc * uc * d2 / 12.0
                } else {
                    base
                }
            }
        }
    }
}

/// What multiplies a resolved linear term.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    One,
    Mode(ModeExpr),
    /// Extra input (after the forcing modes) used at each element.
    Input(Vec<usize>),
}

/// A forcing term with its numeric coefficient per element.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementTerm {
    pub label: String,
    pub coeff: Vec<f64>,
    pub u: UFactor,
    pub source: Source,
}

#[derive(Debug, Clone)]
struct ResolvedQuad {
    label: String,
    c: f64,
    u: UFactor,
    left: ModeExpr,
    chain: Vec<usize>,
}

/// A macroscale model ready to integrate. State is `[U_1..U_m, chains...]`.
#[derive(Debug, Clone)]
pub struct MacroModel {
    cfg: ModelConfig,
    det: DetKind,
    terms: Vec<ElementTerm>,
    quad: Vec<ResolvedQuad>,
    bank: ChainBank,
    chain_inputs: Vec<(usize, ModeExpr)>,
    chain_labels: Vec<String>,
    n_extra: usize,
}

impl MacroModel {
    /// Strong (or low-order) model straight from the term tables.
    pub fn strong(cfg: &ModelConfig) -> Result<Self> {
        if cfg.variant.is_weak() {
            return config(format!(
                "{} needs the forcing signals; build it with the weak-model reducer",
                cfg.variant.name()
            ));
        }
        let table = term_table(cfg.variant);
        let terms = table
            .linear
            .iter()
            .map(|t| ElementTerm {
                label: t.to_string(),
                coeff: vec![t.coeff.eval(cfg); cfg.m],
                u: t.u,
                source: t.phi.map_or(Source::One, Source::Mode),
            })
            .collect();
        Self::from_parts(cfg, DetKind::of(cfg.variant), terms, &table.quad, 0)
    }

    /// Assemble a model from resolved linear terms and quadratic convolution
    /// terms. `n_extra` inputs follow the forcing modes.
    pub fn from_parts(
        cfg: &ModelConfig,
        det: DetKind,
        terms: Vec<ElementTerm>,
        quad: &[QuadTerm],
        n_extra: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.m;
        for t in &terms {
            if t.coeff.len() != m {
                return config(format!("term `{}` has {} coefficients for {m} elements", t.label, t.coeff.len()));
            }
            if let Source::Mode(p) = t.source {
                if p.mode >= cfg.modes {
                    return config(format!("term `{}` reads mode {} of {}", t.label, p.mode, cfg.modes));
                }
            }
            if let Source::Input(ix) = &t.source {
                if ix.len() != m || ix.iter().any(|&i| i >= n_extra) {
                    return config(format!("term `{}` has bad extra-input indices", t.label));
                }
            }
        }
        let mut model = MacroModel {
            cfg: cfg.clone(),
            det,
            terms,
            quad: Vec::new(),
            bank: ChainBank::new(),
            chain_inputs: Vec::new(),
            chain_labels: Vec::new(),
            n_extra,
        };
        for q in quad {
            if q.left.mode >= cfg.modes || q.right.mode >= cfg.modes {
                return config(format!("term `{q}` reads a mode beyond {}", cfg.modes));
            }
            let c = q.coeff.eval(cfg);
            if c == 0.0 {
                continue;
            }
            let betas = q.betas(cfg.h);
            let mut chain = Vec::with_capacity(m);
            for e in 0..m {
                let inp = match model.chain_inputs.iter().position(|&(ee, x)| ee == e && x == q.right) {
                    Some(i) => i,
                    None => {
                        model.chain_inputs.push((e, q.right));
                        model.chain_inputs.len() - 1
                    }
                };
                let before = model.bank.len();
                let idx = model.bank.add(inp, betas.clone())?;
                if model.bank.len() > before {
                    let r: Vec<String> = q.rates.iter().map(|k| k.to_string()).collect();
                    model.chain_labels.push(format!("Z{} {} at element {}", r.join(","), q.right, e + 1));
                }
                chain.push(idx);
            }
            model.quad.push(ResolvedQuad {
                label: q.to_string(),
                c,
                u: q.u,
                left: q.left,
                chain,
            });
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn m(&self) -> usize {
        self.cfg.m
    }

    pub fn bank(&self) -> &ChainBank {
        &self.bank
    }

    pub fn terms(&self) -> &[ElementTerm] {
        &self.terms
    }

    pub fn n_quadratic(&self) -> usize {
        self.quad.len()
    }

    pub fn quadratic_labels(&self) -> impl Iterator<Item = &str> {
        self.quad.iter().map(|q| q.label.as_str())
    }

    pub fn n_forcing_inputs(&self) -> usize {
        self.cfg.forcing_inputs()
    }

    pub fn n_extra_inputs(&self) -> usize {
        self.n_extra
    }

    /// State with the given grid values and every chain at rest.
    pub fn initial_state(&self, u0: &[f64]) -> Result<Vec<f64>> {
        if u0.len() != self.cfg.m {
            return config(format!("expected {} grid values, got {}", self.cfg.m, u0.len()));
        }
        let mut y = u0.to_vec();
        y.resize(self.dim(), 0.0);
        Ok(y)
    }

    /// Strong models need `dt · max β ≤ 0.2` to resolve their fastest chain.
    pub fn check_time_step(&self, dt: f64) -> Result<()> {
        let b = self.bank.max_rate();
        if dt * b > 0.2 {
            return config(format!(
                "time step {dt} too large for the fastest convolution rate {b:.3}: need dt <= {:.3e}",
                0.2 / b
            ));
        }
        Ok(())
    }

    /// Human-readable name of state component `k`.
    pub fn describe_component(&self, k: usize) -> String {
        let m = self.cfg.m;
        if k < m {
            return format!("{} grid value U_{}", self.cfg.variant.name(), k + 1);
        }
        let mut off = m;
        for i in 0..self.bank.len() {
            let n = self.bank.chain(i).1.len();
            if k < off + n {
                return format!("{} chain {} (stage {})", self.cfg.variant.name(), self.chain_labels[i], k - off + 1);
            }
            off += n;
        }
        format!("{} state component {k}", self.cfg.variant.name())
    }

    /// Integrate `n_steps` with forcing from `bank`, after checking the step.
    pub fn run(
        &self,
        forcing: &mut SignalBank,
        y: &mut [f64],
        t0: f64,
        dt: f64,
        n_steps: usize,
        observe: impl FnMut(usize, f64, &[f64]) -> Result<()>,
    ) -> Result<()> {
        self.check_time_step(dt)?;
        self.cfg.scheme.check_white_noise(forcing.has_white_noise())?;
        integrate_with(
            self,
            self.cfg.scheme,
            forcing,
            y,
            t0,
            dt,
            n_steps,
            self.cfg.variant.name(),
            &|k| self.describe_component(k),
            observe,
        )
    }

    /// Contribution of the quadratic convolution terms to each `dU_j/dt`.
    pub fn quadratic_part(&self, y: &[f64], inputs: &[f64]) -> Vec<f64> {
        let m = self.cfg.m;
        let k = self.cfg.modes;
        let (u, z) = y.split_at(m);
        (0..m)
            .map(|e| {
                self.quad
                    .iter()
                    .map(|q| q.c * q.u.eval(u, e) * q.left.eval(inputs, k, m, e) * self.bank.output(z, q.chain[e]))
                    .sum()
            })
            .collect()
    }

    fn lattice_forcing(&self, u: &[f64], e: usize, fine: &[f64]) -> f64 {
        let n = fine.len();
        let i = 2 * e;
        let (a, b, c) = (fine[(i + n - 1) % n], fine[i], fine[(i + 1) % n]);
        let psi0 = 0.25 * a + 0.5 * b + 0.25 * c;
        let w = self.cfg.psi1;
        let psi1 = w[0] * a + w[1] * b + w[2] * c;
        self.cfg.eps * (psi0 - self.cfg.alpha * self.cfg.h / 8.0 * u[e] * psi1)
    }
}

impl OdeSystem for MacroModel {
    fn dim(&self) -> usize {
        self.cfg.m + self.bank.dim()
    }

    fn n_inputs(&self) -> usize {
        self.cfg.forcing_inputs() + self.n_extra
    }

    fn rhs(&self, _t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]) {
        let m = self.cfg.m;
        let k = self.cfg.modes;
        let (u, z) = y.split_at(m);
        let nf = self.cfg.forcing_inputs();
        let (modes, extra) = inputs.split_at(nf);
        let (alpha, gamma, h) = (self.cfg.alpha, self.cfg.gamma, self.cfg.h);
        for e in 0..m {
            let mut v = self.det.eval(u, e, alpha, gamma, h);
            if self.det == DetKind::LatticeCoarse {
                v += self.lattice_forcing(u, e, modes);
            }
            for t in &self.terms {
                let s = match &t.source {
                    Source::One => 1.0,
                    Source::Mode(p) => p.eval(modes, k, m, e),
                    Source::Input(ix) => extra[ix[e]],
                };
                v += t.coeff[e] * t.u.eval(u, e) * s;
            }
            for q in &self.quad {
                v += q.c * q.u.eval(u, e) * q.left.eval(modes, k, m, e) * self.bank.output(z, q.chain[e]);
            }
            dy[e] = v;
        }
        if !self.bank.is_empty() {
            let civ: Vec<f64> = self
                .chain_inputs
                .iter()
                .map(|&(e, x)| x.eval(modes, k, m, e))
                .collect();
            self.bank.rhs_into(z, &civ, &mut dy[m..]);
        }
    }
}

/// Slow-manifold field of the single-correlated-forcing model, with its own
/// chains `Z_1, Z_{2,1}, Z_{4,1}, Z_{6,1}` on each `φ_{j,1}`.
#[derive(Debug, Clone)]
pub struct Ssm1Field {
    m: usize,
    k: usize,
    h: f64,
    eps: f64,
    alpha: f64,
    gamma: f64,
    bank: ChainBank,
    /// chain index per element for each of the four chains
    idx: [Vec<usize>; 4],
}

impl Ssm1Field {
    pub const CHAINS: [&'static [usize]; 4] = [&[1], &[2, 1], &[4, 1], &[6, 1]];

    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if cfg.modes < 2 {
            return config("the slow-manifold field needs mode 1");
        }
        let mut bank = ChainBank::new();
        let mut idx: [Vec<usize>; 4] = Default::default();
        for e in 0..cfg.m {
            for (c, rates) in Self::CHAINS.iter().enumerate() {
                let betas = rates.iter().map(|&r| continuum_rate(r, cfg.h)).collect();
                idx[c].push(bank.add(e * cfg.modes + 1, betas)?);
            }
        }
        Ok(Ssm1Field {
            m: cfg.m,
            k: cfg.modes,
            h: cfg.h,
            eps: cfg.eps,
            alpha: cfg.alpha,
            gamma: cfg.gamma,
            bank,
            idx,
        })
    }

    pub fn bank(&self) -> &ChainBank {
        &self.bank
    }

    fn z(&self, z: &[f64], c: usize, e: usize) -> f64 {
        self.bank.output(z, self.idx[c][e])
    }

    /// `u_j(X_j)` for every element from grid values and chain states.
    pub fn at_grid(&self, u: &[f64], z: &[f64]) -> Vec<f64> {
        (0..self.m).map(|e| self.subgrid(u, z, e, 0.0)).collect()
    }

    /// `u_j` at subgrid angle `θ ∈ [−π, π]` of element `e`.
    pub fn subgrid(&self, u: &[f64], z: &[f64], e: usize, theta: f64) -> f64 {
        let m = self.m;
        let (um, uc, up) = (u[wrap(e, -1, m)], u[e], u[wrap(e, 1, m)]);
        let tp = theta / PI;
        let coupling = self.gamma * (tp * 0.5 * (up - um) + 0.5 * tp * tp * (up - 2.0 * uc + um));
        let z1 = self.z(z, 0, e);
        let bracket = 2.0 * self.h / (PI * PI) * z1
            - 4.0 / self.h
                * ((2.0 * theta).cos() * self.z(z, 1, e) / 3.0 - (4.0 * theta).cos() * self.z(z, 2, e) / 15.0
                    + (6.0 * theta).cos() * self.z(z, 3, e) / 35.0);
        uc + coupling + self.eps * theta.sin() * z1 + self.eps * self.alpha * uc * bracket
    }
}

impl OdeSystem for Ssm1Field {
    fn dim(&self) -> usize {
        self.bank.dim()
    }
    fn n_inputs(&self) -> usize {
        self.m * self.k
    }
    fn rhs(&self, _t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]) {
        self.bank.rhs_into(y, inputs, dy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stepper::{step, Stages, Workspace};
    use approx::assert_abs_diff_eq;

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig::new(variant, 0.3, 0.05, PI / 2.0, 4)
    }

    fn rhs_of(model: &MacroModel, y: &[f64], inputs: &[f64]) -> Vec<f64> {
        let mut dy = vec![0.0; model.dim()];
        model.rhs(0.0, y, inputs, &mut dy);
        dy
    }

    #[test]
    fn constants_are_equilibria() {
        for v in [Variant::Lowg, Variant::LatticeCoarse, Variant::Ssm1, Variant::Strongquad] {
            for gamma in [0.0, 0.5, 1.0] {
                let mut c = cfg(v).with_gamma(gamma);
                c.eps = 0.0;
                let model = MacroModel::strong(&c).unwrap();
                let y = model.initial_state(&[1.3; 4]).unwrap();
                let inputs: Vec<f64> = (0..model.n_inputs()).map(|i| (i as f64 * 0.7).sin()).collect();
                let dy = rhs_of(&model, &y, &inputs);
                assert!(dy[..4].iter().all(|d| d.abs() <= 1e-12), "{v:?} {dy:?}");
            }
        }
    }

    #[test]
    fn lowg_stencil_substitution() {
        let mut c = ModelConfig::new(Variant::Lowg, 0.0, 0.0, 1.0, 3);
        c.eps = 0.0;
        let model = MacroModel::strong(&c).unwrap();
        let dy = rhs_of(&model, &[0.0, 1.0, 0.0], &[0.0; 9]);
        assert_abs_diff_eq!(dy[1], -2.0, epsilon = 1e-15);
    }

    #[test]
    fn lowg_drift_constant() {
        let c = cfg(Variant::Lowg);
        let model = MacroModel::strong(&c).unwrap();
        let drift = model.terms().iter().find(|t| t.source == Source::One).unwrap();
        let expect = 0.01643 * 0.09 * (PI * PI / 4.0) * 0.0025;
        assert_abs_diff_eq!(drift.coeff[0], expect, epsilon = 1e-18);
        assert_abs_diff_eq!(expect, 9.1213e-6, epsilon = 5e-10);
    }

    #[test]
    fn lowg_forcing_terms() {
        let c = cfg(Variant::Lowg);
        let model = MacroModel::strong(&c).unwrap();
        let u = [0.8, 1.1, 0.9, 1.2];
        let mut modes = vec![0.0; 12];
        modes[3] = 0.7; // φ_{1,0} at element e = 1
        modes[4] = -0.4;
        modes[5] = 0.3;
        let dy = rhs_of(&model, &u, &modes);
        let d0 = rhs_of(&model, &u, &[0.0; 12]);
        let (a, h, e) = (0.3, PI / 2.0, 0.05);
        let expect = e * (0.7 - a * 2.0 * h / (PI * PI) * (-0.4) * 1.1 - a * a * 8.0 * h * h / (3.0 * PI.powi(4)) * 0.3 * 1.21);
        assert_abs_diff_eq!(dy[1] - d0[1], expect, epsilon = 1e-14);
    }

    #[test]
    fn lattice_restriction() {
        let mut c = ModelConfig::new(Variant::LatticeCoarse, 0.1, 0.1, 1.0, 4);
        let model = MacroModel::strong(&c).unwrap();
        let u = [1.0; 4];
        let dy = rhs_of(&model, &u, &[2.0; 8]);
        // constant forcing: ψ0 = 2, ψ1 = 0
        for d in &dy {
            assert_abs_diff_eq!(*d, 0.1 * 2.0, epsilon = 1e-15);
        }
        // linear ramp across the fine points of element 0 exercises ψ1
        c.psi1 = [-1.0, 0.0, 1.0];
        let model = MacroModel::strong(&c).unwrap();
        let mut fine = [0.0; 8];
        fine[1] = 1.0;
        fine[7] = -1.0;
        let dy = rhs_of(&model, &u, &fine);
        assert_abs_diff_eq!(dy[0], 0.1 * (0.0 - 0.1 / 8.0 * 2.0), epsilon = 1e-15);
    }

    #[test]
    fn ssm1_linear_coefficient_at_zero_coupling() {
        let c = cfg(Variant::Ssm1).with_gamma(0.0);
        let model = MacroModel::strong(&c).unwrap();
        let u = [1.0, 1.0, 1.0, 1.0];
        // φ_{j,1} = (−1)^j φ with φ = 1, chains at rest
        let mut modes = vec![0.0; 12];
        for e in 0..4 {
            modes[e * 3 + 1] = ElementGeometry::parity_sign(e);
        }
        let y = model.initial_state(&u).unwrap();
        let dy = rhs_of(&model, &y, &modes);
        let (a, h, eps) = (0.3, PI / 2.0, 0.05);
        for e in 0..4 {
            // ∓ with upper sign on even j
            let sign = -ElementGeometry::parity_sign(e);
            let expect = sign * eps * a * h * (2.0 / (PI * PI) - 0.00363 * a * a * h * h);
            assert_abs_diff_eq!(dy[e], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn ssm1_bank_and_step_limit() {
        let c = cfg(Variant::Ssm1);
        let model = MacroModel::strong(&c).unwrap();
        assert_eq!(model.bank().len(), 16);
        assert_eq!(model.n_quadratic(), 4);
        // β6 = 144 at H = π/2
        assert_abs_diff_eq!(model.bank().max_rate(), 144.0, epsilon = 1e-9);
        assert!(model.check_time_step(1e-3).is_ok());
        assert!(model.check_time_step(0.01).is_err());
    }

    #[test]
    fn ssm1_parity_equivariance() {
        let c = cfg(Variant::Ssm1);
        let model = MacroModel::strong(&c).unwrap();
        let u = [0.9, 1.2, 1.05, 0.8];
        let modes = |phi: f64| {
            let mut v = vec![0.0; 12];
            for e in 0..4 {
                v[e * 3 + 1] = ElementGeometry::parity_sign(e) * phi;
            }
            v
        };
        // integrate both systems briefly so the chains are populated
        let run = |u0: &[f64], phi: f64| {
            let mut y = model.initial_state(u0).unwrap();
            let mut ws = Workspace::new(y.len());
            for i in 0..200 {
                let t = i as f64 * 1e-3;
                let st = Stages::sampled(Scheme::Rk4, t, 1e-3, |s| modes(phi * (1.0 + s).cos()));
                step(&model, Scheme::Rk4, t, 1e-3, &mut y, &st, &mut ws);
            }
            y[..4].to_vec()
        };
        let a = run(&u, 1.0);
        let shifted: Vec<f64> = (0..4).map(|e| u[(e + 1) % 4]).collect();
        let b = run(&shifted, -1.0);
        for e in 0..4 {
            assert_abs_diff_eq!(b[e], a[(e + 1) % 4], epsilon = 1e-13);
        }
    }

    #[test]
    fn strongquad_requires_three_modes() {
        let mut c = cfg(Variant::Strongquad);
        c.modes = 4;
        assert!(MacroModel::strong(&c).is_err());
        c.modes = 3;
        let model = MacroModel::strong(&c).unwrap();
        assert_eq!(model.n_quadratic(), 33);
    }

    #[test]
    fn strongquad_without_forcing_is_deterministic_part() {
        let c = cfg(Variant::Strongquad).with_gamma(0.7);
        let model = MacroModel::strong(&c).unwrap();
        let u = [0.9, 1.2, 1.05, 0.8];
        let y = model.initial_state(&u).unwrap();
        let dy = rhs_of(&model, &y, &[0.0; 12]);
        for e in 0..4 {
            assert_abs_diff_eq!(dy[e], DetKind::Strongquad.eval(&u, e, 0.3, 0.7, PI / 2.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn strongquad_linear_reduces_at_zero_coupling() {
        let t = strongquad_terms();
        let g0: Vec<&LinearTerm> = t.linear.iter().filter(|l| l.coeff.gamma == 0).collect();
        assert_eq!(g0.len(), 3);
        let find = |u: UFactor, k: usize| g0.iter().find(|l| l.u == u && l.phi.unwrap().mode == k).unwrap();
        assert_eq!(find(UFactor::One, 0).coeff.c, 1.0);
        assert_abs_diff_eq!(find(UFactor::U, 1).coeff.c, -2.0 / (PI * PI));
        assert_abs_diff_eq!(find(UFactor::U2, 0).coeff.c, -8.0 / (3.0 * PI.powi(4)));
        assert!(g0.iter().all(|l| l.phi.unwrap().mode != 2));
    }

    #[test]
    fn specialisation_matches_ssm1() {
        let sq: Vec<_> = specialize_alternating(&strongquad_terms());
        let s1: Vec<_> = specialize_alternating(&ssm1_terms());
        let get = |v: &[(SpecialKey, f64)], k: SpecialKey| v.iter().find(|(kk, _)| *kk == k).map(|p| p.1);
        let k1 = (1, 1, 0, 1, UFactor::U, vec![]);
        assert_eq!(get(&sq, k1.clone()), get(&s1, k1.clone()));
        assert_abs_diff_eq!(get(&sq, k1).unwrap(), -2.0 / (PI * PI), epsilon = 1e-15);
        let k2 = (2, 2, 0, 0, UFactor::U, vec![1, 2]);
        assert_abs_diff_eq!(get(&sq, k2.clone()).unwrap(), -8.0 / (15.0 * PI * PI), epsilon = 1e-15);
        assert_abs_diff_eq!(get(&s1, k2).unwrap(), -8.0 / (15.0 * PI * PI), epsilon = 1e-15);
        // Z_1 coefficients differ by truncation: 32/(15π⁴) vs 0.0195
        let k3 = (2, 2, 0, 2, UFactor::U, vec![1]);
        let a = get(&sq, k3.clone()).unwrap();
        let b = get(&s1, k3).unwrap();
        assert_abs_diff_eq!(a, 32.0 / (15.0 * PI.powi(4)), epsilon = 1e-15);
        assert!((a - 0.02189).abs() < 5e-5 && (b - 0.0195).abs() < 5e-5);
        // γ-coupled linear coefficients agree to about 1%
        let kg = (1, 1, 1, 1, UFactor::U, vec![]);
        assert!((get(&sq, kg.clone()).unwrap() - get(&s1, kg).unwrap()).abs() < 1e-3);
        let kd = (1, 1, 1, 1, UFactor::Delta2U, vec![]);
        assert!((get(&sq, kd.clone()).unwrap() - get(&s1, kd).unwrap()).abs() < 1e-3);
    }

    #[test]
    fn field_without_forcing_is_grid_value() {
        let mut c = cfg(Variant::Ssm1);
        c.eps = 0.0;
        let f = Ssm1Field::new(&c).unwrap();
        let u = [0.9, 1.2, 1.05, 0.8];
        let z: Vec<f64> = (0..f.dim()).map(|i| i as f64 * 0.1).collect();
        assert_eq!(f.at_grid(&u, &z), u.to_vec());
        let g0 = Ssm1Field::new(&c.clone().with_gamma(0.0)).unwrap();
        assert_eq!(g0.subgrid(&u, &z, 2, 0.0), u[2]);
    }

    #[test]
    fn field_satisfies_coupling_at_element_edges() {
        let mut c = cfg(Variant::Ssm1);
        c.eps = 0.0;
        let f = Ssm1Field::new(&c).unwrap();
        let u = [0.9, 1.2, 1.05, 0.8];
        let z = vec![0.0; f.dim()];
        for e in 0..4 {
            assert_abs_diff_eq!(f.subgrid(&u, &z, e, PI), u[(e + 1) % 4], epsilon = 1e-14);
            assert_abs_diff_eq!(f.subgrid(&u, &z, e, -PI), u[(e + 3) % 4], epsilon = 1e-14);
        }
    }

    #[test]
    fn field_steady_offset_under_constant_forcing() {
        let c = cfg(Variant::Ssm1);
        let f = Ssm1Field::new(&c).unwrap();
        let mut z = vec![0.0; f.dim()];
        let mut ws = Workspace::new(z.len());
        let st = Stages::constant(Scheme::Rk4, vec![0.0, 1.0, 0.0].repeat(4));
        for i in 0..20_000 {
            step(&f, Scheme::Rk4, i as f64 * 1e-3, 1e-3, &mut z, &st, &mut ws);
        }
        let h = PI / 2.0;
        let b = |k: usize| continuum_rate(k, h);
        let bracket = 2.0 * h / (PI * PI) / b(1)
            - 4.0 / h * (1.0 / (3.0 * b(2) * b(1)) - 1.0 / (15.0 * b(4) * b(1)) + 1.0 / (35.0 * b(6) * b(1)));
        let u = [1.0; 4];
        let got = f.at_grid(&u, &z);
        for e in 0..4 {
            assert_abs_diff_eq!(got[e], 1.0 + 0.05 * 0.3 * bracket, epsilon = 1e-10);
        }
    }

    #[test]
    fn unstable_run_names_component() {
        let mut c = cfg(Variant::Lowg);
        c.eps = 0.0;
        let model = MacroModel::strong(&c).unwrap();
        let mut y = model.initial_state(&[0.0, 5.0, -5.0, 0.0]).unwrap();
        let mut bank = SignalBank::new(&[], crate::forcing::InputMap::from_rows(vec![vec![]; 12])).unwrap();
        let err = model.run(&mut bank, &mut y, 0.0, 5.0, 1000, |_, _, _| Ok(())).unwrap_err();
        match err {
            Error::Unstable { what, .. } => assert!(what.contains("grid value U_"), "{what}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(Variant::Ssm1).with_gamma(1.5).validate().is_err());
        let mut c = cfg(Variant::Ssm1);
        c.m = 2;
        assert!(c.validate().is_err());
        assert!(MacroModel::strong(&cfg(Variant::WeakSsm1)).is_err());
        let json = r#"{"variant":"ssm1","alpha":0.3,"eps":0.05,"h":1.5707963267948966,"m":4}"#;
        let parsed: ModelConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed, cfg(Variant::Ssm1));
        assert_eq!("lattice".parse::<Variant>().unwrap(), Variant::LatticeCoarse);
        assert_eq!("weak-strongquad".parse::<Variant>().unwrap(), Variant::WeakStrongquad);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn constant_states_rest_for_every_variant(c0 in -3.0f64..3.0, a in -1.0f64..1.0, g in 0.0f64..1.0, m in 3usize..9) {
                for v in [Variant::Lowg, Variant::LatticeCoarse, Variant::Ssm1, Variant::Strongquad] {
                    let mut c = ModelConfig::new(v, a, 0.0, 0.8, m).with_gamma(g);
                    c.eps = 0.0;
                    let model = MacroModel::strong(&c).unwrap();
                    let y = model.initial_state(&vec![c0; m]).unwrap();
                    let mut dy = vec![0.0; model.dim()];
                    model.rhs(0.0, &y, &vec![0.3; model.n_inputs()], &mut dy);
                    prop_assert!(dy[..m].iter().all(|d| d.abs() <= 1e-12));
                }
            }

            #[test]
            fn mode_expressions_match_stencils(v in prop::collection::vec(-2.0f64..2.0, 5..9)) {
                let m = v.len();
                let modes: Vec<f64> = v.iter().flat_map(|&x| [x, 0.0, -x]).collect();
                let d2 = crate::stencil::delta2(&v);
                let md = crate::stencil::mudelta(&v);
                let d4 = crate::stencil::delta4(&v);
                for e in 0..m {
                    prop_assert!((me(D2, 0).eval(&modes, 3, m, e) - d2[e]).abs() < 1e-12);
                    prop_assert!((me(MD, 0).eval(&modes, 3, m, e) - md[e]).abs() < 1e-12);
                    prop_assert!((me(D4, 2).eval(&modes, 3, m, e) + d4[e]).abs() < 1e-12);
                }
            }
        }
    }
}
