//! Memory convolutions `Z_{κ1,κ2,...}φ` realised as relaxation cascades, and
//! the by-parts reduction of quadratic convolution products to the canonical
//! form `φ_ρ · Z_{κ⃗}φ_μ`.
//!
//! A chain with rates `(β1, …, βn)` holds states `z_1..z_n` with
//! `ż_p = −β_p z_p + z_{p+1}` and `ż_n = −β_n z_n + φ`, so `z_1` is the full
//! multiple convolution and `z_p` is `Z_{βp,…,βn}φ`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::stepper::{self, OdeSystem, Scheme, Stages, Workspace};

pub fn check_rates(rates: &[f64]) -> Result<()> {
    match rates.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
        Some(&b) => Err(Error::Rate(b)),
        None => Ok(()),
    }
}

/// Cascade derivative for one chain.
#[inline]
pub fn chain_rhs(rates: &[f64], z: &[f64], input: f64, dz: &mut [f64]) {
    let n = rates.len();
    for p in 0..n {
        let drive = if p + 1 < n { z[p + 1] } else { input };
        dz[p] = -rates[p] * z[p] + drive;
    }
}

/// Steady response of a chain to a constant input `c`: `c / Π β`.
pub fn steady_constant(rates: &[f64], c: f64) -> f64 {
    c / rates.iter().product::<f64>()
}

/// A single multiple-convolution chain owning its state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvChain {
    rates: Vec<f64>,
    states: Vec<f64>,
}

impl ConvChain {
    /// Chain at rest (all states zero).
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return config("a convolution chain needs at least one rate");
        }
        check_rates(&rates)?;
        let n = rates.len();
        Ok(ConvChain {
            rates,
            states: vec![0.0; n],
        })
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// `Z_{κ⃗}φ`, the outermost state.
    pub fn output(&self) -> f64 {
        self.states[0]
    }

    /// Advance one step; `stage_inputs` holds the input at each stage of
    /// `scheme`.
    pub fn step(&mut self, scheme: Scheme, t: f64, dt: f64, stage_inputs: &[f64], ws: &mut Workspace) {
        debug_assert!(dt > 0.0);
        let sys = stepper::FnSystem {
            dim: self.rates.len(),
            n_inputs: 1,
            f: |_t: f64, z: &[f64], u: &[f64], dz: &mut [f64]| chain_rhs(&self.rates, z, u[0], dz),
        };
        let stages = Stages {
            values: stage_inputs.iter().map(|&v| vec![v]).collect(),
        };
        let mut z = std::mem::take(&mut self.states);
        stepper::step(&sys, scheme, t, dt, &mut z, &stages, ws);
        self.states = z;
    }

    /// Integrate from rest to `t_end` under input `f(t)` with RK4, calling
    /// `observe(t, output)` after every step.
    pub fn run(
        &mut self,
        f: impl Fn(f64) -> f64,
        t_end: f64,
        dt: f64,
        mut observe: impl FnMut(f64, f64),
    ) {
        let mut ws = Workspace::new(self.rates.len());
        let n = (t_end / dt).round() as usize;
        for i in 0..n {
            let t = i as f64 * dt;
            let inputs: Vec<f64> = Scheme::Rk4.stage_offsets().iter().map(|c| f(t + c * dt)).collect();
            self.step(Scheme::Rk4, t, dt, &inputs, &mut ws);
            observe(t + dt, self.output());
        }
    }
}

fn is_permutation(a: &[f64], b: &[f64]) -> bool {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a == b
}

/// Max deviation of the outputs of two chains whose rate vectors are
/// permutations of each other, driven by `f` from rest over `[0, t_end]`.
pub fn chain_equivalence_check(
    rates_a: &[f64],
    rates_b: &[f64],
    f: impl Fn(f64) -> f64,
    t_end: f64,
    dt: f64,
) -> Result<f64> {
    if !is_permutation(rates_a, rates_b) {
        return Err(Error::NotPermutation);
    }
    if !(dt > 0.0) {
        return config(format!("time step must be positive, got {dt}"));
    }
    let mut a = ConvChain::new(rates_a.to_vec())?;
    let mut b = ConvChain::new(rates_b.to_vec())?;
    let mut outs = Vec::new();
    a.run(&f, t_end, dt, |_, z| outs.push(z));
    let mut worst = 0.0f64;
    let mut i = 0;
    b.run(&f, t_end, dt, |_, z| {
        worst = worst.max((z - outs[i]).abs());
        i += 1;
    });
    Ok(worst)
}

/// Many chains sharing one flat state vector, each driven by one entry of
/// an input vector.
#[derive(Debug, Clone, Default)]
pub struct ChainBank {
    chains: Vec<(usize, Vec<f64>)>,
    offsets: Vec<usize>,
    dim: usize,
    n_inputs: usize,
}

impl ChainBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a chain on `input`, reusing an identical one if present.
    /// Returns the chain index.
    pub fn add(&mut self, input: usize, rates: Vec<f64>) -> Result<usize> {
        if rates.is_empty() {
            return config("a convolution chain needs at least one rate");
        }
        check_rates(&rates)?;
        if let Some(i) = self.chains.iter().position(|(inp, r)| *inp == input && *r == rates) {
            return Ok(i);
        }
        self.offsets.push(self.dim);
        self.dim += rates.len();
        self.n_inputs = self.n_inputs.max(input + 1);
        self.chains.push((input, rates));
        Ok(self.chains.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.chains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chains.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chain(&self, i: usize) -> (usize, &[f64]) {
        (self.chains[i].0, &self.chains[i].1)
    }

    pub fn max_rate(&self) -> f64 {
        self.chains
            .iter()
            .flat_map(|(_, r)| r.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Output `z_1` of chain `i` inside a flat bank state.
    #[inline]
    pub fn output(&self, states: &[f64], i: usize) -> f64 {
        states[self.offsets[i]]
    }

    pub fn rhs_into(&self, states: &[f64], inputs: &[f64], dz: &mut [f64]) {
        for (i, (inp, rates)) in self.chains.iter().enumerate() {
            let o = self.offsets[i];
            let n = rates.len();
            chain_rhs(rates, &states[o..o + n], inputs[*inp], &mut dz[o..o + n]);
        }
    }
}

impl OdeSystem for ChainBank {
    fn dim(&self) -> usize {
        self.dim
    }
    fn n_inputs(&self) -> usize {
        self.n_inputs
    }
    fn rhs(&self, _t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]) {
        self.rhs_into(y, inputs, dy)
    }
}

/// `Z_{rates} φ_signal`; empty rates mean the bare signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub signal: String,
    pub rates: Vec<f64>,
}

impl Factor {
    pub fn new(signal: impl Into<String>, rates: Vec<f64>) -> Self {
        Factor {
            signal: signal.into(),
            rates,
        }
    }

    pub fn bare(signal: impl Into<String>) -> Self {
        Self::new(signal, Vec::new())
    }

    fn sorted(mut self) -> Self {
        self.rates.sort_by(f64::total_cmp);
        self
    }

    fn key(&self) -> (String, Vec<u64>) {
        (self.signal.clone(), self.rates.iter().map(|r| r.to_bits()).collect())
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.rates.is_empty() {
            return write!(f, "{}", self.signal);
        }
        let r: Vec<String> = self.rates.iter().map(|r| r.to_string()).collect();
        write!(f, "Z({}):{}", r.join(","), self.signal)
    }
}

impl FromStr for Factor {
    type Err = Error;
    /// `name` or `Z(r1,r2,...):name`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let Some(rest) = s.strip_prefix("Z(") else {
            if s.is_empty() || s.contains(|c: char| c.is_whitespace() || c == '(' || c == ':') {
                return config(format!("bad factor `{s}`"));
            }
            return Ok(Factor::bare(s));
        };
        let (rates, name) = rest
            .split_once("):")
            .ok_or_else(|| Error::Config(format!("expected `Z(rates):signal`, got `{s}`")))?;
        let rates = rates
            .split(',')
            .map(|r| {
                r.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad rate `{r}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        check_rates(&rates)?;
        let name = name.trim();
        if name.is_empty() {
            return config(format!("missing signal name in `{s}`"));
        }
        Ok(Factor::new(name, rates))
    }
}

/// `coeff · Z_{λ⃗}φ_ρ · Z_{κ⃗}φ_μ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTerm {
    pub coeff: f64,
    pub left: Factor,
    pub right: Factor,
}

impl ConvTerm {
    pub fn new(coeff: f64, left: Factor, right: Factor) -> Self {
        ConvTerm { coeff, left, right }
    }

    pub fn is_canonical(&self) -> bool {
        self.left.rates.is_empty() || self.right.rates.is_empty()
    }

    pub fn chain_length(&self) -> usize {
        self.left.rates.len() + self.right.rates.len()
    }

    /// Sorted rates; any single chain sits on the right; otherwise the
    /// factors are in a fixed order.
    pub fn normalized(self) -> Self {
        let (mut l, mut r) = (self.left.sorted(), self.right.sorted());
        let swap = if l.rates.is_empty() != r.rates.is_empty() {
            r.rates.is_empty()
        } else {
            l.key() > r.key()
        };
        if swap {
            std::mem::swap(&mut l, &mut r);
        }
        ConvTerm::new(self.coeff, l, r)
    }

    fn check(&self) -> Result<()> {
        check_rates(&self.left.rates)?;
        check_rates(&self.right.rates)
    }
}

impl fmt::Display for ConvTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} * {} * {}", self.coeff, self.left, self.right)
    }
}

impl FromStr for ConvTerm {
    type Err = Error;
    /// `[coeff *] factor * factor`, e.g. `2 * Z(1,4):rho * Z(9):mu`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('*').map(str::trim).collect();
        let (coeff, fs) = match parts.as_slice() {
            [a, b] => (1.0, [*a, *b]),
            [c, a, b] => (
                c.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad coefficient `{c}`")))?,
                [*a, *b],
            ),
            _ => return config(format!("expected `[c *] factor * factor`, got `{s}`")),
        };
        Ok(ConvTerm::new(coeff, fs[0].parse()?, fs[1].parse()?))
    }
}

/// Sum of like terms after normalisation; exact zeros are dropped.
pub fn merge_terms(terms: impl IntoIterator<Item = ConvTerm>) -> Vec<ConvTerm> {
    let mut acc: BTreeMap<_, ConvTerm> = BTreeMap::new();
    for t in terms {
        let t = t.normalized();
        let key = (t.left.key(), t.right.key());
        acc.entry(key)
            .and_modify(|e| e.coeff += t.coeff)
            .or_insert(t);
    }
    acc.into_values().filter(|t| t.coeff != 0.0).collect()
}

/// One application of the by-parts recurrence.
#[derive(Debug, Clone, Serialize)]
pub struct ReductionStep {
    pub term: ConvTerm,
    /// Integrated part: its time derivative is removed from the integrand.
    pub boundary: ConvTerm,
    pub children: [ConvTerm; 2],
}

/// Output of [`reduce_by_parts`]. `original = d/dt Σ boundary + Σ canonical`.
/// Boundary terms belong in the subgrid field, canonical terms in the
/// evolution.
#[derive(Debug, Clone, Serialize)]
pub struct Reduction {
    pub input: ConvTerm,
    pub steps: Vec<ReductionStep>,
    pub boundary: Vec<ConvTerm>,
    pub canonical: Vec<ConvTerm>,
}

/// Reduce a quadratic product by repeated integration by parts, peeling the
/// leading rate of each chain. Rates are peeled in the order given, but the
/// result is order independent up to partial-fraction identities.
pub fn reduce_by_parts(term: &ConvTerm) -> Result<Reduction> {
    term.check()?;
    let mut steps = Vec::new();
    let (mut boundary, mut canonical) = (Vec::new(), Vec::new());
    let mut work = vec![term.clone()];
    while let Some(t) = work.pop() {
        if t.is_canonical() {
            canonical.push(t);
            continue;
        }
        let s = t.left.rates[0] + t.right.rates[0];
        let c = t.coeff / s;
        let b = ConvTerm::new(-c, t.left.clone(), t.right.clone());
        let peel = |f: &Factor| Factor::new(f.signal.clone(), f.rates[1..].to_vec());
        let children = [
            ConvTerm::new(c, peel(&t.left), t.right.clone()),
            ConvTerm::new(c, t.left.clone(), peel(&t.right)),
        ];
        work.extend(children.iter().rev().cloned());
        boundary.push(b.clone());
        steps.push(ReductionStep {
            term: t,
            boundary: b,
            children,
        });
    }
    Ok(Reduction {
        input: term.clone(),
        steps,
        boundary: merge_terms(boundary),
        canonical: merge_terms(canonical),
    })
}

/// Time traces of several term sums, evaluated along one trajectory of all
/// the chains they need (started from rest).
#[derive(Debug, Clone)]
pub struct TermTraces {
    pub t: Vec<f64>,
    /// `values[g][i]`: sum of group `g` at `t[i]`.
    pub values: Vec<Vec<f64>>,
    /// `integrals[g][i]`: `∫_0^{t[i]}` of that sum.
    pub integrals: Vec<Vec<f64>>,
}

struct TermSystem<'a> {
    bank: ChainBank,
    groups: &'a [Vec<ConvTerm>],
    /// Chain index per factor, or usize::MAX for bare signals.
    factor_chain: Vec<Vec<[(usize, usize); 2]>>,
}

impl TermSystem<'_> {
    fn value(&self, g: usize, z: &[f64], sig: &[f64]) -> f64 {
        self.groups[g]
            .iter()
            .zip(&self.factor_chain[g])
            .map(|(t, fc)| {
                let f = |(s, c): (usize, usize)| {
                    if c == usize::MAX {
                        sig[s]
                    } else {
                        self.bank.output(z, c)
                    }
                };
                t.coeff * f(fc[0]) * f(fc[1])
            })
            .sum()
    }
}

impl OdeSystem for TermSystem<'_> {
    fn dim(&self) -> usize {
        self.bank.dim() + self.groups.len()
    }
    fn n_inputs(&self) -> usize {
        self.bank.n_inputs
    }
    fn rhs(&self, _t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]) {
        let nb = self.bank.dim();
        self.bank.rhs_into(&y[..nb], inputs, &mut dy[..nb]);
        for g in 0..self.groups.len() {
            dy[nb + g] = self.value(g, &y[..nb], inputs);
        }
    }
}

/// Integrate the chains behind `groups` with RK4 from rest and record each
/// group's instantaneous sum and running integral. `signal(id, t)` supplies
/// the named signals.
pub fn trace_terms(
    groups: &[Vec<ConvTerm>],
    signal: impl Fn(&str, f64) -> Option<f64>,
    t_end: f64,
    dt: f64,
) -> Result<TermTraces> {
    if !(dt > 0.0 && t_end >= 0.0) {
        return config("trace_terms needs dt > 0 and t_end >= 0");
    }
    let mut ids: Vec<String> = Vec::new();
    let mut bank = ChainBank::new();
    let mut factor_chain = Vec::new();
    for g in groups {
        let mut fcs = Vec::new();
        for t in g {
            t.check()?;
            let mut pair = [(0, usize::MAX); 2];
            for (slot, f) in [&t.left, &t.right].into_iter().enumerate() {
                let s = match ids.iter().position(|i| *i == f.signal) {
                    Some(s) => s,
                    None => {
                        ids.push(f.signal.clone());
                        ids.len() - 1
                    }
                };
                let c = if f.rates.is_empty() {
                    usize::MAX
                } else {
                    bank.add(s, f.rates.clone())?
                };
                pair[slot] = (s, c);
            }
            fcs.push(pair);
        }
        factor_chain.push(fcs);
    }
    bank.n_inputs = ids.len();
    let sample = |t: f64| -> Result<Vec<f64>> {
        ids.iter()
            .map(|id| signal(id, t).ok_or_else(|| Error::Config(format!("unknown signal `{id}`"))))
            .collect()
    };
    let sys = TermSystem {
        bank,
        groups,
        factor_chain,
    };
    let nb = sys.bank.dim();
    let mut y = vec![0.0; sys.dim()];
    let mut ws = Workspace::new(y.len());
    let n = (t_end / dt).round() as usize;
    let mut out = TermTraces {
        t: Vec::with_capacity(n + 1),
        values: vec![Vec::with_capacity(n + 1); groups.len()],
        integrals: vec![Vec::with_capacity(n + 1); groups.len()],
    };
    let record = |t: f64, y: &[f64], sig: &[f64], out: &mut TermTraces| {
        out.t.push(t);
        for g in 0..groups.len() {
            out.values[g].push(sys.value(g, &y[..nb], sig));
            out.integrals[g].push(y[nb + g]);
        }
    };
    record(0.0, &y, &sample(0.0)?, &mut out);
    for i in 0..n {
        let t = i as f64 * dt;
        let stages = Stages {
            values: Scheme::Rk4
                .stage_offsets()
                .iter()
                .map(|c| sample(t + c * dt))
                .collect::<Result<_>>()?,
        };
        stepper::step(&sys, Scheme::Rk4, t, dt, &mut y, &stages, &mut ws);
        record(t + dt, &y, &sample(t + dt)?, &mut out);
    }
    Ok(out)
}

/// Max over `[0, t_end]` of `|∫original − ∫Σcanonical − Σboundary|`, i.e. the
/// integrated form of `original = d/dt boundary + canonical`, with every
/// chain started from rest so the boundary vanishes at `t = 0`.
pub fn by_parts_residual(
    reduction: &Reduction,
    signal: impl Fn(&str, f64) -> Option<f64>,
    t_end: f64,
    dt: f64,
) -> Result<f64> {
    let groups = [
        vec![reduction.input.clone()],
        reduction.canonical.clone(),
        reduction.boundary.clone(),
    ];
    let tr = trace_terms(&groups, signal, t_end, dt)?;
    Ok((0..tr.t.len())
        .map(|i| (tr.integrals[0][i] - tr.integrals[1][i] - tr.values[2][i]).abs())
        .fold(0.0, f64::max))
}

/// `d/dt` of a product term, using `d/dt Z_{β1,β2..}φ = −β1 Z_{β1,β2..}φ + Z_{β2..}φ`
/// on each convolved factor. Bare factors are treated as constants.
pub fn derivative_terms(term: &ConvTerm) -> Vec<ConvTerm> {
    let mut out = Vec::new();
    let mut push = |f: &Factor, other: &Factor, left: bool| {
        if f.rates.is_empty() {
            return;
        }
        let tail = Factor::new(f.signal.clone(), f.rates[1..].to_vec());
        let pair = |a: Factor, c: f64| {
            if left {
                ConvTerm::new(c, a, other.clone())
            } else {
                ConvTerm::new(c, other.clone(), a)
            }
        };
        out.push(pair(f.clone(), -f.rates[0] * term.coeff));
        out.push(pair(tail, term.coeff));
    };
    push(&term.left, &term.right, true);
    push(&term.right, &term.left, false);
    out
}

/// Max over `[0, t_end]` of `|original − Σcanonical − d/dt Σboundary|`
/// evaluated pointwise along the chain trajectories.
pub fn by_parts_pointwise_residual(
    reduction: &Reduction,
    signal: impl Fn(&str, f64) -> Option<f64>,
    t_end: f64,
    dt: f64,
) -> Result<f64> {
    if reduction.boundary.iter().any(|b| b.left.rates.is_empty() || b.right.rates.is_empty()) {
        return config("boundary terms must carry convolutions on both factors");
    }
    let deriv: Vec<ConvTerm> = reduction.boundary.iter().flat_map(derivative_terms).collect();
    let groups = [vec![reduction.input.clone()], reduction.canonical.clone(), deriv];
    let tr = trace_terms(&groups, signal, t_end, dt)?;
    Ok((0..tr.t.len())
        .map(|i| (tr.values[0][i] - tr.values[1][i] - tr.values[2][i]).abs())
        .fold(0.0, f64::max))
}
