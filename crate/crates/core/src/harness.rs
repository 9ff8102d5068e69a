//! Paired micro/macro experiments, error metrics, emergence-rate fits and
//! convergence-order estimates. Each experiment returns a versioned report
//! and plot-ready tables.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::forcing::{alternating_mode_map, derive_seed, project_to_modes, InputMap, SignalBank, SignalSpec};
use crate::macromodel::{continuum_rate, DetKind, MacroModel, ModelConfig, Ssm1Field, Variant};
use crate::microscale::{BurgersSystem, ElementArray, LatticeSystem};
use crate::stencil::GridSeq;
use crate::stepper::{integrate, FnSystem, OdeSystem, Scheme};
use crate::weakmodel::{
    build_weak_model, harmonic_drift, harmonic_time_average, single_rate_variance, stochastic_ensemble,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Fig1,
    Fig3,
    Lattice,
    Consistency,
    Emergence,
    WeakDrift,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Fig1,
        Experiment::Fig3,
        Experiment::Lattice,
        Experiment::Consistency,
        Experiment::Emergence,
        Experiment::WeakDrift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Fig1 => "fig1",
            Experiment::Fig3 => "fig3",
            Experiment::Lattice => "lattice",
            Experiment::Consistency => "consistency",
            Experiment::Emergence => "emergence",
            Experiment::WeakDrift => "weak-drift",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Microscale run with one Lorenz driver per fine grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    pub alpha: f64,
    pub eps: f64,
    pub dx: f64,
    pub dt: f64,
    pub t_end: f64,
    /// Output every `stride` steps.
    pub stride: usize,
    pub seed: u64,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Fig1Config {
            alpha: 0.3,
            eps: 0.05,
            dx: PI / 16.0,
            dt: 0.01,
            t_end: 20.0,
            stride: 19,
            seed: 1,
        }
    }
}

/// Microscale run under `εφ(t) cos 2x` against the strong single-mode model
/// and its slow-manifold field at `X₂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig3Config {
    pub alpha: f64,
    pub eps: f64,
    pub gamma: f64,
    pub m: usize,
    /// Fine grid points per element.
    pub points_per_element: usize,
    pub dt: f64,
    pub t_end: f64,
    pub window: [f64; 2],
    pub xi0: f64,
    pub seed: u64,
    pub stride: usize,
}

impl Default for Fig3Config {
    fn default() -> Self {
        Fig3Config {
            alpha: 0.3,
            eps: 0.05,
            gamma: 1.0,
            m: 4,
            points_per_element: 32,
            dt: 1e-3,
            t_end: 15.0,
            window: [1.0, 15.0],
            xi0: 10.0,
            seed: 1,
            stride: 10,
        }
    }
}

/// Coarse lattice model against the fine lattice over a halving sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    pub alpha: f64,
    pub eps: f64,
    pub m: usize,
    pub h: f64,
    pub levels: usize,
    /// Forcing `cos(ω t + k x_i)` at every fine point; `ω = 0` gives the
    /// steady pattern `cos(k x_i)`.
    pub omega: f64,
    pub wavenumber: f64,
    pub u0: f64,
    pub dt: f64,
    pub t_end: f64,
    pub window: [f64; 2],
    pub psi1: [f64; 3],
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig {
            alpha: 0.1,
            eps: 0.1,
            m: 8,
            h: PI / 4.0,
            levels: 3,
            omega: 0.0,
            wavenumber: 1.0,
            u0: 1.0,
            dt: 1e-3,
            t_end: 40.0,
            window: [10.0, 40.0],
            psi1: [-0.5, 0.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub alpha: f64,
    pub amplitude: f64,
    pub grids: Vec<usize>,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            alpha: 0.3,
            amplitude: 0.5,
            grids: vec![16, 32, 64, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmergenceConfig {
    pub h: f64,
    pub m: usize,
    /// Intervals per continuum element.
    pub intervals: usize,
    pub amplitude: f64,
    pub dt: f64,
    /// Fit window in units of the mode's decay time `1/β`.
    pub window: [f64; 2],
}

impl Default for EmergenceConfig {
    fn default() -> Self {
        EmergenceConfig {
            h: PI / 2.0,
            m: 3,
            intervals: 64,
            amplitude: 0.01,
            dt: 2e-4,
            window: [1.0, 6.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakDriftConfig {
    pub paths: usize,
    pub beta: f64,
    /// Integration time in units of `1/β`.
    pub t_end: f64,
    pub dt: f64,
    pub seed: u64,
    /// Forcing periods averaged in the harmonic checks.
    pub periods: f64,
    /// Harmonic strong/weak fidelity run.
    pub alpha: f64,
    pub eps: f64,
    pub omega: f64,
}

impl Default for WeakDriftConfig {
    fn default() -> Self {
        WeakDriftConfig {
            paths: 1000,
            beta: 1.0,
            t_end: 50.0,
            dt: 0.01,
            seed: 11,
            periods: 200.0,
            alpha: 0.3,
            eps: 0.05,
            omega: 2.0,
        }
    }
}

/// Settings for every experiment; any section may be omitted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub fig1: Fig1Config,
    pub fig3: Fig3Config,
    pub lattice: LatticeConfig,
    pub consistency: ConsistencyConfig,
    pub emergence: EmergenceConfig,
    pub weak_drift: WeakDriftConfig,
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub relation: &'static str,
    pub threshold: f64,
    pub pass: bool,
}

/// Metrics and threshold checks of one experiment, with its resolved config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub outputs: Vec<String>,
}

impl ComparisonReport {
    fn new(experiment: Experiment, cfg: &impl Serialize) -> Result<Self> {
        Ok(ComparisonReport {
            schema_version: SCHEMA_VERSION,
            experiment,
            config: serde_json::to_value(cfg)?,
            metrics: BTreeMap::new(),
            checks: Vec::new(),
            notes: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn metric(&mut self, name: impl Into<String>, v: f64) {
        self.metrics.insert(name.into(), v);
    }

    fn check(&mut self, name: impl Into<String>, value: f64, relation: &'static str, threshold: f64) -> bool {
        let pass = value.is_finite()
            && match relation {
                "<" => value < threshold,
                "<=" => value <= threshold,
                ">" => value > threshold,
                ">=" => value >= threshold,
                _ => false,
            };
        self.checks.push(Check {
            name: name.into(),
            value,
            relation,
            threshold,
            pass,
        });
        pass
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).copied()
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn finish(self) -> Result<Self> {
        if let Some((k, v)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Fit(format!("{}: metric {k} is {v}", self.experiment.name())));
        }
        Ok(self)
    }
}

/// Columnar data destined for one CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: impl Into<String>, header: Vec<String>) -> Self {
        Table {
            name: name.into(),
            header,
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(path, &self.header, &self.rows)
    }
}

pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ComparisonReport,
    pub tables: Vec<Table>,
}

impl ExperimentOutput {
    /// Write `<name>.csv` per table and `<experiment>_report.json` into `dir`.
    pub fn write(&mut self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        self.report.outputs = self.tables.iter().map(|t| format!("{}.csv", t.name)).collect();
        for t in &self.tables {
            let p = dir.join(format!("{}.csv", t.name));
            t.write_csv(&p)?;
            paths.push(p);
        }
        let p = dir.join(format!("{}_report.json", self.report.experiment.name().replace('-', "_")));
        fs::write(&p, serde_json::to_string_pretty(&self.report)?)?;
        paths.push(p);
        Ok(paths)
    }
}

pub fn run_experiment(exp: Experiment, cfg: &HarnessConfig) -> Result<ExperimentOutput> {
    match exp {
        Experiment::Fig1 => run_fig1_experiment(&cfg.fig1),
        Experiment::Fig3 => run_fig3_experiment(&cfg.fig3),
        Experiment::Lattice => lattice_coarse_experiment(&cfg.lattice),
        Experiment::Consistency => consistency_experiment(&cfg.consistency),
        Experiment::Emergence => emergence_experiment(&cfg.emergence),
        Experiment::WeakDrift => weak_drift_experiment(&cfg.weak_drift),
    }
}

/// Least-squares slope of `y` against `x`.
fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Decay rate `−d log(dev)/dt` fitted over samples with `t` in `window`.
pub fn fit_emergence_rate(t: &[f64], deviation: &[f64], window: [f64; 2]) -> Result<f64> {
    if t.len() != deviation.len() {
        return Err(Error::Fit("time and deviation lengths differ".into()));
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (&ti, &d) in t.iter().zip(deviation) {
        if ti < window[0] || ti > window[1] {
            continue;
        }
        if !(d > 0.0) {
            return Err(Error::Fit(format!("deviation {d} at t = {ti} is not positive")));
        }
        xs.push(ti);
        ys.push(d.ln());
    }
    if xs.len() < 2 {
        return Err(Error::Fit(format!("fewer than two samples in window {window:?}")));
    }
    Ok(-ls_slope(&xs, &ys))
}

/// Observed order: least-squares slope of `log e` against `log h`.
pub fn convergence_order(errors: &[(f64, f64)]) -> Result<f64> {
    if errors.len() < 3 {
        return Err(Error::Fit(format!("need at least three grid levels, got {}", errors.len())));
    }
    if errors.iter().any(|&(h, e)| !(h > 0.0 && e > 0.0)) {
        return Err(Error::Fit("grid spacings and errors must be positive".into()));
    }
    let xs: Vec<f64> = errors.iter().map(|p| p.0.ln()).collect();
    if xs.iter().all(|&x| x == xs[0]) {
        return Err(Error::Fit("grid spacings are all equal".into()));
    }
    let ys: Vec<f64> = errors.iter().map(|p| p.1.ln()).collect();
    Ok(ls_slope(&xs, &ys))
}

fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn steps_for(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && t_end > 0.0) {
        return config(format!("need positive step and end time, got dt = {dt}, t_end = {t_end}"));
    }
    Ok((t_end / dt).round() as usize)
}

pub fn run_fig1_experiment(cfg: &Fig1Config) -> Result<ExperimentOutput> {
    let mut report = ComparisonReport::new(Experiment::Fig1, cfg)?;
    let sys = BurgersSystem::with_spacing(2.0 * PI, cfg.dx, cfg.alpha, cfg.eps)?;
    let specs: Vec<SignalSpec> = (0..sys.n)
        .map(|i| SignalSpec::lorenz(derive_seed(cfg.seed, i as u64)))
        .collect();
    let mut bank = SignalBank::direct(&specs)?;
    let xi0: Vec<f64> = bank.signals().iter().filter_map(|s| s.lorenz_state()).map(|s| s.xi).collect();
    report.metric("eps_phi_initial_mean", cfg.eps * xi0.iter().sum::<f64>() / xi0.len() as f64);

    let mut header = vec!["t".to_string()];
    header.extend((0..sys.n).map(|i| format!("u_{i}")));
    let mut table = Table::new("fig1_micro", header);
    let mut y = vec![1.0; sys.n];
    table.rows.push(std::iter::once(0.0).chain(y.iter().copied()).collect());
    let (mut lo, mut hi) = (1.0f64, 1.0f64);
    let stride = cfg.stride.max(1);
    integrate(&sys, Scheme::Rk4, &mut bank, &mut y, 0.0, cfg.dt, steps_for(cfg.t_end, cfg.dt)?, "fig1 microscale", |i, t, y| {
        for &v in y {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if i % stride == 0 {
            table.rows.push(std::iter::once(t).chain(y.iter().copied()).collect());
        }
        Ok(())
    })?;
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    report.metric("final_mean", mean);
    report.metric("final_std", sd);
    report.metric("min", lo);
    report.metric("max", hi);
    report.check("max_abs_u", lo.abs().max(hi.abs()), "<", 10.0);
    report.check("final_spatial_std", sd, ">", 0.0);
    Ok(ExperimentOutput {
        report: report.finish()?,
        tables: vec![table],
    })
}

/// Strong model and slow-manifold field stepped together from one forcing.
struct ModelWithField<'a> {
    model: &'a MacroModel,
    field: &'a Ssm1Field,
}

impl OdeSystem for ModelWithField<'_> {
    fn dim(&self) -> usize {
        self.model.dim() + self.field.dim()
    }
    fn n_inputs(&self) -> usize {
        self.model.n_inputs()
    }
    fn rhs(&self, t: f64, y: &[f64], inputs: &[f64], dy: &mut [f64]) {
        let n = self.model.dim();
        let (a, b) = y.split_at(n);
        let (da, db) = dy.split_at_mut(n);
        self.model.rhs(t, a, inputs, da);
        self.field.rhs(t, b, inputs, db);
    }
}

pub fn run_fig3_experiment(cfg: &Fig3Config) -> Result<ExperimentOutput> {
    let mut report = ComparisonReport::new(Experiment::Fig3, cfg)?;
    if cfg.window[0] < 0.0 || cfg.window[1] > cfg.t_end || cfg.window[0] >= cfg.window[1] {
        return config(format!("comparison window {:?} must lie inside [0, t_end]", cfg.window));
    }
    let h = 2.0 * PI / cfg.m as f64;
    let transient = 8.0 / continuum_rate(1, h);
    if cfg.window[0] < transient {
        report.notes.push(format!(
            "window starts at {} before the transient time 8/beta_1 = {transient}",
            cfg.window[0]
        ));
    }
    let mut mcfg = ModelConfig::new(Variant::Ssm1, cfg.alpha, cfg.eps, h, cfg.m).with_gamma(cfg.gamma);
    mcfg.dt = cfg.dt;
    let geom = mcfg.geometry()?;
    let shape = |x: f64| (2.0 * x).cos();

    // microscale: one Lorenz component across the whole fine mesh
    let n = cfg.m * cfg.points_per_element;
    let micro = BurgersSystem::new(2.0 * PI, n, cfg.alpha, cfg.eps)?;
    let xs = micro.points();
    let signal = SignalSpec::lorenz(cfg.seed).with_xi0(cfg.xi0);
    let micro_map = InputMap::from_rows(xs.iter().map(|&x| vec![(0, shape(x))]).collect());
    let mut micro_bank = SignalBank::new(std::slice::from_ref(&signal), micro_map)?;

    // macroscale modes from projecting the same spatial shape
    let proj = project_to_modes(shape, &geom, mcfg.modes, 65)?;
    let macro_map = InputMap::from_rows(proj.as_flat().iter().map(|&w| if w == 0.0 { vec![] } else { vec![(0, w)] }).collect());
    let alt = alternating_mode_map(cfg.m, mcfg.modes);
    let map_dev = macro_map
        .apply(&[1.0])
        .iter()
        .zip(alt.apply(&[1.0]))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    report.metric("projection_vs_alternating_pattern", map_dev);
    let mut macro_bank = SignalBank::new(std::slice::from_ref(&signal), macro_map)?;

    let grid_idx: Vec<usize> = (0..cfg.m).map(|e| ((geom.centre(e) / micro.dx).round()) as usize).collect();
    if grid_idx.iter().zip(0..cfg.m).any(|(&i, e)| (xs[i] - geom.centre(e)).abs() > 1e-9) {
        return config("fine grid must contain the macroscale grid points: points_per_element must be even");
    }
    let grid_forcing = grid_idx.iter().map(|&i| shape(xs[i]).abs()).fold(0.0, f64::max);
    report.metric("max_grid_point_forcing_weight", grid_forcing);

    let model = MacroModel::strong(&mcfg)?;
    let field = Ssm1Field::new(&mcfg)?;
    let pair = ModelWithField { model: &model, field: &field };
    let probe: usize = (cfg.m > 1) as usize;
    let steps = steps_for(cfg.t_end, cfg.dt)?;

    // microscale trace at X₂ and εφ(t)
    let mut u = vec![1.0; n];
    let mut micro_trace = Vec::with_capacity(steps);
    integrate(&micro, Scheme::Rk4, &mut micro_bank, &mut u, 0.0, cfg.dt, steps, "fig3 microscale", |_, _, y| {
        micro_trace.push(y[grid_idx[probe]]);
        Ok(())
    })?;
    let mut y = model.initial_state(&vec![1.0; cfg.m])?;
    y.resize(pair.dim(), 0.0);
    let md = model.dim();
    model.check_time_step(cfg.dt)?;
    let mut lorenz = crate::forcing::Signal::new(&signal)?;
    let mut table = Table::new(
        "fig3_traces",
        ["t", "u_micro_x2", "U2_macro", "v2_nsm", "eps_phi"].map(String::from).to_vec(),
    );
    let stride = cfg.stride.max(1);
    let (mut uw, mut mw, mut nw) = (Vec::new(), Vec::new(), Vec::new());
    integrate(&pair, mcfg.scheme, &mut macro_bank, &mut y, 0.0, cfg.dt, steps, "fig3 macroscale", |i, t, y| {
        let uu = &y[..cfg.m];
        let v = field.at_grid(uu, &y[md..])[probe];
        lorenz.step_stages(cfg.dt, Scheme::Rk4)?;
        let phi = lorenz.lorenz_state().map_or(0.0, |s| s.xi);
        let mu = micro_trace[i - 1];
        if t >= cfg.window[0] - 1e-12 && t <= cfg.window[1] + 1e-12 {
            uw.push(mu);
            mw.push(uu[probe]);
            nw.push(v);
        }
        if i % stride == 0 {
            table.rows.push(vec![t, mu, uu[probe], v, cfg.eps * phi]);
        }
        Ok(())
    })?;
    let rms_nsm = rms(&nw, &uw);
    let rms_macro = rms(&mw, &uw);
    report.metric("rms_nsm_vs_micro", rms_nsm);
    report.metric("rms_macro_vs_micro", rms_macro);
    if rms_macro > 0.0 {
        report.metric("error_ratio", rms_nsm / rms_macro);
    }
    report.check("rms_nsm_below_half_rms_macro", rms_nsm, "<", 0.5 * rms_macro);
    report.check("grid_point_forcing", grid_forcing, "<=", 1e-12);
    report.notes.push("threshold 0.5 is derived from own oracle runs; the figure is qualitative".into());
    Ok(ExperimentOutput {
        report: report.finish()?,
        tables: vec![table],
    })
}

/// Post-transient sup-error between the coarse lattice model and the even
/// points of the fine lattice at one `(α, ε)`.
pub fn lattice_sup_error(cfg: &LatticeConfig, alpha: f64, eps: f64) -> Result<f64> {
    let fine = LatticeSystem::new(cfg.m, cfg.h, alpha, eps)?;
    let mut mcfg = ModelConfig::new(Variant::LatticeCoarse, alpha, eps, cfg.h, cfg.m);
    mcfg.psi1 = cfg.psi1;
    mcfg.dt = cfg.dt;
    let coarse = MacroModel::strong(&mcfg)?;
    let specs: Vec<SignalSpec> = (0..2 * cfg.m)
        .map(|i| {
            let phase = cfg.wavenumber * i as f64 * cfg.h / 2.0;
            if cfg.omega == 0.0 {
                SignalSpec::constant(phase.cos())
            } else {
                SignalSpec::harmonic(cfg.omega, phase, 1.0)
            }
        })
        .collect();
    let steps = steps_for(cfg.t_end, cfg.dt)?;
    let mut fb = SignalBank::direct(&specs)?;
    let mut cb = SignalBank::direct(&specs)?;
    let mut u = vec![cfg.u0; 2 * cfg.m];
    let mut fine_even = Vec::with_capacity(steps);
    integrate(&fine, Scheme::Rk4, &mut fb, &mut u, 0.0, cfg.dt, steps, "fine lattice", |_, _, y| {
        fine_even.push((0..cfg.m).map(|j| y[2 * j]).collect::<Vec<_>>());
        Ok(())
    })?;
    let mut uc = coarse.initial_state(&vec![cfg.u0; cfg.m])?;
    let mut err: f64 = 0.0;
    coarse.run(&mut cb, &mut uc, 0.0, cfg.dt, steps, |i, t, y| {
        if t >= cfg.window[0] && t <= cfg.window[1] + 1e-12 {
            for (a, b) in y.iter().zip(&fine_even[i - 1]) {
                err = err.max((a - b).abs());
            }
        }
        Ok(())
    })?;
    Ok(err)
}

pub fn lattice_coarse_experiment(cfg: &LatticeConfig) -> Result<ExperimentOutput> {
    let mut report = ComparisonReport::new(Experiment::Lattice, cfg)?;
    if cfg.levels < 2 {
        return config("lattice sweep needs at least two levels");
    }
    let mut table = Table::new("lattice_sweep", ["level", "alpha", "eps", "sup_error"].map(String::from).to_vec());
    let mut errs = Vec::new();
    for l in 0..cfg.levels {
        let s = 0.5f64.powi(l as i32);
        let e = lattice_sup_error(cfg, cfg.alpha * s, cfg.eps * s)?;
        report.metric(format!("sup_error_level_{l}"), e);
        table.rows.push(vec![l as f64, cfg.alpha * s, cfg.eps * s, e]);
        errs.push(e);
    }
    for l in 1..errs.len() {
        let r = errs[l - 1] / errs[l];
        report.metric(format!("error_ratio_{l}"), r);
        report.check(format!("error_ratio_{l}"), r, ">=", 3.0);
    }
    let zero = lattice_sup_error(cfg, 0.0, 0.0)?;
    report.metric("sup_error_unforced_linear", zero);
    report.check("unforced_linear_agreement", zero, "<=", 1e-6);
    // constant forcing restricts exactly
    let ones = vec![1.0; 2 * cfg.m];
    let mut mcfg = ModelConfig::new(Variant::LatticeCoarse, 0.0, 1.0, cfg.h, cfg.m);
    mcfg.psi1 = cfg.psi1;
    let coarse = MacroModel::strong(&mcfg)?;
    let mut dy = vec![0.0; coarse.dim()];
    coarse.rhs(0.0, &vec![cfg.u0; cfg.m], &ones, &mut dy);
    let psi0_err = dy.iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max);
    report.metric("constant_forcing_restriction_error", psi0_err);
    report.check("constant_forcing_restriction", psi0_err, "<=", 1e-14);
    report.notes.push("ratio threshold 3 is derived from the quadratic-order expectation".into());
    Ok(ExperimentOutput {
        report: report.finish()?,
        tables: vec![table],
    })
}

/// Max error of a deterministic model part against `u_xx − α u u_x` for
/// `u = 1 + a sin x` sampled on `m` points of `[0, 2π)`.
pub fn consistency_error(det: DetKind, alpha: f64, gamma: f64, amplitude: f64, m: usize) -> f64 {
    let h = 2.0 * PI / m as f64;
    let xs: Vec<f64> = (0..m).map(|i| i as f64 * h).collect();
    let u: Vec<f64> = xs.iter().map(|x| 1.0 + amplitude * x.sin()).collect();
    xs.iter()
        .enumerate()
        .map(|(e, x)| {
            let exact = -amplitude * x.sin() - alpha * (1.0 + amplitude * x.sin()) * amplitude * x.cos();
            (det.eval(&u, e, alpha, gamma, h) - exact).abs()
        })
        .fold(0.0, f64::max)
}

/// Max error of `δ²/H² − δ⁴/(12H²)` against `−k² sin kx` on `m` points.
pub fn linear_stencil_error(k: f64, m: usize) -> f64 {
    let h = 2.0 * PI / m as f64;
    let xs: Vec<f64> = (0..m).map(|i| i as f64 * h).collect();
    let u = GridSeq::new(xs.iter().map(|x| (k * x).sin()).collect()).expect("at least three points");
    let d2 = u.delta2();
    let d4 = u.delta4();
    xs.iter()
        .enumerate()
        .map(|(i, x)| ((d2[i] - d4[i] / 12.0) / (h * h) + k * k * (k * x).sin()).abs())
        .fold(0.0, f64::max)
}

pub fn consistency_experiment(cfg: &ConsistencyConfig) -> Result<ExperimentOutput> {
    let mut report = ComparisonReport::new(Experiment::Consistency, cfg)?;
    let mut header = vec!["m".to_string(), "H".to_string()];
    let cases = [
        ("lowg", DetKind::Lowg),
        ("lattice_coarse", DetKind::LatticeCoarse),
        ("ssm1_gamma1", DetKind::Ssm1),
        ("strongquad_gamma1", DetKind::Strongquad),
    ];
    header.extend(cases.iter().map(|c| c.0.to_string()));
    header.push("linear_fourth_order".into());
    let mut table = Table::new("consistency", header);
    let mut per_case: Vec<Vec<(f64, f64)>> = vec![Vec::new(); cases.len() + 1];
    for &m in &cfg.grids {
        let h = 2.0 * PI / m as f64;
        let mut row = vec![m as f64, h];
        for (c, &(_, det)) in cases.iter().enumerate() {
            let e = consistency_error(det, cfg.alpha, 1.0, cfg.amplitude, m);
            per_case[c].push((h, e));
            row.push(e);
        }
        let e = linear_stencil_error(1.0, m);
        per_case[cases.len()].push((h, e));
        row.push(e);
        table.rows.push(row);
    }
    for (c, &(name, _)) in cases.iter().enumerate() {
        let p = convergence_order(&per_case[c])?;
        report.metric(format!("order_{name}"), p);
        report.check(format!("order_{name}"), p, ">=", 1.9);
    }
    let p = convergence_order(&per_case[cases.len()])?;
    report.metric("order_linear_fourth_order", p);
    report.check("order_linear_fourth_order", p, ">=", 3.8);
    Ok(ExperimentOutput {
        report: report.finish()?,
        tables: vec![table],
    })
}

/// Decay rate of an isolated-element perturbation `amp · shape(θ)` with
/// `γ = α = ε = 0`, fitted over `window` (in units of `1/expected`).
pub fn element_decay_rate(
    arr: &ElementArray,
    shape: impl Fn(f64) -> f64,
    amplitude: f64,
    expected: f64,
    dt: f64,
    window: [f64; 2],
) -> Result<(f64, Vec<(f64, f64)>)> {
    let arr = ElementArray { gamma: 0.0, alpha: 0.0, eps: 0.0, ..*arr };
    let mut y = arr.initial(&[1.0], |th| amplitude * shape(th));
    let t_end = window[1] / expected;
    let steps = steps_for(t_end, dt)?;
    let mut bank = SignalBank::direct(&[])?;
    let mut trace = vec![(0.0, arr.deviation(&y))];
    integrate(&arr, Scheme::Rk4, &mut bank, &mut y, 0.0, dt, steps, "isolated element", |_, t, y| {
        trace.push((t, arr.deviation(y)));
        Ok(())
    })?;
    let (t, d): (Vec<f64>, Vec<f64>) = trace.iter().copied().unzip();
    let rate = fit_emergence_rate(&t, &d, [window[0] / expected, window[1] / expected])?;
    Ok((rate, trace))
}

pub fn emergence_experiment(cfg: &EmergenceConfig) -> Result<ExperimentOutput> {
    let mut report = ComparisonReport::new(Experiment::Emergence, cfg)?;
    let h = cfg.h;
    let continuum = ElementArray::new(cfg.m, h, cfg.intervals, 0.0)?;
    let lattice = ElementArray::lattice(cfg.m, h, 0.0)?;
    let cases: [(&str, &ElementArray, usize, f64); 4] = [
        ("continuum_k1", &continuum, 1, continuum_rate(1, h)),
        ("continuum_k2", &continuum, 2, continuum_rate(2, h)),
        ("lattice_f1", &lattice, 1, 8.0 / (h * h)),
        ("lattice_f2", &lattice, 2, 16.0 / (h * h)),
    ];
    let mut table = Table::new("emergence", ["t_scaled", "continuum_k1", "continuum_k2", "lattice_f1", "lattice_f2"].map(String::from).to_vec());
    let mut traces = Vec::new();
    for (name, arr, k, expected) in cases {
        let shape = move |th: f64| crate::forcing::csn(k, th) - if k % 2 == 0 { 1.0 } else { 0.0 };
        let (rate, trace) = element_decay_rate(arr, shape, cfg.amplitude, expected, cfg.dt, cfg.window)?;
        report.metric(format!("rate_{name}"), rate);
        report.metric(format!("expected_{name}"), expected);
        let rel = (rate / expected - 1.0).abs();
        report.metric(format!("relative_error_{name}"), rel);
        report.check(format!("rate_{name}"), rel, "<=", 0.02);
        traces.push((expected, trace));
    }
    // deviation traces on a common scaled time axis β t
    let samples = 60;
    for s in 0..=samples {
        let ts = cfg.window[1] * s as f64 / samples as f64;
        let mut row = vec![ts];
        for (expected, trace) in &traces {
            let t = ts / expected;
            let i = trace.partition_point(|p| p.0 < t).min(trace.len() - 1);
            row.push(trace[i].1);
        }
        table.rows.push(row);
    }
    Ok(ExperimentOutput {
        report: report.finish()?,
        tables: vec![table],
    })
}

/// One harmonic drift comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarmonicCase {
    pub rates: [f64; 2],
    pub two_rate: bool,
    pub omega_mu: f64,
    pub omega_rho: f64,
    pub phase: f64,
}

impl HarmonicCase {
    fn rates(&self) -> &[f64] {
        if self.two_rate {
            &self.rates
        } else {
            &self.rates[..1]
        }
    }

    /// Largest drift magnitude over phases at matched frequency.
    fn scale(&self) -> f64 {
        let w2 = self.omega_mu * self.omega_mu;
        0.5 / self.rates().iter().map(|b| (b * b + w2).sqrt()).product::<f64>()
    }
}

/// Nine single-rate and nine two-rate cases, each set with three unequal
/// frequency pairs and one vanishing numerator.
pub fn harmonic_cases() -> Vec<HarmonicCase> {
    let one = |b: f64, wm: f64, wr: f64, p: f64| HarmonicCase {
        rates: [b, 0.0],
        two_rate: false,
        omega_mu: wm,
        omega_rho: wr,
        phase: p,
    };
    let two = |l: f64, k: f64, wm: f64, wr: f64, p: f64| HarmonicCase {
        rates: [l, k],
        two_rate: true,
        omega_mu: wm,
        omega_rho: wr,
        phase: p,
    };
    vec![
        one(1.0, 1.0, 1.0, 0.0),
        one(2.0, 1.0, 1.0, PI / 2.0),
        one(4.0, 2.0, 2.0, 0.7),
        one(1.0, 3.0, 3.0, -1.2),
        one(9.0, 0.5, 0.5, 2.5),
        one(0.5, 4.0, 4.0, 0.3),
        one(1.0, 1.0, 2.0, 0.0),
        one(4.0, 3.0, 1.5, 0.4),
        one(2.0, 0.5, 2.5, 1.0),
        two(1.0, 4.0, 2.0, 2.0, 0.0),
        two(1.0, 4.0, 1.0, 1.0, 0.0),
        two(1.5, 3.0, 1.2, 1.2, 0.7),
        two(4.0, 16.0, 2.0, 2.0, PI / 2.0),
        two(2.0, 2.0, 3.0, 3.0, -0.5),
        two(1.0, 9.0, 0.5, 0.5, 1.3),
        two(1.0, 4.0, 1.0, 3.0, 0.0),
        two(2.0, 5.0, 2.0, 0.7, 0.9),
        two(1.0, 2.0, 4.0, 1.0, -0.3),
    ]
}

/// Long-time average of the strong model's quadratic terms at frozen
/// `U ≡ 1` under `cos ωt` forcing, and the weak model's replacement drift.
pub fn harmonic_drift_fidelity(variant: Variant, alpha: f64, eps: f64, omega: f64, periods: f64) -> Result<(f64, f64)> {
    let h = PI / 2.0;
    let m = 4;
    let mut mcfg = ModelConfig::new(variant, alpha, eps, h, m);
    let spec = SignalSpec::harmonic(omega, 0.0, 1.0);
    let map = alternating_mode_map(m, mcfg.modes);
    let weak = build_weak_model(&mcfg, std::slice::from_ref(&spec), &map)?;
    let u = vec![1.0; m];
    let mut dw = vec![0.0; m];
    // at constant U with zero forcing only the drift survives
    weak.model.rhs(0.0, &u, &vec![0.0; weak.model.n_inputs()], &mut dw);
    let weak_drift = dw[0];

    mcfg.variant = variant.strong_base();
    let strong = MacroModel::strong(&mcfg)?;
    let frozen = FnSystem {
        dim: strong.dim(),
        n_inputs: strong.n_inputs(),
        f: |t: f64, y: &[f64], inp: &[f64], dy: &mut [f64]| {
            strong.rhs(t, y, inp, dy);
            dy[..m].iter_mut().for_each(|d| *d = 0.0);
        },
    };
    let period = 2.0 * PI / omega;
    let per = (period / 1e-3).ceil() as usize;
    let dt = period / per as f64;
    let skip = (10.0 / continuum_rate(1, h) / period).ceil() as usize * per;
    let total = skip + (periods.round() as usize) * per;
    strong.check_time_step(dt)?;
    let mut bank = SignalBank::new(std::slice::from_ref(&spec), map.clone())?;
    let mut y = strong.initial_state(&u)?;
    let (mut acc, mut prev, mut n) = (0.0, None::<f64>, 0usize);
    integrate(&frozen, Scheme::Rk4, &mut bank, &mut y, 0.0, dt, total, "frozen strong model", |i, t, y| {
        let phi = (omega * t).cos();
        let q = strong.quadratic_part(y, &map.apply(&[phi]))[0];
        if i >= skip {
            if let Some(p) = prev {
                acc += 0.5 * (p + q);
                n += 1;
            }
            prev = Some(q);
        }
        Ok(())
    })?;
    Ok((acc / n as f64, weak_drift))
}

pub fn weak_drift_experiment(cfg: &WeakDriftConfig) -> Result<ExperimentOutput> {
    let mut report = ComparisonReport::new(Experiment::WeakDrift, cfg)?;
    let mut table = Table::new(
        "weak_drift_harmonic",
        ["rate_1", "rate_2", "omega_mu", "omega_rho", "phase", "formula", "time_average"].map(String::from).to_vec(),
    );
    let mut worst1: f64 = 0.0;
    let mut worst2: f64 = 0.0;
    for c in harmonic_cases() {
        let f = harmonic_drift(c.rates(), c.omega_mu, c.omega_rho, c.phase)?;
        let t_end = cfg.periods * 2.0 * PI / c.omega_mu.min(c.omega_rho);
        let avg = harmonic_time_average(c.rates(), c.omega_mu, c.omega_rho, c.phase, t_end, 2e-3)?;
        let tol = if f != 0.0 { f.abs() } else { c.scale() };
        let rel = (avg - f).abs() / tol;
        if c.two_rate {
            worst2 = worst2.max(rel);
        } else {
            worst1 = worst1.max(rel);
        }
        table.rows.push(vec![
            c.rates[0],
            if c.two_rate { c.rates[1] } else { 0.0 },
            c.omega_mu,
            c.omega_rho,
            c.phase,
            f,
            avg,
        ]);
    }
    report.check("harmonic_single_rate_worst_relative", worst1, "<=", 0.01);
    report.check("harmonic_two_rate_worst_relative", worst2, "<=", 0.01);

    let t_end = cfg.t_end / cfg.beta;
    let same = stochastic_ensemble(&[cfg.beta], true, cfg.paths, t_end, cfg.dt, cfg.seed)?;
    let ind = stochastic_ensemble(&[cfg.beta], false, cfg.paths, t_end, cfg.dt, derive_seed(cfg.seed, 99))?;
    report.metric("same_signal_mean_rate", same.mean_rate);
    report.metric("same_signal_std_err", same.std_err);
    report.metric("independent_mean_rate", ind.mean_rate);
    report.metric("independent_std_err", ind.std_err);
    report.check("same_signal_drift_in_std_errs", (same.mean_rate - 0.5).abs() / same.std_err, "<=", 3.0);
    report.check("independent_drift_in_std_errs", ind.mean_rate.abs() / ind.std_err, "<=", 3.0);
    let expect_var = single_rate_variance(cfg.beta, same.t_end);
    let var_se = same.variance * (2.0 / (cfg.paths as f64 - 1.0)).sqrt();
    report.metric("same_signal_variance", same.variance);
    report.metric("expected_variance", expect_var);
    report.check("noise_amplitude_variance_in_std_errs", (same.variance - expect_var).abs() / var_se, "<=", 3.0);

    let (strong, weak) = harmonic_drift_fidelity(Variant::WeakSsm1, cfg.alpha, cfg.eps, cfg.omega, cfg.periods)?;
    report.metric("ssm1_strong_quadratic_mean", strong);
    report.metric("ssm1_weak_drift", weak);
    report.check("ssm1_drift_fidelity_relative", (strong - weak).abs() / weak.abs(), "<=", 0.02);
    Ok(ExperimentOutput {
        report: report.finish()?,
        tables: vec![table],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn emergence_fit_synthetic() {
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 0.01).collect();
        let d: Vec<f64> = t.iter().map(|t| (-3.0 * t).exp()).collect();
        assert_abs_diff_eq!(fit_emergence_rate(&t, &d, [0.0, 2.0]).unwrap(), 3.0, epsilon = 1e-6);
        let mut bad = d.clone();
        bad[50] = 0.0;
        assert!(matches!(fit_emergence_rate(&t, &bad, [0.0, 2.0]), Err(Error::Fit(_))));
    }

    #[test]
    fn order_of_exact_power() {
        let e: Vec<(f64, f64)> = [0.1, 0.05, 0.025].iter().map(|&h| (h, h * h)).collect();
        assert_abs_diff_eq!(convergence_order(&e).unwrap(), 2.0, epsilon = 1e-12);
        assert!(convergence_order(&e[..2]).is_err());
        assert!(convergence_order(&[(0.1, 1.0), (0.1, 1.0), (0.1, 2.0)]).is_err());
        assert!(convergence_order(&[(0.1, 1.0), (0.05, 0.0), (0.02, 2.0)]).is_err());
    }

    #[test]
    fn stencil_orders() {
        let lin: Vec<(f64, f64)> = [16, 32, 64].iter().map(|&m| (2.0 * PI / m as f64, linear_stencil_error(1.0, m))).collect();
        assert!(convergence_order(&lin).unwrap() >= 3.8);
        let d2: Vec<(f64, f64)> = [16, 32, 64]
            .iter()
            .map(|&m| (2.0 * PI / m as f64, consistency_error(DetKind::LatticeCoarse, 0.0, 1.0, 1.0, m)))
            .collect();
        assert!(convergence_order(&d2).unwrap() >= 1.9);
    }

    #[test]
    fn config_sections_default() {
        let c: HarnessConfig = serde_json::from_str(r#"{"fig3": {"t_end": 5.0, "window": [1.0, 5.0]}}"#).unwrap();
        assert_eq!(c.fig3.t_end, 5.0);
        assert_eq!(c.fig3.alpha, 0.3);
        assert_eq!(c.lattice, LatticeConfig::default());
        assert!(serde_json::from_str::<HarnessConfig>(r#"{"fig3": {"bogus": 1}}"#).is_err());
        assert_eq!("weak-drift".parse::<Experiment>().unwrap(), Experiment::WeakDrift);
    }

    #[test]
    fn unforced_fig3_traces_coincide() {
        let cfg = Fig3Config {
            eps: 0.0,
            t_end: 2.0,
            window: [1.0, 2.0],
            points_per_element: 16,
            ..Default::default()
        };
        let out = run_fig3_experiment(&cfg).unwrap();
        assert!(out.report.get("rms_nsm_vs_micro").unwrap() <= 1e-6);
        assert!(out.report.get("rms_macro_vs_micro").unwrap() <= 1e-6);
        assert!(out.report.get("max_grid_point_forcing_weight").unwrap() <= 1e-12);
        assert!(out.report.get("projection_vs_alternating_pattern").unwrap() <= 1e-12);
    }

    #[test]
    fn report_is_versioned_and_embeds_config() {
        let out = consistency_experiment(&ConsistencyConfig::default()).unwrap();
        assert_eq!(out.report.schema_version, SCHEMA_VERSION);
        assert_eq!(out.report.config["alpha"], 0.3);
        assert!(out.report.passed(), "{:?}", out.report.checks);
    }
}
