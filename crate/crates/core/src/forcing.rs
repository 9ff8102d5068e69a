//! Nonautonomous forcing: scalar signal generators, the signal bank that
//! samples them per integrator stage, and projection of spatial fields onto
//! the per-element `csn kθ` basis.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::stepper::{Scheme, Stages};

pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_RHO: f64 = 28.0;
pub const LORENZ_BETA: f64 = 8.0 / 3.0;

/// One Lorenz triple driving a forcing signal through its first component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorenzState {
    pub xi: f64,
    pub eta: f64,
    pub zeta: f64,
}

impl LorenzState {
    pub fn new(xi: f64, eta: f64, zeta: f64) -> Self {
        LorenzState { xi, eta, zeta }
    }

    fn axpy(self, a: f64, d: LorenzState) -> LorenzState {
        LorenzState {
            xi: self.xi + a * d.xi,
            eta: self.eta + a * d.eta,
            zeta: self.zeta + a * d.zeta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.xi.is_finite() && self.eta.is_finite() && self.zeta.is_finite()
    }

    /// Classic RK4 step; also returns the three intermediate stage states.
    pub fn rk4(self, dt: f64) -> (LorenzState, [LorenzState; 3]) {
        let k1 = lorenz_rhs(self);
        let s2 = self.axpy(0.5 * dt, k1);
        let k2 = lorenz_rhs(s2);
        let s3 = self.axpy(0.5 * dt, k2);
        let k3 = lorenz_rhs(s3);
        let s4 = self.axpy(dt, k3);
        let k4 = lorenz_rhs(s4);
        let next = LorenzState {
            xi: self.xi + dt / 6.0 * (k1.xi + 2.0 * k2.xi + 2.0 * k3.xi + k4.xi),
            eta: self.eta + dt / 6.0 * (k1.eta + 2.0 * k2.eta + 2.0 * k3.eta + k4.eta),
            zeta: self.zeta + dt / 6.0 * (k1.zeta + 2.0 * k2.zeta + 2.0 * k3.zeta + k4.zeta),
        };
        (next, [s2, s3, s4])
    }
}

/// Lorenz vector field with the standard parameters (10, 28, 8/3).
pub fn lorenz_rhs(s: LorenzState) -> LorenzState {
    LorenzState {
        xi: LORENZ_SIGMA * (s.eta - s.xi),
        eta: s.xi * (LORENZ_RHO - s.zeta) - s.eta,
        zeta: s.xi * s.eta - LORENZ_BETA * s.zeta,
    }
}

/// Signal description as it appears in run config files.
///
/// ```json
/// {"kind": "harmonic", "omega": 2.0, "phase": 0.0, "amplitude": 1.0}
/// ```
///
/// `constant` reads its value from `amplitude`; `lorenz` scales `ξ(t)` by
/// `amplitude` and starts from `(xi0 or 5, 8, N(10, 1))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub kind: SignalKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi0: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKindName {
    Lorenz,
    Harmonic,
    WhiteNoise,
    Constant,
    File,
}

/// Validated signal kind.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalKind {
    Lorenz { amplitude: f64, xi0: Option<f64> },
    Harmonic { omega: f64, phase: f64, amplitude: f64 },
    WhiteNoise { intensity: f64 },
    Constant { value: f64 },
    File { path: PathBuf },
}

impl SignalSpec {
    pub fn harmonic(omega: f64, phase: f64, amplitude: f64) -> Self {
        SignalSpec {
            omega: Some(omega),
            phase: Some(phase),
            amplitude: Some(amplitude),
            ..Self::bare(SignalKindName::Harmonic)
        }
    }

    pub fn constant(value: f64) -> Self {
        SignalSpec {
            amplitude: Some(value),
            ..Self::bare(SignalKindName::Constant)
        }
    }

    pub fn white_noise(intensity: f64, seed: u64) -> Self {
        SignalSpec {
            intensity: Some(intensity),
            seed,
            ..Self::bare(SignalKindName::WhiteNoise)
        }
    }

    pub fn lorenz(seed: u64) -> Self {
        SignalSpec {
            seed,
            ..Self::bare(SignalKindName::Lorenz)
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> Self {
        SignalSpec {
            path: Some(path.into()),
            ..Self::bare(SignalKindName::File)
        }
    }

    fn bare(kind: SignalKindName) -> Self {
        SignalSpec {
            kind,
            omega: None,
            phase: None,
            amplitude: None,
            intensity: None,
            seed: 0,
            path: None,
            xi0: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_xi0(mut self, xi0: f64) -> Self {
        self.xi0 = Some(xi0);
        self
    }

    pub fn resolve(&self) -> Result<SignalKind> {
        let amplitude = self.amplitude.unwrap_or(1.0);
        Ok(match self.kind {
            SignalKindName::Lorenz => SignalKind::Lorenz {
                amplitude,
                xi0: self.xi0,
            },
            SignalKindName::Harmonic => {
                let omega = self.omega.unwrap_or(1.0);
                if !(omega > 0.0 && omega.is_finite()) {
                    return config(format!("harmonic signal needs omega > 0, got {omega}"));
                }
                SignalKind::Harmonic {
                    omega,
                    phase: self.phase.unwrap_or(0.0),
                    amplitude,
                }
            }
            SignalKindName::WhiteNoise => {
                let intensity = self.intensity.unwrap_or(1.0);
                if !(intensity >= 0.0 && intensity.is_finite()) {
                    return config(format!("white noise needs intensity >= 0, got {intensity}"));
                }
                SignalKind::WhiteNoise { intensity }
            }
            SignalKindName::Constant => SignalKind::Constant {
                value: self.amplitude.unwrap_or(0.0),
            },
            SignalKindName::File => match &self.path {
                Some(p) => SignalKind::File { path: p.clone() },
                None => return config("file signal needs a path"),
            },
        })
    }

    /// Parses either inline JSON or the shorthand `kind[:key=value,...]`,
    /// e.g. `harmonic:omega=2,phase=0.5` or `white-noise:intensity=1,seed=7`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            return Ok(serde_json::from_str(s)?);
        }
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let kind = match kind {
            "lorenz" => SignalKindName::Lorenz,
            "harmonic" => SignalKindName::Harmonic,
            "white-noise" | "white" | "noise" => SignalKindName::WhiteNoise,
            "constant" => SignalKindName::Constant,
            "file" => SignalKindName::File,
            other => return config(format!("unknown signal kind `{other}`")),
        };
        let mut spec = Self::bare(kind);
        for kv in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = match kv.split_once('=') {
                Some(p) => p,
                None if kind == SignalKindName::Constant => ("value", kv),
                None if kind == SignalKindName::File => ("path", kv),
                None => return config(format!("expected key=value, got `{kv}`")),
            };
            let num = || -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad number `{v}` for `{k}`")))
            };
            match k {
                "omega" => spec.omega = Some(num()?),
                "phase" => spec.phase = Some(num()?),
                "amplitude" | "value" => spec.amplitude = Some(num()?),
                "intensity" => spec.intensity = Some(num()?),
                "xi0" => spec.xi0 = Some(num()?),
                "seed" => {
                    spec.seed = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad seed `{v}`")))?
                }
                "path" => spec.path = Some(PathBuf::from(v)),
                other => return config(format!("unknown signal key `{other}`")),
            }
        }
        spec.resolve()?;
        Ok(spec)
    }
}

/// SplitMix64 mix of a base seed with a stream index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Two-column `(t, value)` table, linearly interpolated.
#[derive(Debug, Clone)]
pub struct SampledTable {
    path: PathBuf,
    t: Vec<f64>,
    v: Vec<f64>,
}

impl SampledTable {
    pub fn read(path: &Path) -> Result<Self> {
        let data_err = |reason: String| Error::Data {
            path: path.to_path_buf(),
            reason,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| data_err(e.to_string()))?;
        let (mut t, mut v) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(|e| data_err(e.to_string()))?;
            if rec.len() < 2 {
                return Err(data_err(format!("row {} has fewer than two columns", t.len() + 1)));
            }
            let (a, b) = (rec[0].parse::<f64>(), rec[1].parse::<f64>());
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    if let Some(&last) = t.last() {
                        if a <= last {
                            return Err(data_err(format!("times not increasing at t = {a}")));
                        }
                    }
                    t.push(a);
                    v.push(b);
                }
                // tolerate a single header row
                _ if t.is_empty() => continue,
                _ => return Err(data_err(format!("non-numeric row after t = {:?}", t.last()))),
            }
        }
        if t.len() < 2 {
            return Err(data_err("need at least two samples".into()));
        }
        Ok(SampledTable {
            path: path.to_path_buf(),
            t,
            v,
        })
    }

    pub fn eval(&self, at: f64) -> Result<f64> {
        let (t0, t1) = (self.t[0], *self.t.last().unwrap());
        let tol = 1e-9 * (t1 - t0).abs().max(1.0);
        if at < t0 - tol || at > t1 + tol {
            return Err(Error::Data {
                path: self.path.clone(),
                reason: format!("signal requested at t = {at}, table covers [{t0}, {t1}]"),
            });
        }
        let at = at.clamp(t0, t1);
        let i = match self.t.partition_point(|&x| x <= at) {
            0 => 0,
            i if i >= self.t.len() => self.t.len() - 2,
            i => i - 1,
        };
        let w = (at - self.t[i]) / (self.t[i + 1] - self.t[i]);
        Ok(self.v[i] + w * (self.v[i + 1] - self.v[i]))
    }
}

#[derive(Debug, Clone)]
enum Source {
    Lorenz { state: LorenzState, amplitude: f64 },
    Harmonic { omega: f64, phase: f64, amplitude: f64 },
    WhiteNoise { intensity: f64, rng: ChaCha8Rng },
    Constant(f64),
    File(SampledTable),
}

/// A running scalar signal. Owns its own RNG stream.
#[derive(Debug, Clone)]
pub struct Signal {
    spec: SignalSpec,
    t: f64,
    source: Source,
}

impl Signal {
    pub fn new(spec: &SignalSpec) -> Result<Self> {
        let source = match spec.resolve()? {
            SignalKind::Lorenz { amplitude, xi0 } => {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                let z: f64 = rng.sample(StandardNormal);
                Source::Lorenz {
                    state: LorenzState::new(xi0.unwrap_or(5.0), 8.0, 10.0 + z),
                    amplitude,
                }
            }
            SignalKind::Harmonic {
                omega,
                phase,
                amplitude,
            } => Source::Harmonic {
                omega,
                phase,
                amplitude,
            },
            SignalKind::WhiteNoise { intensity } => Source::WhiteNoise {
                intensity,
                rng: ChaCha8Rng::seed_from_u64(spec.seed),
            },
            SignalKind::Constant { value } => Source::Constant(value),
            SignalKind::File { path } => Source::File(SampledTable::read(&path)?),
        };
        Ok(Signal {
            spec: spec.clone(),
            t: 0.0,
            source,
        })
    }

    pub fn spec(&self) -> &SignalSpec {
        &self.spec
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn is_white_noise(&self) -> bool {
        matches!(self.source, Source::WhiteNoise { .. })
    }

    pub fn lorenz_state(&self) -> Option<LorenzState> {
        match self.source {
            Source::Lorenz { state, .. } => Some(state),
            _ => None,
        }
    }

    /// Value of a deterministic signal at an arbitrary time. Lorenz and white
    /// noise are stateful and return `None`.
    pub fn sample_at(&self, t: f64) -> Option<Result<f64>> {
        match &self.source {
            Source::Harmonic {
                omega,
                phase,
                amplitude,
            } => Some(Ok(amplitude * (omega * t + phase).cos())),
            Source::Constant(c) => Some(Ok(*c)),
            Source::File(tab) => Some(tab.eval(t)),
            Source::Lorenz { .. } | Source::WhiteNoise { .. } => None,
        }
    }

    /// Values at each stage of one step from the current time, then advance.
    /// White noise returns one `N(0, q)/√dt` draw held across the step.
    pub fn step_stages(&mut self, dt: f64, scheme: Scheme) -> Result<Vec<f64>> {
        if !(dt > 0.0) {
            return config(format!("time step must be positive, got {dt}"));
        }
        let offs = scheme.stage_offsets();
        let t = self.t;
        let out = match &mut self.source {
            Source::Lorenz { state, amplitude } => {
                let (next, [s2, s3, s4]) = state.rk4(dt);
                let vals = match scheme {
                    Scheme::Rk4 => vec![state.xi, s2.xi, s3.xi, s4.xi],
                    Scheme::Heun => vec![state.xi, next.xi],
                    Scheme::Euler | Scheme::EulerMaruyama => vec![state.xi],
                };
                *state = next;
                vals.into_iter().map(|x| *amplitude * x).collect()
            }
            Source::WhiteNoise { intensity, rng } => {
                let z: f64 = rng.sample(StandardNormal);
                vec![intensity.sqrt() * z / dt.sqrt(); offs.len()]
            }
            Source::Harmonic {
                omega,
                phase,
                amplitude,
            } => offs
                .iter()
                .map(|c| *amplitude * (*omega * (t + c * dt) + *phase).cos())
                .collect(),
            Source::Constant(c) => vec![*c; offs.len()],
            Source::File(tab) => offs
                .iter()
                .map(|c| tab.eval(t + c * dt))
                .collect::<Result<_>>()?,
        };
        self.t += dt;
        Ok(out)
    }
}

/// Sparse linear map from signal values to system inputs.
#[derive(Debug, Clone, Default)]
pub struct InputMap {
    rows: Vec<Vec<(usize, f64)>>,
}

impl InputMap {
    pub fn identity(n: usize) -> Self {
        InputMap {
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        InputMap { rows }
    }

    pub fn n_outputs(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// Append `other`, whose columns refer to signals offset by `col_offset`.
    pub fn stacked(mut self, other: &InputMap, col_offset: usize) -> Self {
        self.rows.extend(
            other
                .rows
                .iter()
                .map(|r| r.iter().map(|&(c, w)| (c + col_offset, w)).collect()),
        );
        self
    }

    pub fn apply(&self, signals: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|&(c, w)| w * signals[c]).sum())
            .collect()
    }
}

/// A set of signals advanced in lockstep, with a map onto system inputs.
#[derive(Debug, Clone)]
pub struct SignalBank {
    signals: Vec<Signal>,
    map: InputMap,
}

impl SignalBank {
    pub fn new(specs: &[SignalSpec], map: InputMap) -> Result<Self> {
        let signals = specs.iter().map(Signal::new).collect::<Result<Vec<_>>>()?;
        for row in map.rows() {
            if let Some(&(c, _)) = row.iter().find(|(c, _)| *c >= signals.len()) {
                return config(format!("input map references signal {c} of {}", signals.len()));
            }
        }
        Ok(SignalBank { signals, map })
    }

    /// Every signal feeds the input of the same index.
    pub fn direct(specs: &[SignalSpec]) -> Result<Self> {
        Self::new(specs, InputMap::identity(specs.len()))
    }

    pub fn signals(&self) -> &[Signal] {
        &self.signals
    }

    pub fn map(&self) -> &InputMap {
        &self.map
    }

    pub fn n_inputs(&self) -> usize {
        self.map.n_outputs()
    }

    pub fn has_white_noise(&self) -> bool {
        self.signals.iter().any(Signal::is_white_noise)
    }

    pub fn time(&self) -> f64 {
        self.signals.first().map_or(0.0, Signal::time)
    }

    /// Raw signal values at each stage of the next step (signal-major per
    /// stage), then advance all signals by `dt`.
    pub fn step_raw(&mut self, dt: f64, scheme: Scheme) -> Result<Vec<Vec<f64>>> {
        scheme.check_white_noise(self.has_white_noise())?;
        let per_signal = self
            .signals
            .iter_mut()
            .map(|s| s.step_stages(dt, scheme))
            .collect::<Result<Vec<_>>>()?;
        let n_stages = scheme.stage_offsets().len();
        Ok((0..n_stages)
            .map(|k| per_signal.iter().map(|v| v[k]).collect())
            .collect())
    }

    /// Mapped inputs at each stage of the next step, then advance.
    pub fn step(&mut self, dt: f64, scheme: Scheme) -> Result<Stages> {
        let raw = self.step_raw(dt, scheme)?;
        Ok(Stages {
            values: raw.iter().map(|v| self.map.apply(v)).collect(),
        })
    }
}

/// `csn kθ`: `cos kθ` for even `k`, `sin kθ` for odd `k`.
pub fn csn(k: usize, theta: f64) -> f64 {
    if k % 2 == 0 {
        (k as f64 * theta).cos()
    } else {
        (k as f64 * theta).sin()
    }
}

/// Periodic array of `m` overlapping elements of spacing `H`, with centres
/// `X_j = x0 + (j − ½)H` for `j = 1..m`, so `L = mH`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementGeometry {
    pub m: usize,
    pub h: f64,
    #[serde(default)]
    pub x0: f64,
}

impl ElementGeometry {
    pub fn new(m: usize, h: f64) -> Result<Self> {
        if m < 3 {
            return config(format!("need at least 3 elements, got {m}"));
        }
        if !(h > 0.0 && h.is_finite()) {
            return config(format!("element size must be positive, got {h}"));
        }
        Ok(ElementGeometry { m, h, x0: 0.0 })
    }

    pub fn length(&self) -> f64 {
        self.m as f64 * self.h
    }

    /// Centre of the element with zero-based index `e` (one-based index `e + 1`).
    pub fn centre(&self, e: usize) -> f64 {
        self.x0 + (e as f64 + 0.5) * self.h
    }

    /// Subgrid angle `θ = π(x − X_j)/H`.
    pub fn theta(&self, e: usize, x: f64) -> f64 {
        PI * (x - self.centre(e)) / self.h
    }

    /// Sign of the upper alternative `±` for one-based index `j = e + 1`:
    /// `+1` for even `j`.
    pub fn parity_sign(e: usize) -> f64 {
        if (e + 1) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Per-element `csn`-mode coefficients `φ_{j,k}` at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingModes {
    m: usize,
    k: usize,
    coeffs: Vec<f64>,
}

impl ForcingModes {
    pub fn zeros(m: usize, k: usize) -> Self {
        ForcingModes {
            m,
            k,
            coeffs: vec![0.0; m * k],
        }
    }

    /// From an input slice laid out element-major, `φ[e * K + k]`.
    pub fn from_flat(m: usize, k: usize, coeffs: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return config("need at least one forcing mode");
        }
        if coeffs.len() != m * k {
            return config(format!("expected {} mode coefficients, got {}", m * k, coeffs.len()));
        }
        Ok(ForcingModes { m, k, coeffs })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_modes(&self) -> usize {
        self.k
    }

    /// Periodic in the element index.
    pub fn get(&self, e: isize, k: usize) -> f64 {
        let e = e.rem_euclid(self.m as isize) as usize;
        self.coeffs[e * self.k + k]
    }

    pub fn set(&mut self, e: usize, k: usize, v: f64) {
        self.coeffs[e * self.k + k] = v;
    }

    /// Mode `k` across all elements.
    pub fn mode(&self, k: usize) -> Vec<f64> {
        (0..self.m).map(|e| self.coeffs[e * self.k + k]).collect()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.coeffs
    }
}

/// Coefficients of samples taken uniformly over the closed half-element
/// `θ ∈ [−π/2, π/2]`, by trapezoid quadrature against each `csn kθ`.
///
/// On this interval the `csn` family is orthogonal and the trapezoid rule is
/// exact for every product of two `csn` functions once the sample count
/// exceeds the largest wavenumber pair, so finite `csn` sums are reproduced
/// exactly.
pub fn project_samples(samples: &[f64], n_modes: usize) -> Result<Vec<f64>> {
    let needed = 2 * n_modes + 1;
    if n_modes == 0 {
        return config("need at least one forcing mode");
    }
    if samples.len() < needed {
        return Err(Error::Resolution {
            needed,
            got: samples.len(),
        });
    }
    let n = samples.len() - 1;
    let dth = PI / n as f64;
    let weight = |i: usize| if i == 0 || i == n { 0.5 * dth } else { dth };
    Ok((0..n_modes)
        .map(|k| {
            let (mut num, mut den) = (0.0, 0.0);
            for (i, &f) in samples.iter().enumerate() {
                let c = csn(k, -0.5 * PI + i as f64 * dth);
                num += weight(i) * f * c;
                den += weight(i) * c * c;
            }
            num / den
        })
        .collect())
}

/// Project a spatial field onto `n_modes` csn modes in every element, using
/// `points` samples over each non-overlapping interval `|x − X_j| ≤ H/2`.
pub fn project_to_modes(
    field: impl Fn(f64) -> f64,
    geom: &ElementGeometry,
    n_modes: usize,
    points: usize,
) -> Result<ForcingModes> {
    let mut out = ForcingModes::zeros(geom.m, n_modes.max(1));
    let mut buf = vec![0.0; points];
    for e in 0..geom.m {
        let xc = geom.centre(e);
        for (i, b) in buf.iter_mut().enumerate() {
            let th = -0.5 * PI + PI * i as f64 / (points.max(2) - 1) as f64;
            *b = field(xc + th * geom.h / PI);
        }
        let c = project_samples(&buf, n_modes)?;
        for (k, v) in c.into_iter().enumerate() {
            out.set(e, k, v);
        }
    }
    Ok(out)
}

/// Modes of the single alternating pattern `φ_{j,1} = (−1)^j φ(t)` that
/// `φ(x, t) = φ(t) cos 2x` produces on `H = π/2` elements centred at
/// `(2j − 1)π/4`, as an [`InputMap`] from one signal.
pub fn alternating_mode_map(m: usize, n_modes: usize) -> InputMap {
    let mut rows = vec![Vec::new(); m * n_modes];
    for e in 0..m {
        let j = e + 1;
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        if n_modes > 1 {
            rows[e * n_modes + 1] = vec![(0, sign)];
        }
    }
    InputMap::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lorenz_fixed_points() {
        assert_eq!(lorenz_rhs(LorenzState::new(0.0, 0.0, 0.0)), LorenzState::new(0.0, 0.0, 0.0));
        let c = (LORENZ_BETA * (LORENZ_RHO - 1.0)).sqrt();
        assert_abs_diff_eq!(c, 72f64.sqrt(), epsilon = 1e-12);
        let d = lorenz_rhs(LorenzState::new(c, c, 27.0));
        assert_abs_diff_eq!(d.xi, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.eta, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.zeta, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lorenz_direct_substitution() {
        let d = lorenz_rhs(LorenzState::new(5.0, 8.0, 10.0));
        assert_eq!(d.xi, 30.0);
        assert_eq!(d.eta, 82.0);
        assert_abs_diff_eq!(d.zeta, 40.0 - 80.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn lorenz_divergence_is_constant() {
        // Jacobian trace by central differences at arbitrary points
        for &(x, y, z) in &[(1.0, 2.0, 3.0), (-7.0, 4.0, 30.0), (12.0, -9.0, 1.0)] {
            let h = 1e-5;
            let s = LorenzState::new(x, y, z);
            let dx = (lorenz_rhs(LorenzState { xi: x + h, ..s }).xi
                - lorenz_rhs(LorenzState { xi: x - h, ..s }).xi)
                / (2.0 * h);
            let dy = (lorenz_rhs(LorenzState { eta: y + h, ..s }).eta
                - lorenz_rhs(LorenzState { eta: y - h, ..s }).eta)
                / (2.0 * h);
            let dz = (lorenz_rhs(LorenzState { zeta: z + h, ..s }).zeta
                - lorenz_rhs(LorenzState { zeta: z - h, ..s }).zeta)
                / (2.0 * h);
            assert_abs_diff_eq!(dx + dy + dz, -(10.0 + 1.0 + 8.0 / 3.0), epsilon = 1e-8);
        }
    }

    #[test]
    fn lorenz_trajectories_stay_bounded() {
        for seed in 0..8 {
            let mut s = Signal::new(&SignalSpec::lorenz(seed)).unwrap();
            let st = s.lorenz_state().unwrap();
            assert_eq!((st.xi, st.eta), (5.0, 8.0));
            for _ in 0..5000 {
                s.step_stages(0.01, Scheme::Rk4).unwrap();
                let l = s.lorenz_state().unwrap();
                assert!(l.xi.abs() < 30.0 && l.eta.abs() < 30.0);
                assert!(l.zeta > 0.0 && l.zeta < 60.0);
            }
        }
    }

    #[test]
    fn lorenz_stage_values_follow_rk4_stages() {
        let mut s = Signal::new(&SignalSpec::lorenz(3)).unwrap();
        let l0 = s.lorenz_state().unwrap();
        let v = s.step_stages(0.01, Scheme::Rk4).unwrap();
        let (next, st) = l0.rk4(0.01);
        assert_eq!(v, vec![l0.xi, st[0].xi, st[1].xi, st[2].xi]);
        assert_eq!(s.lorenz_state().unwrap(), next);
    }

    #[test]
    fn deterministic_samples() {
        let h = Signal::new(&SignalSpec::harmonic(2.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(h.sample_at(PI / 4.0).unwrap().unwrap(), 0.0, epsilon = 1e-15);
        let c = Signal::new(&SignalSpec::constant(0.7)).unwrap();
        assert_eq!(c.sample_at(123.0).unwrap().unwrap(), 0.7);
        let mut c = c;
        assert_eq!(c.step_stages(0.1, Scheme::Rk4).unwrap(), vec![0.7; 4]);
    }

    #[test]
    fn harmonic_stage_times() {
        let mut h = Signal::new(&SignalSpec::harmonic(1.0, 0.3, 2.0)).unwrap();
        h.step_stages(0.2, Scheme::Rk4).unwrap();
        let v = h.step_stages(0.2, Scheme::Rk4).unwrap();
        let f = |t: f64| 2.0 * (t + 0.3).cos();
        assert_abs_diff_eq!(v[0], f(0.2), epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], f(0.3), epsilon = 1e-15);
        assert_abs_diff_eq!(v[3], f(0.4), epsilon = 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(SignalSpec::harmonic(0.0, 0.0, 1.0).resolve().is_err());
        assert!(SignalSpec::harmonic(-1.0, 0.0, 1.0).resolve().is_err());
        assert!(SignalSpec::white_noise(-0.1, 0).resolve().is_err());
        let mut f = SignalSpec::file("x.csv");
        f.path = None;
        assert!(f.resolve().is_err());
    }

    #[test]
    fn spec_json_and_shorthand() {
        let s = SignalSpec::parse(r#"{"kind":"harmonic","omega":2.0,"phase":0.5,"amplitude":3.0}"#).unwrap();
        assert_eq!(s, SignalSpec::harmonic(2.0, 0.5, 3.0));
        assert_eq!(SignalSpec::parse("harmonic:omega=2,phase=0.5,amplitude=3").unwrap(), s);
        assert_eq!(SignalSpec::parse("constant:1.5").unwrap(), SignalSpec::constant(1.5));
        let w = SignalSpec::parse("white-noise:intensity=2,seed=9").unwrap();
        assert_eq!(w, SignalSpec::white_noise(2.0, 9));
        assert!(SignalSpec::parse("banana").is_err());
        assert!(SignalSpec::parse(r#"{"kind":"harmonic","colour":1}"#).is_err());
        let round: SignalSpec = serde_json::from_str(&serde_json::to_string(&w).unwrap()).unwrap();
        assert_eq!(round, w);
    }

    #[test]
    fn white_noise_reproducible_and_scaled() {
        let spec = SignalSpec::white_noise(4.0, 11);
        let draw = |spec: &SignalSpec| {
            let mut s = Signal::new(spec).unwrap();
            (0..2000)
                .map(|_| s.step_stages(0.01, Scheme::EulerMaruyama).unwrap()[0])
                .collect::<Vec<_>>()
        };
        let a = draw(&spec);
        assert_eq!(a, draw(&spec));
        // Var(value) = q / dt
        let var = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
        assert!((var * 0.01 / 4.0 - 1.0).abs() < 0.1, "var {var}");
        let b = draw(&SignalSpec::white_noise(4.0, 12));
        let n = a.len() as f64;
        let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
            / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt();
        assert!(corr.abs() < 3.0 / n.sqrt(), "corr {corr}");
    }

    #[test]
    fn white_noise_rejected_under_rk4() {
        let mut bank = SignalBank::direct(&[SignalSpec::white_noise(1.0, 0)]).unwrap();
        assert!(matches!(bank.step(0.01, Scheme::Rk4), Err(Error::SchemeMismatch { .. })));
        assert!(bank.step(0.01, Scheme::EulerMaruyama).is_ok());
    }

    #[test]
    fn non_positive_dt_rejected() {
        let mut s = Signal::new(&SignalSpec::white_noise(1.0, 0)).unwrap();
        assert!(s.step_stages(0.0, Scheme::EulerMaruyama).is_err());
    }

    #[test]
    fn file_signal_interpolates_and_reports_short_tables() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sig.csv");
        std::fs::write(&p, "t,value\n0,0\n1,2\n2,0\n").unwrap();
        let mut s = Signal::new(&SignalSpec::file(&p)).unwrap();
        assert_abs_diff_eq!(s.sample_at(0.25).unwrap().unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sample_at(1.5).unwrap().unwrap(), 1.0, epsilon = 1e-15);
        let v = s.step_stages(0.5, Scheme::Rk4).unwrap();
        assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-15);
        assert!(matches!(s.sample_at(2.5).unwrap(), Err(Error::Data { .. })));
        for _ in 0..3 {
            s.step_stages(0.5, Scheme::Rk4).unwrap();
        }
        assert!(s.step_stages(0.5, Scheme::Rk4).is_err());

        let missing = Signal::new(&SignalSpec::file(dir.path().join("nope.csv")));
        assert!(matches!(missing, Err(Error::Data { .. })));
        let short = dir.path().join("short.csv");
        std::fs::write(&short, "0,1\n").unwrap();
        assert!(matches!(Signal::new(&SignalSpec::file(&short)), Err(Error::Data { .. })));
    }

    #[test]
    fn csn_basis() {
        assert_eq!(csn(0, 1.3), 1.0);
        assert_abs_diff_eq!(csn(1, 0.4), 0.4f64.sin());
        assert_abs_diff_eq!(csn(2, 0.4), 0.8f64.cos());
    }

    #[test]
    fn projection_of_constant() {
        let g = ElementGeometry::new(4, PI / 2.0).unwrap();
        let modes = project_to_modes(|_| 2.5, &g, 3, 9).unwrap();
        for e in 0..4 {
            assert_abs_diff_eq!(modes.get(e as isize, 0), 2.5, epsilon = 1e-14);
            assert_abs_diff_eq!(modes.get(e as isize, 1), 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(modes.get(e as isize, 2), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn projection_of_cos2x_alternates() {
        let g = ElementGeometry::new(4, PI / 2.0).unwrap();
        let modes = project_to_modes(|x| (2.0 * x).cos(), &g, 3, 9).unwrap();
        for e in 0..4 {
            let j = e as i32 + 1;
            assert_abs_diff_eq!(modes.get(e as isize, 1), (-1f64).powi(j), epsilon = 1e-14);
            assert_abs_diff_eq!(modes.get(e as isize, 0), 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(modes.get(e as isize, 2), 0.0, epsilon = 1e-14);
        }
        let map = alternating_mode_map(4, 3);
        assert_eq!(map.apply(&[1.0]), modes.as_flat().iter().map(|v| v.round()).collect::<Vec<_>>());
    }

    #[test]
    fn projection_matches_fine_quadrature_oracle() {
        // shifted sine, not in the csn span: compare against a 10x finer
        // trapezoid inner product computed independently
        let g = ElementGeometry { m: 5, h: 0.8, x0: 0.13 };
        let field = |x: f64| (2.0 * PI * x / g.h - 0.7).sin() + 0.3 * (x * 5.0).cos();
        let (k, pts) = (4, 41);
        let modes = project_to_modes(field, &g, k, pts).unwrap();
        for e in 0..g.m {
            for kk in 0..k {
                let n = 10 * (pts - 1);
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..=n {
                    let th = -PI / 2.0 + PI * i as f64 / n as f64;
                    let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                    let c = csn(kk, th);
                    num += w * field(g.centre(e) + th * g.h / PI) * c;
                    den += w * c * c;
                }
                assert_abs_diff_eq!(modes.get(e as isize, kk), num / den, epsilon = 2e-3);
            }
        }
    }

    #[test]
    fn projection_needs_resolution() {
        assert!(matches!(project_samples(&[0.0; 6], 3), Err(Error::Resolution { needed: 7, got: 6 })));
        assert!(project_samples(&[0.0; 7], 3).is_ok());
    }

    #[test]
    fn modes_are_periodic_in_element() {
        let modes = ForcingModes::from_flat(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(modes.get(3, 1), modes.get(0, 1));
        assert_eq!(modes.get(-1, 0), modes.get(2, 0));
        assert_eq!(modes.mode(1), vec![2.0, 4.0, 6.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn projection_reproduces_csn_sums(
                coeffs in prop::collection::vec(-5.0f64..5.0, 1..6),
                extra in 0usize..3,
                pts_extra in 0usize..20,
            ) {
                let k = coeffs.len() + extra;
                let pts = 2 * k + 1 + pts_extra;
                let samples: Vec<f64> = (0..pts).map(|i| {
                    let th = -PI / 2.0 + PI * i as f64 / (pts - 1) as f64;
                    coeffs.iter().enumerate().map(|(kk, c)| c * csn(kk, th)).sum()
                }).collect();
                let got = project_samples(&samples, k).unwrap();
                for kk in 0..k {
                    let want = coeffs.get(kk).copied().unwrap_or(0.0);
                    prop_assert!((got[kk] - want).abs() < 1e-10, "mode {kk}: {} vs {want}", got[kk]);
                }
            }

            #[test]
            fn projection_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let g = ElementGeometry::new(4, 1.1).unwrap();
                let f = |x: f64| (1.3 * x).sin();
                let h = |x: f64| (0.4 * x).cos() * x;
                let pf = project_to_modes(f, &g, 3, 15).unwrap();
                let ph = project_to_modes(h, &g, 3, 15).unwrap();
                let pc = project_to_modes(|x| a * f(x) + b * h(x), &g, 3, 15).unwrap();
                for (i, v) in pc.as_flat().iter().enumerate() {
                    prop_assert!((v - (a * pf.as_flat()[i] + b * ph.as_flat()[i])).abs() < 1e-12);
                }
            }
        }
    }
}
