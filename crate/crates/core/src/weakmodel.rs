//! Weak macroscale models: every quadratic convolution term `ρ · Z μ` of a
//! strong model is replaced by its long-time effect. Harmonic pairs become
//! mean drifts; white-noise pairs become a drift plus new independent white
//! noises. The result carries no convolution chains and takes large steps.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::convolution::{check_rates, ConvChain};
use crate::error::{config, Error, Result};
use crate::forcing::{derive_seed, InputMap, SignalBank, SignalKind, SignalSpec};
use crate::macromodel::{
    continuum_rate, term_table, DetKind, ElementTerm, MacroModel, ModelConfig, QuadTerm, Source, UFactor, Variant,
};
use crate::stepper::{integrate, FnSystem, Scheme};

/// Mean of `cos(ωt + phase) · Z_β cos(ω_μ t)` with `ω = ω_ρ`.
pub fn harmonic_drift_1(beta: f64, omega_mu: f64, omega_rho: f64, phase: f64) -> f64 {
    if omega_mu != omega_rho {
        return 0.0;
    }
    let w = omega_mu;
    (beta * phase.cos() - w * phase.sin()) / (2.0 * (beta * beta + w * w))
}

/// Mean of `cos(ωt + phase) · Z_{λ,κ} cos(ω_μ t)` with `ω = ω_ρ`.
pub fn harmonic_drift_2(beta_k: f64, beta_l: f64, omega_mu: f64, omega_rho: f64, phase: f64) -> f64 {
    if omega_mu != omega_rho {
        return 0.0;
    }
    let w = omega_mu;
    let num = (beta_k * beta_l - w * w) * phase.cos() - w * (beta_k + beta_l) * phase.sin();
    num / (2.0 * (beta_k * beta_k + w * w) * (beta_l * beta_l + w * w))
}

/// Harmonic drift for a chain of one or two rates.
pub fn harmonic_drift(rates: &[f64], omega_mu: f64, omega_rho: f64, phase: f64) -> Result<f64> {
    check_rates(rates)?;
    match *rates {
        [b] => Ok(harmonic_drift_1(b, omega_mu, omega_rho, phase)),
        [l, k] => Ok(harmonic_drift_2(k, l, omega_mu, omega_rho, phase)),
        _ => config(format!("weak replacement covers one or two rates, got {}", rates.len())),
    }
}

/// Drift and new-noise amplitudes replacing `σ Z σ'` for unit-intensity
/// white noises `σ, σ'`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StochasticReplacement {
    pub drift: f64,
    /// One amplitude per new independent noise, in rate order.
    pub noises: Vec<f64>,
}

/// Single rate: drift `½` when both factors are the same signal and one new
/// noise of amplitude `1/√(2β)`. Two rates: no drift and two new noises of
/// amplitudes `1/((β_κ + β_λ)√(2β_λ))` and `1/((β_κ + β_λ)√(2β_κ))`.
pub fn stochastic_replace(rates: &[f64], same_signal: bool) -> Result<StochasticReplacement> {
    check_rates(rates)?;
    match *rates {
        [b] => Ok(StochasticReplacement {
            drift: if same_signal { 0.5 } else { 0.0 },
            noises: vec![1.0 / (2.0 * b).sqrt()],
        }),
        [a, b] => {
            let s = a + b;
            Ok(StochasticReplacement {
                drift: 0.0,
                noises: vec![1.0 / (s * (2.0 * a).sqrt()), 1.0 / (s * (2.0 * b).sqrt())],
            })
        }
        _ => config(format!("weak replacement covers one or two rates, got {}", rates.len())),
    }
}

/// How a forcing signal enters the weak reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SignalClass {
    Harmonic { omega: f64, phase: f64, amplitude: f64 },
    Constant(f64),
    White { intensity: f64 },
}

pub fn classify(spec: &SignalSpec) -> Result<SignalClass> {
    match spec.resolve()? {
        SignalKind::Harmonic { omega, phase, amplitude } => Ok(SignalClass::Harmonic { omega, phase, amplitude }),
        SignalKind::Constant { value } => Ok(SignalClass::Constant(value)),
        SignalKind::WhiteNoise { intensity } => Ok(SignalClass::White { intensity }),
        SignalKind::Lorenz { .. } => Err(Error::Classification(
            "Lorenz forcing is neither harmonic nor white noise".into(),
        )),
        SignalKind::File { path } => Err(Error::Classification(format!(
            "sampled forcing {} has no weak replacement",
            path.display()
        ))),
    }
}

/// Long-time replacement of `σ_left · Z σ_right`: drift plus amplitudes of
/// new unit white noises.
pub fn replace_pair(
    left: SignalClass,
    right: SignalClass,
    same_signal: bool,
    rates: &[f64],
) -> Result<StochasticReplacement> {
    use SignalClass::*;
    let deterministic = |drift| Ok(StochasticReplacement { drift, noises: vec![] });
    match (left, right) {
        (
            Harmonic { omega: wl, phase: pl, amplitude: al },
            Harmonic { omega: wr, phase: pr, amplitude: ar },
        ) => deterministic(al * ar * harmonic_drift(rates, wr, wl, pl - pr)?),
        (Constant(a), Constant(b)) => {
            check_rates(rates)?;
            deterministic(a * b / rates.iter().product::<f64>())
        }
        (Constant(_), Harmonic { .. }) | (Harmonic { .. }, Constant(_)) => {
            check_rates(rates)?;
            deterministic(0.0)
        }
        (White { intensity: ql }, White { intensity: qr }) => {
            let mut r = stochastic_replace(rates, same_signal)?;
            let scale = (ql * qr).sqrt();
            r.drift *= scale;
            r.noises.iter_mut().for_each(|a| *a *= scale);
            Ok(r)
        }
        _ => Err(Error::Classification(
            "quadratic term mixes white noise with deterministic forcing".into(),
        )),
    }
}

/// Identity of a generated noise stream: `(left signal, right signal,
/// sorted rate modes, slot)`.
pub type NoiseKey = (usize, usize, Vec<usize>, usize);

/// A weak model together with the forcing it must be driven by: the
/// original signals followed by the generated noises.
#[derive(Debug, Clone)]
pub struct WeakModel {
    pub model: MacroModel,
    pub specs: Vec<SignalSpec>,
    pub map: InputMap,
    pub noise_keys: Vec<NoiseKey>,
    n_original: usize,
}

impl WeakModel {
    pub fn signal_bank(&self) -> Result<SignalBank> {
        SignalBank::new(&self.specs, self.map.clone())
    }

    /// Signals the weak model added.
    pub fn new_noises(&self) -> &[SignalSpec] {
        &self.specs[self.n_original..]
    }
}

const NOISE_SALT: u64 = 0x5EED_0F_4EA1;

/// Signal weights of `expr` at element `e` through `map`.
fn signal_weights(q: &crate::macromodel::ModeExpr, k: usize, m: usize, e: usize, map: &InputMap) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (i, w) in q.input_weights(k, m, e) {
        for &(s, w2) in &map.rows()[i] {
            match out.iter_mut().find(|(j, _)| *j == s) {
                Some(p) => p.1 += w * w2,
                None => out.push((s, w * w2)),
            }
        }
    }
    out.retain(|&(_, w)| w != 0.0);
    out
}

/// Reduce the strong model named by `cfg` (a weak variant or its base) to
/// its weak form for forcing `specs` mapped onto the modes by `map`.
pub fn build_weak_model(cfg: &ModelConfig, specs: &[SignalSpec], map: &InputMap) -> Result<WeakModel> {
    let base = cfg.variant.strong_base();
    if !matches!(base, Variant::Ssm1 | Variant::Strongquad) {
        return config(format!("no weak form of {}", cfg.variant.name()));
    }
    cfg.validate()?;
    if map.n_outputs() != cfg.forcing_inputs() {
        return config(format!(
            "input map gives {} inputs, the model reads {}",
            map.n_outputs(),
            cfg.forcing_inputs()
        ));
    }
    // validates the specs against the map
    SignalBank::new(specs, map.clone())?;
    let (m, k) = (cfg.m, cfg.modes);
    let table = term_table(base);
    let mut terms: Vec<ElementTerm> = table
        .linear
        .iter()
        .map(|t| ElementTerm {
            label: t.to_string(),
            coeff: vec![t.coeff.eval(cfg); m],
            u: t.u,
            source: t.phi.map_or(Source::One, Source::Mode),
        })
        .collect();

    let mut classes: BTreeMap<usize, SignalClass> = BTreeMap::new();
    let mut drifts: Vec<(UFactor, Vec<f64>)> = Vec::new();
    let mut noise_keys: Vec<NoiseKey> = Vec::new();
    let mut noise_terms: Vec<((UFactor, usize), Vec<f64>)> = Vec::new();

    for q in &table.quad {
        let c = q.coeff.eval(cfg);
        if c == 0.0 {
            continue;
        }
        let rates = q.betas(cfg.h);
        let mut modes = q.rates.clone();
        let mut order: Vec<usize> = (0..modes.len()).collect();
        order.sort_by_key(|&i| modes[i]);
        modes.sort_unstable();
        let sorted_rates: Vec<f64> = order.iter().map(|&i| rates[i]).collect();
        for e in 0..m {
            let lw = signal_weights(&q.left, k, m, e, map);
            let rw = signal_weights(&q.right, k, m, e, map);
            for &(s, ws) in &lw {
                for &(r, wr) in &rw {
                    let cls = |i: usize, classes: &mut BTreeMap<usize, SignalClass>| -> Result<SignalClass> {
                        if let Some(c) = classes.get(&i) {
                            return Ok(*c);
                        }
                        let c = classify(&specs[i])?;
                        classes.insert(i, c);
                        Ok(c)
                    };
                    let (ls, rs) = (cls(s, &mut classes)?, cls(r, &mut classes)?);
                    let rep = replace_pair(ls, rs, s == r, &sorted_rates).map_err(|err| match err {
                        Error::Classification(why) => Error::Classification(format!("term `{q}` at element {}: {why}", e + 1)),
                        other => other,
                    })?;
                    let w = c * ws * wr;
                    if rep.drift != 0.0 {
                        add_to(&mut drifts, q.u, m, e, w * rep.drift);
                    }
                    for (slot, amp) in rep.noises.iter().enumerate() {
                        let key: NoiseKey = (s, r, modes.clone(), slot);
                        let idx = match noise_keys.iter().position(|kk| *kk == key) {
                            Some(i) => i,
                            None => {
                                noise_keys.push(key);
                                noise_keys.len() - 1
                            }
                        };
                        add_to(&mut noise_terms, (q.u, idx), m, e, w * amp);
                    }
                }
            }
        }
    }
    for (u, coeff) in drifts {
        terms.push(ElementTerm {
            label: format!("mean drift · {u:?}"),
            coeff,
            u,
            source: Source::One,
        });
    }
    for ((u, idx), coeff) in noise_terms {
        terms.push(ElementTerm {
            label: format!("new noise {idx} · {u:?}"),
            coeff,
            u,
            source: Source::Input(vec![idx; m]),
        });
    }
    let n_new = noise_keys.len();
    let mut all_specs = specs.to_vec();
    all_specs.extend((0..n_new).map(|i| SignalSpec::white_noise(1.0, derive_seed(cfg.seed ^ NOISE_SALT, i as u64))));
    let full_map = map.clone().stacked(&InputMap::identity(n_new), specs.len());
    let model = MacroModel::from_parts(cfg, DetKind::of(base), terms, &[] as &[QuadTerm], n_new)?;
    Ok(WeakModel {
        model,
        specs: all_specs,
        map: full_map,
        noise_keys,
        n_original: specs.len(),
    })
}

fn add_to<K: PartialEq + Copy>(acc: &mut Vec<(K, Vec<f64>)>, key: K, m: usize, e: usize, v: f64) {
    match acc.iter_mut().find(|(kk, _)| *kk == key) {
        Some(p) => p.1[e] += v,
        None => {
            let mut c = vec![0.0; m];
            c[e] = v;
            acc.push((key, c));
        }
    }
}

/// Time average of `cos(ω_ρ t + phase) · Z cos(ω_μ t)` with the chain started
/// from rest, over the whole forcing periods in `[t_end/10, t_end]`.
pub fn harmonic_time_average(rates: &[f64], omega_mu: f64, omega_rho: f64, phase: f64, t_end: f64, dt: f64) -> Result<f64> {
    if !(omega_mu > 0.0 && t_end > 0.0 && dt > 0.0) {
        return config("averaging needs positive frequency, window and step");
    }
    let mut chain = ConvChain::new(rates.to_vec())?;
    let period = 2.0 * std::f64::consts::PI / omega_mu;
    let per_period = (period / dt).ceil() as usize;
    let dt = period / per_period as f64;
    let total = (t_end / period).floor().max(2.0) as usize;
    let skip = (total / 10).max(1);
    let (start, end) = (skip * per_period, total * per_period);
    let mut values = Vec::with_capacity(end - start + 1);
    let mut i = 0usize;
    chain.run(
        |t| (omega_mu * t).cos(),
        end as f64 * dt,
        dt,
        |t, z| {
            i += 1;
            if i >= start {
                values.push((omega_rho * t + phase).cos() * z);
            }
        },
    );
    // trapezoid over the window
    let n = values.len() - 1;
    let acc: f64 = values.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(acc / n as f64)
}

/// Ensemble statistics of `y(T)` for `ẏ = σ · Z σ'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub paths: usize,
    pub t_end: f64,
    /// Mean of `y(T)/T`.
    pub mean_rate: f64,
    /// Standard error of `mean_rate`.
    pub std_err: f64,
    /// Sample variance of `y(T)`.
    pub variance: f64,
}

/// Stratonovich (Heun) ensemble of `ẏ = σ Z_rates σ'` for unit white noises,
/// with `σ' = σ` when `same_signal`.
pub fn stochastic_ensemble(
    rates: &[f64],
    same_signal: bool,
    paths: usize,
    t_end: f64,
    dt: f64,
    seed: u64,
) -> Result<EnsembleStats> {
    check_rates(rates)?;
    if paths < 2 {
        return config("need at least two ensemble paths");
    }
    let n = rates.len();
    let r = rates.to_vec();
    let sys = FnSystem {
        dim: n + 1,
        n_inputs: 2,
        f: move |_t: f64, y: &[f64], u: &[f64], dy: &mut [f64]| {
            crate::convolution::chain_rhs(&r, &y[..n], u[1], &mut dy[..n]);
            dy[n] = u[0] * y[0];
        },
    };
    let steps = (t_end / dt).round() as usize;
    let t_end = steps as f64 * dt;
    let mut finals = Vec::with_capacity(paths);
    for p in 0..paths {
        let base = derive_seed(seed, p as u64);
        let (specs, map) = if same_signal {
            (vec![SignalSpec::white_noise(1.0, base)], InputMap::from_rows(vec![vec![(0, 1.0)], vec![(0, 1.0)]]))
        } else {
            (
                vec![
                    SignalSpec::white_noise(1.0, base),
                    SignalSpec::white_noise(1.0, derive_seed(base, 1)),
                ],
                InputMap::identity(2),
            )
        };
        let mut bank = SignalBank::new(&specs, map)?;
        let mut y = vec![0.0; n + 1];
        integrate(&sys, Scheme::Heun, &mut bank, &mut y, 0.0, dt, steps, "ensemble path", |_, _, _| Ok(()))?;
        finals.push(y[n]);
    }
    let np = paths as f64;
    let mean = finals.iter().sum::<f64>() / np;
    let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (np - 1.0);
    Ok(EnsembleStats {
        paths,
        t_end,
        mean_rate: mean / t_end,
        std_err: (var / np).sqrt() / t_end,
        variance: var,
    })
}

/// Exact variance of `∫₀ᵀ Z_β dW` with `Z_β` started from rest.
pub fn single_rate_variance(beta: f64, t_end: f64) -> f64 {
    t_end / (2.0 * beta) - (1.0 - (-2.0 * beta * t_end).exp()) / (4.0 * beta * beta)
}

/// Rate `β_k` of subgrid mode `k` on elements of half-width `h`.
pub fn mode_rate(k: usize, h: f64) -> f64 {
    continuum_rate(k, h)
}
