use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use holistic::convolution::{reduce_by_parts, ConvTerm, Factor};
use holistic::forcing::{alternating_mode_map, derive_seed};
use holistic::harness::write_csv;
use holistic::microscale::BurgersSystem;
use holistic::stepper::integrate;
use holistic::{
    build_weak_model, run_experiment, Experiment, HarnessConfig, InputMap, MacroModel, ModelConfig, OdeSystem,
    Scheme, SignalBank, SignalSpec, Variant,
};

#[derive(Parser)]
#[command(name = "holistic", version, about = "Forced Burgers microscale and macroscale models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate the forced microscale PDE on [0, 2π).
    Micro(MicroArgs),
    /// Integrate a macroscale model.
    Macro(MacroArgs),
    /// Integrate the weak (convolution-free) form of a strong model.
    Weak(WeakArgs),
    /// Print the by-parts reduction trace of a quadratic term as JSON.
    Reduce(ReduceArgs),
    /// Run a comparison experiment and write CSV tables plus a JSON report.
    Compare(CompareArgs),
}

#[derive(Args)]
struct MicroArgs {
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    #[arg(long, default_value_t = PI / 16.0)]
    dx: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, default_value_t = 20.0)]
    tend: f64,
    /// Signal spec, e.g. `lorenz:seed=1` or `harmonic:omega=2`. Each grid
    /// point gets an independent stream derived from the seed.
    #[arg(long, default_value = "lorenz:seed=1")]
    forcing: String,
    #[arg(long, default_value_t = 1.0)]
    u0: f64,
    /// Write every `stride`-th step.
    #[arg(long, default_value_t = 10)]
    stride: usize,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 0.3)]
    alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    eps: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Element size.
    #[arg(long = "H", default_value_t = PI / 2.0)]
    h: f64,
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 15.0)]
    tend: f64,
    /// Single signal spec driving the alternating `(−1)^j φ(t)` mode pattern
    /// (the lattice model instead receives it at every fine point).
    #[arg(long, default_value = "harmonic:omega=2")]
    forcing: String,
    #[arg(long, default_value_t = 1.0)]
    u0: f64,
    #[arg(long, default_value_t = 10)]
    stride: usize,
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MacroArgs {
    /// lowg, lattice, ssm1, strongquad, weak-ssm1 or weak-strongquad.
    #[arg(long)]
    model: Variant,
    /// Also write the convolution chain states.
    #[arg(long)]
    dump_bank: bool,
    #[command(flatten)]
    common: ModelArgs,
}

#[derive(Args)]
struct WeakArgs {
    /// ssm1 or strongquad.
    #[arg(long, default_value = "ssm1")]
    base: Variant,
    /// Also integrate the strong model under the same forcing and append its
    /// grid values as `S_j` columns.
    #[arg(long)]
    compare_strong: bool,
    #[command(flatten)]
    common: ModelArgs,
}

#[derive(Args)]
struct ReduceArgs {
    /// Left factor `signal:r1,r2,..` (no rates for a bare signal).
    #[arg(long)]
    left: String,
    #[arg(long)]
    right: String,
    #[arg(long, default_value_t = 1.0)]
    coeff: f64,
    /// Write to a file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment name, or `all`.
    #[arg(long)]
    experiment: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Micro(a) => micro(&a)?,
        Cmd::Macro(a) => macro_cmd(&a)?,
        Cmd::Weak(a) => weak(&a)?,
        Cmd::Reduce(a) => reduce(&a)?,
        Cmd::Compare(a) => return compare(&a),
    }
    Ok(ExitCode::SUCCESS)
}

fn pick_scheme(explicit: Option<Scheme>, bank: &SignalBank) -> Scheme {
    explicit.unwrap_or(if bank.has_white_noise() { Scheme::Heun } else { Scheme::Rk4 })
}

fn steps(tend: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && tend >= 0.0 && tend.is_finite()) {
        bail!("need dt > 0 and a finite tend >= 0");
    }
    Ok((tend / dt).round() as usize)
}

fn micro(a: &MicroArgs) -> Result<()> {
    let sys = BurgersSystem::with_spacing(2.0 * PI, a.dx, a.alpha, a.eps)?;
    let base = SignalSpec::parse(&a.forcing)?;
    let specs: Vec<SignalSpec> = (0..sys.n)
        .map(|i| base.clone().with_seed(derive_seed(base.seed, i as u64)))
        .collect();
    let mut bank = SignalBank::direct(&specs)?;
    let scheme = pick_scheme(a.scheme, &bank);
    let mut header = vec!["t".to_string()];
    header.extend((0..sys.n).map(|i| format!("u_{i}")));
    let mut y = vec![a.u0; sys.n];
    let mut rows = vec![row(0.0, &y)];
    let stride = a.stride.max(1);
    integrate(&sys, scheme, &mut bank, &mut y, 0.0, a.dt, steps(a.tend, a.dt)?, "microscale", |i, t, y| {
        if i % stride == 0 {
            rows.push(row(t, y));
        }
        Ok(())
    })?;
    write_csv(&a.out, &header, &rows)?;
    Ok(())
}

fn row(t: f64, y: &[f64]) -> Vec<f64> {
    std::iter::once(t).chain(y.iter().copied()).collect()
}

fn model_config(variant: Variant, a: &ModelArgs) -> ModelConfig {
    let mut cfg = ModelConfig::new(variant, a.alpha, a.eps, a.h, a.m).with_gamma(a.gamma);
    cfg.dt = a.dt;
    cfg.seed = a.seed;
    cfg
}

fn forcing_map(cfg: &ModelConfig) -> InputMap {
    match cfg.variant {
        Variant::LatticeCoarse => InputMap::from_rows(vec![vec![(0, 1.0)]; cfg.forcing_inputs()]),
        _ => alternating_mode_map(cfg.m, cfg.modes),
    }
}

/// Builds the model and its forcing bank, reduced to weak form when asked.
fn build(variant: Variant, a: &ModelArgs, spec: &SignalSpec) -> Result<(MacroModel, SignalBank)> {
    let mut cfg = model_config(variant, a);
    let map = forcing_map(&cfg);
    let probe = SignalBank::new(std::slice::from_ref(spec), map.clone())?;
    cfg.scheme = pick_scheme(a.scheme, &probe);
    if variant.is_weak() {
        // white-noise forcing is the only source of generated noises, so the probe scheme carries over
        let w = build_weak_model(&cfg, std::slice::from_ref(spec), &map)?;
        let bank = w.signal_bank()?;
        Ok((w.model, bank))
    } else {
        Ok((MacroModel::strong(&cfg)?, probe))
    }
}

/// Rows of `t, U_1..U_m` and optionally every remaining state component.
fn trajectory(model: &MacroModel, bank: &mut SignalBank, a: &ModelArgs, all: bool) -> Result<Vec<Vec<f64>>> {
    let m = model.m();
    let mut y = model.initial_state(&vec![a.u0; m])?;
    let take = if all { y.len() } else { m };
    let mut rows = vec![row(0.0, &y[..take])];
    let stride = a.stride.max(1);
    model.run(bank, &mut y, 0.0, a.dt, steps(a.tend, a.dt)?, |i, t, y| {
        if i % stride == 0 {
            rows.push(row(t, &y[..take]));
        }
        Ok(())
    })?;
    Ok(rows)
}

fn macro_cmd(a: &MacroArgs) -> Result<()> {
    let spec = SignalSpec::parse(&a.common.forcing)?;
    let (model, mut bank) = build(a.model, &a.common, &spec)?;
    let rows = trajectory(&model, &mut bank, &a.common, a.dump_bank)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=model.m()).map(|j| format!("U_{j}")));
    if a.dump_bank {
        header.extend((model.m()..model.dim()).map(|k| format!("z_{}", k - model.m())));
    }
    write_csv(&a.common.out, &header, &rows)?;
    if a.dump_bank {
        let legend: Vec<String> = (model.m()..model.dim()).map(|k| model.describe_component(k)).collect();
        let path = sibling(&a.common.out, "_bank.json");
        std::fs::write(&path, serde_json::to_string_pretty(&legend)?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn weak(a: &WeakArgs) -> Result<()> {
    let variant = match a.base {
        Variant::Ssm1 | Variant::WeakSsm1 => Variant::WeakSsm1,
        Variant::Strongquad | Variant::WeakStrongquad => Variant::WeakStrongquad,
        v => bail!("no weak form of {}", v.name()),
    };
    let spec = SignalSpec::parse(&a.common.forcing)?;
    let (model, mut bank) = build(variant, &a.common, &spec)?;
    let mut rows = trajectory(&model, &mut bank, &a.common, false)?;
    let m = model.m();
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|j| format!("U_{j}")));
    if a.compare_strong {
        // same spec, so the original signals replay identical streams
        let (strong, mut sbank) = build(variant.strong_base(), &a.common, &spec)?;
        let srows = trajectory(&strong, &mut sbank, &a.common, false)?;
        header.extend((1..=m).map(|j| format!("S_{j}")));
        for (r, s) in rows.iter_mut().zip(srows) {
            r.extend_from_slice(&s[1..]);
        }
    }
    write_csv(&a.common.out, &header, &rows)?;
    Ok(())
}

fn parse_factor(s: &str) -> Result<Factor> {
    let (signal, rates) = s.split_once(':').unwrap_or((s, ""));
    if signal.is_empty() {
        bail!("factor `{s}` has no signal name");
    }
    let rates = rates
        .split(',')
        .filter(|r| !r.trim().is_empty())
        .map(|r| r.trim().parse::<f64>().with_context(|| format!("bad rate `{r}` in `{s}`")))
        .collect::<Result<Vec<_>>>()?;
    Ok(Factor::new(signal, rates))
}

fn reduce(a: &ReduceArgs) -> Result<()> {
    let term = ConvTerm::new(a.coeff, parse_factor(&a.left)?, parse_factor(&a.right)?);
    let red = reduce_by_parts(&term)?;
    let json = serde_json::to_string_pretty(&red)?;
    match &a.out {
        Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display()))?,
        None => {
            use std::io::Write;
            match writeln!(std::io::stdout().lock(), "{json}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn compare(a: &CompareArgs) -> Result<ExitCode> {
    let cfg = match &a.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    let exps: Vec<Experiment> = if a.experiment == "all" {
        Experiment::ALL.to_vec()
    } else {
        vec![a.experiment.parse()?]
    };
    let mut ok = true;
    for exp in exps {
        let mut out = run_experiment(exp, &cfg)?;
        let files = out.write(&a.out_dir)?;
        for c in &out.report.checks {
            println!(
                "{} {} {}: {:.6e} {} {}",
                exp.name(),
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.value,
                c.relation,
                c.threshold
            );
        }
        for f in files {
            println!("wrote {}", f.display());
        }
        ok &= out.report.passed();
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
