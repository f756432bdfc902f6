//! `crystalstat`: configuration-driven harmonic crystal experiments.
//!
//! Exit codes: 0 pass, 1 usage error, 2 condition failure, 3 acceptance-gate
//! failure.

mod config;
mod output;
mod run;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{parse_nn, ExperimentConfig, KernelSpec, MeasureSpec};
use output::{Bundle, Manifest};
use run::{Command, Failure};

#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Parser)]
#[command(name = "crystalstat", version, about = "Harmonic crystal dynamics and convergence to equilibrium")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Dispersion table and E1-E5 reports.
    Dispersion(Opts),
    /// Critical-set surrogate scan.
    Critical(Opts),
    /// Real-space Green's functions and their decay.
    Green(Opts),
    /// Evolve one sampled initial state and track the energy.
    Evolve(Opts),
    /// Ensemble covariances against the exact covariance flow.
    Ensemble(Opts),
    /// Limit density and the convergence table.
    Limit(Opts),
    /// Empirical covariance against the Gibbs density.
    Gibbs(Opts),
    /// Characteristic-functional and moment tests of Gaussianity.
    Clt(Opts),
    /// Mixing integrals of the limit measure.
    Mixing(Opts),
    /// Condition reports only.
    Report(Opts),
}

#[derive(Args, Clone, Default)]
struct Opts {
    /// JSON experiment config, or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Nearest-neighbour crystal, e.g. `--nn d=1 n=1 m=1`.
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE")]
    nn: Option<Vec<String>>,
    /// Kernel document in JSON.
    #[arg(long, value_name = "FILE")]
    kernel: Option<PathBuf>,
    #[arg(long = "L", value_name = "L")]
    size: Option<usize>,
    /// Per-axis resolution of the E1-E3 check.
    #[arg(long)]
    resolution: Option<usize>,
    /// Initial measure: triangular, white or transformed.
    #[arg(long)]
    measure: Option<String>,
    #[arg(long)]
    nu0: Option<usize>,
    #[arg(long = "T0", value_name = "T0")]
    t0: Option<f64>,
    #[arg(long = "T1", value_name = "T1")]
    t1: Option<f64>,
    #[arg(long)]
    a0: Option<f64>,
    #[arg(long)]
    a1: Option<f64>,
    /// Times, comma separated or repeated.
    #[arg(long = "t", value_delimiter = ',', num_args = 1..)]
    times: Option<Vec<f64>>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Critical-set cutoff width; 0 disables truncation.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    delta_cross: Option<f64>,
    #[arg(long)]
    delta_hess: Option<f64>,
    #[arg(long)]
    delta_null: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Proceed with limit experiments when E4-E5 do not pass.
    #[arg(long = "override")]
    override_conditions: bool,
}

impl Sub {
    fn split(self) -> (Command, Opts) {
        match self {
            Sub::Dispersion(o) => (Command::Dispersion, o),
            Sub::Critical(o) => (Command::Critical, o),
            Sub::Green(o) => (Command::Green, o),
            Sub::Evolve(o) => (Command::Evolve, o),
            Sub::Ensemble(o) => (Command::Ensemble, o),
            Sub::Limit(o) => (Command::Limit, o),
            Sub::Gibbs(o) => (Command::Gibbs, o),
            Sub::Clt(o) => (Command::Clt, o),
            Sub::Mixing(o) => (Command::Mixing, o),
            Sub::Report(o) => (Command::Report, o),
        }
    }
}

/// Config file, then `CRYSTALSTAT_SEED`, then flags.
fn resolve(command: Command, opts: &Opts) -> Result<ExperimentConfig, UsageError> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(seed) = std::env::var("CRYSTALSTAT_SEED") {
        cfg.seed = seed.trim().parse().map_err(|e| UsageError(format!("CRYSTALSTAT_SEED: {e}")))?;
    }
    if let Some(words) = &opts.nn {
        cfg.kernel = parse_nn(words)?;
    }
    if let Some(path) = &opts.kernel {
        cfg.kernel = KernelSpec::File { path: path.clone() };
    }
    if let Some(l) = opts.size {
        cfg.size = l;
    }
    if opts.resolution.is_some() {
        cfg.resolution = opts.resolution;
    }
    if command == Command::Gibbs && opts.measure.is_none() && !matches!(cfg.measure, MeasureSpec::White { .. }) {
        cfg.measure = MeasureSpec::White { t0: 0.0, t1: 1.0 };
    }
    if let Some(kind) = &opts.measure {
        cfg.measure = switch_measure(&cfg.measure, kind)?;
    }
    apply_measure_flags(&mut cfg.measure, opts)?;
    if let Some(t) = &opts.times {
        cfg.times = t.clone();
    }
    if let Some(e) = opts.ensemble {
        cfg.ensemble = e;
    }
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(e) = opts.eps {
        cfg.eps = e;
    }
    if let Some(v) = opts.delta_cross {
        cfg.thresholds.delta_cross = v;
    }
    if let Some(v) = opts.delta_hess {
        cfg.thresholds.delta_hess = v;
    }
    if let Some(v) = opts.delta_null {
        cfg.thresholds.delta_null = v;
    }
    if let Some(o) = &opts.out {
        cfg.out = o.clone();
    }
    if opts.threads.is_some() {
        cfg.threads = opts.threads;
    }
    cfg.override_conditions |= opts.override_conditions;
    if cfg.times.iter().any(|t| !t.is_finite()) {
        return Err(UsageError("times must be finite".into()));
    }
    Ok(cfg)
}

fn measure_temperatures(m: &MeasureSpec) -> (f64, f64) {
    match *m {
        MeasureSpec::Triangular { t0, t1, .. } | MeasureSpec::White { t0, t1 } | MeasureSpec::Transformed { t0, t1, .. } => {
            (t0, t1)
        }
        MeasureSpec::File { .. } => (1.0, 1.0),
    }
}

fn switch_measure(current: &MeasureSpec, kind: &str) -> Result<MeasureSpec, UsageError> {
    let (t0, t1) = measure_temperatures(current);
    let nu0 = match current {
        MeasureSpec::Triangular { nu0, .. } | MeasureSpec::Transformed { nu0, .. } => *nu0,
        _ => 2,
    };
    Ok(match kind {
        "triangular" => MeasureSpec::Triangular { nu0, t0, t1 },
        "white" => MeasureSpec::White { t0, t1 },
        "transformed" => MeasureSpec::Transformed { nu0, t0, t1, a0: 0.5, a1: 0.5, order: 40 },
        other => return Err(UsageError(format!("unknown measure {other:?} (triangular | white | transformed)"))),
    })
}

fn apply_measure_flags(m: &mut MeasureSpec, opts: &Opts) -> Result<(), UsageError> {
    match m {
        MeasureSpec::Triangular { nu0, t0, t1 } | MeasureSpec::Transformed { nu0, t0, t1, .. } => {
            *nu0 = opts.nu0.unwrap_or(*nu0);
            *t0 = opts.t0.unwrap_or(*t0);
            *t1 = opts.t1.unwrap_or(*t1);
        }
        MeasureSpec::White { t0, t1 } => {
            *t0 = opts.t0.unwrap_or(*t0);
            *t1 = opts.t1.unwrap_or(*t1);
        }
        MeasureSpec::File { .. } => {
            if opts.t0.is_some() || opts.t1.is_some() || opts.nu0.is_some() {
                return Err(UsageError("temperature flags do not apply to a file measure".into()));
            }
        }
    }
    if let MeasureSpec::Transformed { a0, a1, .. } = m {
        *a0 = opts.a0.unwrap_or(*a0);
        *a1 = opts.a1.unwrap_or(*a1);
    } else if opts.a0.is_some() || opts.a1.is_some() {
        return Err(UsageError("--a0/--a1 need the transformed measure".into()));
    }
    Ok(())
}

fn execute(command: Command, cfg: &ExperimentConfig) -> Result<(i32, String), UsageError> {
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| UsageError(format!("--threads: {e}")))?;
    }
    let mut bundle = Bundle::create(cfg.out.clone())?;
    let (status, verdict) = match run::run(command, cfg, &mut bundle) {
        Ok(msg) => (0, format!("pass: {msg}")),
        Err(Failure::Usage(e)) => return Err(e),
        Err(Failure::Condition(msg)) => (2, format!("condition failure: {msg}")),
        Err(Failure::Gate(msg)) => (3, format!("acceptance gate failed: {msg}")),
    };
    let manifest = Manifest { status, verdict: verdict.clone(), ..Manifest::new(command.name(), cfg) };
    bundle.finish(&manifest)?;
    Ok((status, verdict))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (command, opts) = cli.command.split();
    let outcome = resolve(command, &opts).and_then(|cfg| execute(command, &cfg));
    match outcome {
        Ok((status, verdict)) => {
            if status == 0 {
                println!("{verdict}");
            } else {
                eprintln!("{verdict}");
            }
            ExitCode::from(status as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
