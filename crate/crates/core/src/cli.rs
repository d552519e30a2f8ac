//! Command-line front end: `estimate`, `bands`, `sensitivity`, `simulate`.
//!
//! Every command writes one JSON document carrying a `provenance` block with
//! the fully resolved configuration. Indices are 1-based on this surface.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::inference::{self, PipelineConfig};
use crate::sensitivity;
use crate::simulation::{self, DgpParams, SimulationConfig};
use crate::solver::SolverOptions;
use crate::stage1;
use crate::stage2;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "endiv", version, about = "Debiased estimation and simultaneous bands for high-dimensional IV models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stage-1 coefficients and, with --set, orthogonal instruments and debiased estimates.
    Estimate {
        #[command(flatten)]
        flags: Flags,
        /// Only solve the stage-1 program.
        #[arg(long)]
        stage1_only: bool,
    },
    /// Simultaneous multiplier-bootstrap confidence bands over --set.
    Bands {
        #[command(flatten)]
        flags: Flags,
    },
    /// Sensitivity coefficients of Psi = Z'X / n.
    Sensitivity {
        #[command(flatten)]
        flags: Flags,
    },
    /// Monte Carlo replications of the simulation design.
    Simulate {
        #[command(flatten)]
        flags: Flags,
    },
}

/// Flags shared by all commands; each command reads the subset it needs.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Flags {
    /// Flat JSON file of flag values; command-line flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, visible_alias = "out")]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Target coefficients, 1-based, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub set: Option<Vec<usize>>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "iid")]
    pub c_const: Option<f64>,
    /// Independent and identically distributed data (c = 1).
    #[arg(long)]
    #[serde(default)]
    pub iid: bool,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub tol_feas: Option<f64>,
    #[arg(long)]
    pub tol_obj: Option<f64>,
    /// Sensitivity value used to raise lambda_t to 2 tau / kappa.
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long = "K")]
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[arg(long = "L")]
    #[serde(rename = "L")]
    pub l: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub u: Option<f64>,
    #[arg(long)]
    pub q: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    pub m_grid: Option<Vec<usize>>,
    /// Present in provenance blocks; checked against the invoked command.
    #[arg(skip)]
    pub command: Option<String>,
    #[arg(skip)]
    pub version: Option<String>,
    #[arg(skip)]
    pub stage1_only: Option<bool>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($field:ident),*) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )*
    };
}

impl Flags {
    /// Values from `self` win over those in `file`.
    fn over(self, file: Flags) -> Flags {
        let cli = self;
        let mut out = file;
        overlay!(out, cli; input, output, alpha, set, draws, seed, c_const, threads, tol_feas, tol_obj,
            kappa, n, p, k, l, reps, s, u, q, m_grid);
        out.iid = out.iid || cli.iid;
        out.config = cli.config;
        out.stage1_only = cli.stage1_only.or(out.stage1_only);
        out
    }

    pub fn resolve_file(self) -> Result<Flags> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path)?;
        let file: Flags = serde_json::from_str(&text)
            .map_err(|e| Error::Parameter(format!("config file {}: {e}", path.display())))?;
        if file.c_const.is_some() && (file.iid || self.iid) && self.c_const.is_none() {
            return Err(Error::Parameter("--c-const and --iid are mutually exclusive".into()));
        }
        Ok(self.over(file))
    }
}

/// Fully resolved settings. Serialized with the same keys as a `--config`
/// file, so a provenance block can be replayed directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunConfig {
    pub command: String,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    pub alpha: f64,
    pub set: Vec<usize>,
    pub draws: usize,
    pub seed: u64,
    pub c_const: f64,
    pub kappa: Option<f64>,
    pub tol_feas: f64,
    pub tol_obj: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_only: Option<bool>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityArgs>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationArgs>,
    #[serde(skip)]
    pub output: Option<PathBuf>,
    #[serde(skip)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SensitivityArgs {
    pub s: usize,
    pub u: f64,
    pub q: u32,
    pub m_grid: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationArgs {
    pub n: usize,
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub reps: usize,
}

impl RunConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            alpha: self.alpha,
            draws: self.draws,
            seed: self.seed,
            c: self.c_const,
            kappa_floor: self.kappa,
            solver: SolverOptions {
                tol_feas: self.tol_feas,
                tol_obj: self.tol_obj,
                ..SolverOptions::default()
            },
        }
    }

    /// 0-based target indices.
    pub fn targets(&self) -> Vec<usize> {
        self.set.iter().map(|j| j - 1).collect()
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("ENDIV_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Parameter(format!("ENDIV_THREADS must be a positive integer, got `{v}`"))),
        _ => Ok(None),
    }
}

/// Merges the config file, applies defaults and validates.
pub fn parse_config(command: &Command) -> Result<RunConfig> {
    let (name, flags, stage1_only) = match command {
        Command::Estimate { flags, stage1_only } => ("estimate", flags, *stage1_only),
        Command::Bands { flags } => ("bands", flags, false),
        Command::Sensitivity { flags } => ("sensitivity", flags, false),
        Command::Simulate { flags } => ("simulate", flags, false),
    };
    let mut flags = flags.clone();
    if stage1_only {
        flags.stage1_only = Some(true);
    }
    let f = flags.resolve_file()?;
    if let Some(other) = f.command.as_deref().filter(|c| *c != name) {
        return Err(Error::Parameter(format!("config was written by `{other}`, not `{name}`")));
    }
    let stage1_only = (name == "estimate").then(|| f.stage1_only.unwrap_or(false));
    let solver = SolverOptions::default();
    let c = match (f.iid, f.c_const) {
        (true, Some(_)) => return Err(Error::Parameter("--c-const and --iid are mutually exclusive".into())),
        (true, None) => stage2::default_c(true),
        (false, Some(c)) => c,
        (false, None) => stage2::default_c(false),
    };
    if !(c >= 1.0 && c.is_finite()) {
        return Err(Error::Parameter(format!("c must be at least 1, got {c}")));
    }
    let alpha = f.alpha.unwrap_or(0.05);
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let threads = match f.threads {
        Some(t) => Some(t),
        None => threads_from_env()?,
    };
    if threads == Some(0) {
        return Err(Error::Parameter("thread count must be positive".into()));
    }
    let mut cfg = RunConfig {
        command: name.to_string(),
        version: VERSION.to_string(),
        input: f.input.as_ref().map(|p| p.display().to_string()),
        alpha,
        set: f.set.clone().unwrap_or_default(),
        draws: f.draws.unwrap_or(2000),
        seed: f.seed.unwrap_or(0),
        c_const: c,
        kappa: f.kappa,
        tol_feas: f.tol_feas.unwrap_or(solver.tol_feas),
        tol_obj: f.tol_obj.unwrap_or(solver.tol_obj),
        stage1_only,
        sensitivity: None,
        simulation: None,
        output: f.output.clone(),
        threads,
    };
    cfg.pipeline().solver.check()?;
    if let Some(k) = cfg.kappa {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::Parameter(format!("kappa must be positive, got {k}")));
        }
    }
    if cfg.set.contains(&0) {
        return Err(Error::Parameter("index 0 out of range: indices are 1-based".into()));
    }
    let mut seen = cfg.set.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != cfg.set.len() {
        return Err(Error::Parameter("duplicate index in --set".into()));
    }
    match name {
        "simulate" => {
            let p = f.p.unwrap_or(30);
            let l = f.l.unwrap_or(1);
            let sim = SimulationArgs {
                n: f.n.unwrap_or(500),
                p,
                k: f.k.unwrap_or(p * l),
                l,
                reps: f.reps.unwrap_or(100),
            };
            DgpParams::new(sim.n, sim.p, sim.k, sim.l, 0)?;
            if sim.reps == 0 {
                return Err(Error::Parameter("--reps must be positive".into()));
            }
            if let Some(&bad) = cfg.set.iter().find(|&&j| j > p) {
                return Err(Error::Parameter(format!("index {bad} out of range for p = {p}")));
            }
            if cfg.set.is_empty() {
                cfg.set = simulation::default_targets(p).iter().map(|j| j + 1).collect();
            }
            if cfg.kappa.is_none() {
                cfg.kappa = Some(simulation::population_kappa(p));
            }
            cfg.input = None;
            cfg.simulation = Some(sim);
        }
        "sensitivity" => {
            let s = f.s.unwrap_or(1);
            let sens = SensitivityArgs {
                s,
                u: f.u.unwrap_or(3.0),
                q: f.q.unwrap_or(1),
                m_grid: f.m_grid.clone().unwrap_or_else(|| vec![s]),
            };
            if s == 0 || !(sens.u > 0.0) || !(sens.q == 1 || sens.q == 2) {
                return Err(Error::Parameter("need s >= 1, u > 0 and q in {1, 2}".into()));
            }
            cfg.sensitivity = Some(sens);
        }
        "bands" if cfg.set.is_empty() => {
            return Err(Error::Parameter("bands needs a nonempty --set".into()));
        }
        _ => {}
    }
    if name != "simulate" && cfg.input.is_none() {
        return Err(Error::Parameter(format!("{name} needs --input")));
    }
    Ok(cfg)
}

fn check_indices(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if let Some(&bad) = cfg.set.iter().find(|&&j| j > data.p()) {
        return Err(Error::Parameter(format!("index {bad} out of range for p = {}", data.p())));
    }
    Ok(())
}

fn load(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.input.as_deref().expect("validated");
    let data = load_dataset(path).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{path}: {io}"))),
        other => other,
    })?;
    data.ensure_valid()?;
    check_indices(cfg, &data)?;
    Ok(data)
}

fn stage1_json(fit: &stage1::Stage1Fit) -> Value {
    json!({
        "beta_hat": fit.beta_hat,
        "t_hat": fit.t_hat,
        "lambda_t": fit.penalties.lambda_t,
        "tau": fit.penalties.tau,
        "H1n": fit.h1n,
        "objective": fit.objective(),
        "diagnostics": fit.diagnostics,
    })
}

fn run_estimate(cfg: &RunConfig) -> Result<Value> {
    let data = load(cfg)?;
    let pipeline = cfg.pipeline();
    let pen1 = inference::stage1_penalties(&data, &pipeline)?;
    let fit1 = stage1::fit_beta_with(&data, &pen1, &pipeline.solver)?;
    let mut out = stage1_json(&fit1);
    if cfg.stage1_only == Some(true) || cfg.set.is_empty() {
        return Ok(out);
    }
    let targets = cfg.targets();
    let fits = inference::fit_instruments(&data, &targets, &pipeline)?;
    let mut per_j = Vec::new();
    for fit in &fits {
        let est = inference::estimate_coefficient(&data, fit.j, &fit1.beta_hat, &fit.mu_hat)?;
        let report = stage2::orthogonality_residuals(&data, fit)?;
        per_j.push(json!({
            "j": fit.j + 1,
            "mu_hat": fit.mu_hat,
            "theta_hat": fit.theta_hat,
            "omega_hat": est.omega_hat,
            "beta_check": est.beta_check,
            "sigma_hat": est.sigma_hat,
            "lambda_t": fit.penalties.lambda_t,
            "tau": fit.penalties.tau,
            "H2n": fit.h2n,
            "margins": report,
            "diagnostics": fit.diagnostics,
        }));
    }
    out["instruments"] = Value::Array(per_j);
    Ok(out)
}

fn run_bands(cfg: &RunConfig) -> Result<Value> {
    let data = load(cfg)?;
    let res = inference::infer(&data, &cfg.targets(), &cfg.pipeline())?;
    let intervals: Vec<Value> = res
        .band
        .entries
        .iter()
        .map(|e| {
            let mut v = json!({
                "j": e.j + 1,
                "lo": e.interval.lo,
                "hi": e.interval.hi,
                "beta_check": e.beta_check,
                "sigma_hat": e.sigma_hat,
            });
            if let Some(w) = &e.warning {
                v["warning"] = json!(w);
            }
            v
        })
        .collect();
    let pointwise: Vec<Value> = res
        .estimates
        .iter()
        .zip(&res.pointwise)
        .map(|(e, iv)| json!({"j": e.j + 1, "lo": iv.lo, "hi": iv.hi}))
        .collect();
    Ok(json!({
        "S": cfg.set,
        "alpha": res.band.alpha,
        "critical_value": res.band.critical_value,
        "intervals": intervals,
        "pointwise": pointwise,
        "B": res.band.draws,
        "seed": res.band.seed,
    }))
}

fn run_sensitivity(cfg: &RunConfig) -> Result<Value> {
    let data = load(cfg)?;
    let a = cfg.sensitivity.as_ref().expect("validated");
    let report = sensitivity::sensitivity_report(&data.psi(), a.s, a.u, a.q, &a.m_grid)?;
    Ok(serde_json::to_value(report)?)
}

fn run_simulate(cfg: &RunConfig) -> Result<Value> {
    let a = cfg.simulation.as_ref().expect("validated");
    let params = DgpParams::new(a.n, a.p, a.k, a.l, 0)?;
    let sim = SimulationConfig {
        targets: cfg.targets(),
        pipeline: cfg.pipeline(),
    };
    let summary = simulation::monte_carlo(&params, a.reps, cfg.seed, &sim)?;
    let mut v = serde_json::to_value(&summary)?;
    v["targets"] = json!(cfg.set);
    v["table_header"] = json!(summary.table_header());
    v["table_row"] = json!(summary.table_row());
    Ok(v)
}

/// Runs a validated configuration and returns the output document.
pub fn execute(cfg: &RunConfig) -> Result<Value> {
    let body = || match cfg.command.as_str() {
        "estimate" => run_estimate(cfg),
        "bands" => run_bands(cfg),
        "sensitivity" => run_sensitivity(cfg),
        "simulate" => run_simulate(cfg),
        other => Err(Error::Parameter(format!("unknown command {other}"))),
    };
    let mut out = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?
            .install(body)?,
        None => body()?,
    };
    out["provenance"] = serde_json::to_value(cfg)?;
    Ok(out)
}

/// Exit status for an error: 2 configuration, 3 estimation, 4 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parameter(_) | Error::Dimension(_) | Error::Budget(_) => 2,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::MissingColumn(_) | Error::Parse { .. } => 4,
        _ => 3,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::MissingColumn(_) => "missing_column",
        Error::Parse { .. } => "parse",
        Error::Identification { .. } => "identification",
        Error::InvalidData(_) => "invalid_data",
        Error::Dimension(_) => "dimension",
        Error::Parameter(_) => "parameter",
        Error::Solver { .. } => "solver",
        Error::WeakInstrument { .. } => "weak_instrument",
        Error::ZeroScoreVariance(_) => "zero_score_variance",
        Error::Budget(_) => "budget",
        Error::Replication { .. } => "replication",
        Error::TooManyFailures { .. } => "too_many_failures",
        Error::Io(_) => "io",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

pub fn error_json(err: &Error) -> Value {
    json!({"error": {"kind": error_kind(err), "message": err.to_string(), "exit_code": exit_code(err)}})
}

fn write_output(cfg: &RunConfig, doc: &Value, stdout: &mut dyn Write) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)? + "\n";
    match &cfg.output {
        Some(path) => {
            write_file(path, &text)?;
            if cfg.command == "simulate" {
                writeln!(stdout, "{}", doc["table_header"].as_str().unwrap_or_default())?;
                writeln!(stdout, "{}", doc["table_row"].as_str().unwrap_or_default())?;
            }
        }
        None => stdout.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let v = json!({"error": {"kind": "usage", "message": e.to_string().trim_end(), "exit_code": 2}});
            let _ = writeln!(stderr, "{v}");
            return 2;
        }
    };
    let result = parse_config(&cli.command).and_then(|cfg| {
        let doc = execute(&cfg)?;
        write_output(&cfg, &doc, stdout)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_json(&e));
            exit_code(&e)
        }
    }
}
