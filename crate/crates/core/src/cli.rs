//! Command-line front end. Every command writes into a run directory that
//! also receives the manifest describing how it was produced.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::continuation::{trace_frc_with, Parameter, TraceConfig};
use crate::error::{Error, Result};
use crate::ghb::LibrarySpec;
use crate::io::{read_trajectory, write_trajectory};
use crate::metrics::{mcdrc, FrcCurve};
use crate::model::{fixtures, simulate, IdentifiedModel};
use crate::pipeline::{identify_model, PipelineConfig};
use crate::pod::{reduce, SnapshotMatrix};
use crate::signal::ForcingConfig;

pub const CONFIG_ENV: &str = "MEVSINDY_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "mevsindy", version, about = "Identify weakly nonlinear oscillators and predict their frequency responses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a preset (table1, beam, mirror) or a model JSON file.
    Generate(GenerateArgs),
    /// Identify a model from one or more trajectories.
    Identify(IdentifyArgs),
    /// Trace frequency-response curves of a model.
    Frc(FrcArgs),
    /// Score a response curve against a reference (MCDRC).
    Score(ScoreArgs),
    /// Reduce a snapshot matrix to its dominant modes.
    Pod(PodArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// `table1`, `beam`, `mirror`, or a path to a model JSON file.
    pub preset: String,
    #[arg(long)]
    pub beta: f64,
    /// Forcing frequency (rad/s); required unless β = 0.
    #[arg(long = "omega-f")]
    pub omega_f: Option<f64>,
    /// Initial displacements and velocities, comma separated ([x..., v...]
    /// or only x...). Defaults to rest.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Option<Vec<f64>>,
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    /// Trajectory CSV files (forcing read from their sidecars).
    #[arg(required = true)]
    pub data: Vec<PathBuf>,
    /// Library specification JSON (overrides the config's library).
    #[arg(long)]
    pub library: Option<PathBuf>,
    /// Pipeline configuration JSON; falls back to $MEVSINDY_CONFIG.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Harmonic orders, comma separated (detected when absent).
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct FrcArgs {
    /// Model JSON, or a preset name.
    pub model: String,
    /// Forcing multipliers, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub beta: Vec<f64>,
    /// Ω range as lo,hi.
    #[arg(long = "omega-range", value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub omega_range: Vec<f64>,
    #[arg(long, default_value_t = 0.02)]
    pub ds0: f64,
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
    #[arg(long, default_value_t = crate::continuation::DEFAULT_HARMONICS)]
    pub harmonics: usize,
    #[arg(long = "max-points", default_value_t = crate::continuation::DEFAULT_MAX_POINTS)]
    pub max_points: usize,
    /// Skip Floquet stability (all points reported stable).
    #[arg(long = "no-stability")]
    pub no_stability: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    pub frc: PathBuf,
    pub frc_ref: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PodArgs {
    /// Snapshot CSV (`t,d1..dk`) or binary (`.bin`) file.
    pub snapshot: PathBuf,
    #[arg(long = "k-hat")]
    pub k_hat: usize,
    /// Sample interval for binary snapshots.
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    inputs: Vec<String>,
    config: serde_json::Value,
    library: Option<LibrarySpec>,
    seed: Option<u64>,
    tool_version: &'static str,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })
}

fn manifest(out: &Path, command: &str, inputs: Vec<String>, config: serde_json::Value, library: Option<LibrarySpec>) -> Result<()> {
    let m = Manifest { command, inputs, config, library, seed: None, tool_version: env!("CARGO_PKG_VERSION") };
    write_json(&out.join("manifest.json"), &m)
}

fn load_model(spec: &str) -> Result<IdentifiedModel> {
    if let Some(m) = fixtures::by_name(spec) {
        return Ok(m);
    }
    let p = Path::new(spec);
    let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: spec.into(), source: e })?;
    IdentifiedModel::from_json(&text)
}

/// Preset sampling: (dt, duration).
fn preset_sampling(name: &str) -> (f64, f64) {
    match name {
        "beam" => (0.1, 3000.0),
        "mirror" => (0.3, 20000.0),
        _ => (0.01, 1000.0),
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let model = load_model(&a.preset)?;
    let (dt0, dur0) = preset_sampling(&a.preset);
    let omega_f = match a.omega_f {
        Some(w) => w,
        None if a.beta == 0.0 => model.omega_max(),
        None => return Err(Error::InvalidInput("--omega-f is required when beta != 0".into())),
    };
    let forcing = ForcingConfig::cosine(a.beta, omega_f)?;
    let k = model.dims;
    let x0 = match &a.x0 {
        None => vec![0.0; 2 * k],
        Some(v) if v.len() == 2 * k => v.clone(),
        Some(v) if v.len() == k => v.iter().copied().chain(std::iter::repeat(0.0).take(k)).collect(),
        Some(v) => return Err(Error::DimensionMismatch(format!("--x0 has {} entries for {k} channels", v.len()))),
    };
    let dt = a.dt.unwrap_or(dt0);
    let duration = a.duration.unwrap_or(dur0);
    let ts = simulate(&model, &forcing, &x0, duration, dt)?;
    ensure_dir(&a.out)?;
    write_trajectory(&ts, &a.out.join("trajectory.csv"))?;
    write_json(&a.out.join("model.json"), &model)?;
    let cfg = serde_json::json!({ "beta": a.beta, "omega_f": omega_f, "x0": x0, "duration": duration, "dt": dt });
    manifest(&a.out, "generate", vec![a.preset.clone()], cfg, None)
}

/// Explicit --config, else $MEVSINDY_CONFIG, else defaults.
pub fn load_config(explicit: Option<&Path>) -> Result<PipelineConfig> {
    let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    match explicit.map(Path::to_path_buf).or(env) {
        Some(p) => {
            let s = std::fs::read_to_string(&p).map_err(|e| Error::Io { path: p.display().to_string(), source: e })?;
            serde_json::from_str(&s).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn cmd_identify(a: &IdentifyArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = &a.library {
        let s = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.display().to_string(), source: e })?;
        cfg.library = serde_json::from_str(&s).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
    }
    if let Some(o) = &a.orders {
        cfg.orders = Some(o.clone());
    }
    let data = a.data.iter().map(|p| read_trajectory(p, None)).collect::<Result<Vec<_>>>()?;
    let (model, report) = identify_model(&data, &cfg)?;
    ensure_dir(&a.out)?;
    write_json(&a.out.join("model.json"), &model)?;
    write_json(&a.out.join("report.json"), &report)?;
    let inputs = a.data.iter().map(|p| p.display().to_string()).collect();
    manifest(&a.out, "identify", inputs, serde_json::to_value(&cfg).expect("config serializes"), Some(cfg.library))
}

fn cmd_frc(a: &FrcArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let [lo, hi] = a.omega_range[..] else {
        return Err(Error::InvalidInput(format!("--omega-range needs lo,hi; got {} values", a.omega_range.len())));
    };
    let cfg = TraceConfig {
        harmonics: a.harmonics,
        ds0: a.ds0,
        max_points: a.max_points,
        parameter: Parameter::Omega,
        stability: !a.no_stability,
    };
    ensure_dir(&a.out)?;
    // branches are independent: trace them concurrently
    let traced: Vec<Result<_>> = a.beta.par_iter().map(|&b| trace_frc_with(&model, b, (lo, hi), a.channel, &cfg)).collect();
    let mut files = Vec::new();
    for (b, r) in a.beta.iter().zip(traced) {
        let frc = r?;
        let name = format!("frc_beta_{b}.csv");
        frc.write_csv(&a.out.join(&name))?;
        files.push(serde_json::json!({ "beta": b, "file": name, "points": frc.points.len(), "budget_exhausted": frc.budget_exhausted, "stalled": frc.stalled }));
    }
    write_json(&a.out.join("frc_index.json"), &files)?;
    let conf = serde_json::json!({ "beta": a.beta, "omega_range": [lo, hi], "channel": a.channel, "trace": cfg });
    manifest(&a.out, "frc", vec![a.model.clone()], conf, None)
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let c = FrcCurve::read_csv(&a.frc)?;
    let r = FrcCurve::read_csv(&a.frc_ref)?;
    let rep = mcdrc(&c, &r)?;
    println!("{}", serde_json::to_string(&rep).expect("report serializes"));
    if let Some(p) = &a.out {
        write_json(p, &rep)?;
    }
    Ok(())
}

fn cmd_pod(a: &PodArgs) -> Result<()> {
    let x = if a.snapshot.extension().is_some_and(|e| e == "bin") {
        SnapshotMatrix::read_binary(&a.snapshot, 0.0, a.dt)?
    } else {
        SnapshotMatrix::read_csv(&a.snapshot)?
    };
    let (basis, reduced) = reduce(&x, a.k_hat)?;
    ensure_dir(&a.out)?;
    write_trajectory(&reduced, &a.out.join("reduced.csv"))?;
    let modes = SnapshotMatrix { data: basis.modes.clone(), t0: 0.0, dt: 1.0 };
    modes.write_csv(&a.out.join("modes.csv"))?;
    write_json(
        &a.out.join("pod.json"),
        &serde_json::json!({
            "k_hat": basis.k_hat,
            "singular_values": basis.singular_values,
            "spectrum": basis.spectrum,
            "truncation_error": basis.truncation_error(),
            "layout": "rows = time, columns = dofs; modes.csv rows are dofs (t column = dof index), columns are modes",
        }),
    )?;
    manifest(&a.out, "pod", vec![a.snapshot.display().to_string()], serde_json::json!({ "k_hat": a.k_hat, "dt": x.dt }), None)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Identify(a) => cmd_identify(a),
        Command::Frc(a) => cmd_frc(a),
        Command::Score(a) => cmd_score(a),
        Command::Pod(a) => cmd_pod(a),
    }
}

/// Machine-parsable error report.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({ "error": { "code": e.code(), "message": e.to_string() } }).to_string()
}

fn out_dir(cli: &Cli) -> Option<&Path> {
    match &cli.command {
        Command::Generate(a) => Some(&a.out),
        Command::Identify(a) => Some(&a.out),
        Command::Frc(a) => Some(&a.out),
        Command::Score(_) => None,
        Command::Pod(a) => Some(&a.out),
    }
}

/// Run and map failures to an exit status, reporting them on stderr and,
/// when the run directory exists, in `error.json`.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let report = error_json(&e);
            eprintln!("{report}");
            if let Some(dir) = out_dir(cli) {
                if dir.is_dir() {
                    let _ = std::fs::write(dir.join("error.json"), report + "\n");
                }
            }
            e.exit_status()
        }
    }
}
