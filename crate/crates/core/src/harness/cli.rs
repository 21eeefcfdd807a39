//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running. Errors go to standard error as one JSON line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use super::{
    checkpoint_of, generate_data, landscape, run, separability, sweep, RunConfig, Session,
};
use crate::datagen::to_csv;
use crate::error::Error;

#[derive(Debug, Parser)]
#[command(name = "tlla", version, about = "Test-time loss landscape adaptation on a toy dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set stss.rho_prime=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; takes precedence over the config and TLLA_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write every dataset of a run as CSV under `<out>/data`.
    GenData(Common),
    /// Pretrain the frozen model and save `checkpoint.json`.
    Pretrain(Common),
    /// Pretrain, tune the prompt and save `tuned_checkpoint.json` with its log.
    Tune(Common),
    /// Full pipeline: metrics, per-sample records and the resolved config.
    Adapt(Common),
    /// Sweep one selection parameter and write a CSV table.
    Sweep(Common),
    /// Compare score distributions of a near and a far shift.
    Separability(Common),
    /// Export a loss surface around the tuned prompt.
    Landscape(Common),
}

impl Command {
    fn parts(&self) -> (&'static str, &Common) {
        match self {
            Command::GenData(c) => ("gen-data", c),
            Command::Pretrain(c) => ("pretrain", c),
            Command::Tune(c) => ("tune", c),
            Command::Adapt(c) => ("adapt", c),
            Command::Sweep(c) => ("sweep", c),
            Command::Separability(c) => ("separability", c),
            Command::Landscape(c) => ("landscape", c),
        }
    }
}

fn error_line(err: &Error) -> String {
    let mut v = json!({ "error": err.kind(), "message": err.to_string() });
    if let Some(stage) = err.stage() {
        v["stage"] = json!(stage);
    }
    let mut inner = err;
    while let Error::Stage { source, .. } = inner {
        inner = source;
    }
    if let Error::Io { path, .. } = inner {
        v["path"] = json!(path.display().to_string());
    }
    v.to_string()
}

/// Builds the resolved config for a command line.
fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path, &common.overrides).map_err(|e| match e {
            Error::InvalidConfig(m) if !path.exists() => Error::Io {
                path: path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, m),
            },
            e => e,
        })?,
        None => RunConfig::default().with_overrides(&common.overrides)?,
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.resolve(common.seed)
}

fn execute(name: &str, cfg: &RunConfig) -> Result<Vec<PathBuf>, Error> {
    let dir = cfg.out_dir();
    let resolved = ("config.resolved.json".to_string(), (serde_json::to_string_pretty(cfg)? + "\n").into_bytes());
    let files: Vec<(String, Vec<u8>)> = match name {
        "gen-data" => {
            let data = generate_data(cfg)?;
            let mut files = vec![resolved];
            for (n, ds) in data.named() {
                files.push((format!("data/{n}.csv"), to_csv(ds)?.into_bytes()));
            }
            files
        }
        "pretrain" => {
            let session = Session::prepare(cfg)?;
            vec![resolved, ("checkpoint.json".into(), checkpoint_of(&session, None).to_json()?.into_bytes())]
        }
        "tune" => {
            let session = Session::prepare(cfg)?;
            let tuned = session.tune(session.cfg.methods.sapt_on)?;
            vec![
                resolved,
                ("tuned_checkpoint.json".into(), checkpoint_of(&session, Some(&tuned.prompt)).to_json()?.into_bytes()),
                ("train_log.jsonl".into(), tuned.log_jsonl()?.into_bytes()),
            ]
        }
        "adapt" => run(cfg)?.files()?,
        "sweep" => {
            let rows = sweep(cfg)?;
            vec![resolved, (cfg.sweep.output.clone(), super::sweep_csv(&rows).into_bytes())]
        }
        "separability" => {
            let out = separability(cfg)?;
            vec![resolved, ("separability.json".into(), (serde_json::to_string_pretty(&out)? + "\n").into_bytes())]
        }
        "landscape" => {
            let (file, grid) = landscape(cfg)?;
            vec![resolved, (file, grid.to_csv().into_bytes())]
        }
        _ => unreachable!("unknown command {name}"),
    };
    for (n, _) in &files {
        let p = Path::new(n);
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            let full = dir.join(parent);
            std::fs::create_dir_all(&full).map_err(|e| Error::io(&full, e).in_stage("write"))?;
        }
    }
    super::write_outputs(&dir, &files)
}

/// Runs the command line and returns the process exit code.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return 0;
            }
            let line = json!({ "error": "UsageError", "message": e.kind().to_string() });
            let _ = writeln!(stderr, "{line}");
            let _ = write!(stderr, "{}", e.render());
            return 1;
        }
    };
    let (name, common) = cli.command.parts();
    let cfg = match load_config(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(&e));
            return 1;
        }
    };
    match execute(name, &cfg) {
        Ok(paths) => {
            let outputs: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
            let _ = writeln!(stdout, "{}", json!({ "command": name, "seed": cfg.run_seed(), "outputs": outputs }));
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(&e));
            2
        }
    }
}
