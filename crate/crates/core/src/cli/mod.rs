//! Command-line entry point. Every run writes `manifest.json` into its
//! output directory; `--replay manifest.json` re-runs it from the recorded
//! arguments.

mod args;
mod run;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;
use serde::{Deserialize, Serialize};

pub use args::Cli;
pub use run::STEPLOG_HEADER;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const RUN_MANIFEST: &str = "manifest.json";

const SUBCOMMANDS: [&str; 5] = ["gen-data", "train", "verify", "landscape", "analyze"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] crate::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Run(crate::Error::Config(_)) => EXIT_USAGE,
            CliError::Run(_) => EXIT_RUNTIME,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments after the program name, with config files expanded and
    /// the seed made explicit.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Output files relative to the output directory.
    pub artifacts: Vec<String>,
    pub version: String,
    pub duration_secs: f64,
}

pub fn main_with_args(args: Vec<OsString>) -> i32 {
    match run_cli(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run with --help for usage");
            }
            e.exit_code()
        }
    }
}

fn take_flag(args: &mut Vec<String>, flag: &str) -> Result<Option<String>, CliError> {
    let eq = format!("{flag}=");
    let Some(i) = args.iter().position(|a| a == flag || a.starts_with(&eq)) else {
        return Ok(None);
    };
    let a = args.remove(i);
    if let Some(v) = a.strip_prefix(&eq) {
        return Ok(Some(v.to_string()));
    }
    if i < args.len() {
        Ok(Some(args.remove(i)))
    } else {
        Err(CliError::Usage(format!("{flag} needs a value")))
    }
}

/// Flat `key=value` lines become `--key value` flags. `true` adds a bare
/// flag and `false` drops it.
fn config_flags(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{} line {}: expected key=value", path.display(), n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        match v {
            "true" => out.push(format!("--{k}")),
            "false" => {}
            _ => {
                out.push(format!("--{k}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

fn parse(argv: &[String]) -> Result<Result<Cli, i32>, CliError> {
    let full = std::iter::once("topicattn".to_string()).chain(argv.iter().cloned());
    match Cli::try_parse_from(full) {
        Ok(cli) => Ok(Ok(cli)),
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            Ok(Err(code))
        }
    }
}

fn run_cli(args: Vec<OsString>) -> Result<i32, CliError> {
    let mut argv = args
        .into_iter()
        .skip(1)
        .map(|a| a.into_string().map_err(|a| CliError::Usage(format!("argument {a:?} is not UTF-8"))))
        .collect::<Result<Vec<_>, _>>()?;

    if let Some(path) = take_flag(&mut argv, "--replay")? {
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        // anything given next to --replay is appended, so it wins
        let extra = std::mem::take(&mut argv);
        argv = m.argv;
        argv.extend(extra);
    }
    if let Some(path) = take_flag(&mut argv, "--config")? {
        let flags = config_flags(Path::new(&path))?;
        let at = argv
            .iter()
            .position(|a| SUBCOMMANDS.contains(&a.as_str()))
            .ok_or_else(|| CliError::Usage("--config needs a subcommand".into()))?;
        argv.splice(at + 1..at + 1, flags);
    }

    let mut cli = match parse(&argv)? {
        Ok(c) => c,
        Err(code) => return Ok(code),
    };
    if cli.command.is_randomized() && cli.command.seed().is_none() {
        argv.push("--seed".into());
        argv.push(crate::rng::fresh_seed().to_string());
        cli = match parse(&argv)? {
            Ok(c) => c,
            Err(code) => return Ok(code),
        };
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let started = Instant::now();
    let seed = cli.command.seed().unwrap_or(0);
    let outcome = pool.install(|| match &cli.command {
        args::Command::GenData(a) => run::gen_data(a, seed),
        args::Command::Train(a) => run::train(a, seed),
        args::Command::Verify(a) => run::verify(a),
        args::Command::Landscape(a) => run::landscape(a, seed),
        args::Command::Analyze(a) => run::analyze(a, seed),
    })?;

    let out_dir = cli.command.out_dir();
    let manifest = RunManifest {
        subcommand: cli.command.name().to_string(),
        argv,
        config: serde_json::to_value(&cli.command)?,
        seeds: cli.command.seed().into_iter().collect(),
        artifacts: outcome.artifacts.iter().map(|p| relative(p, out_dir)).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(RUN_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;

    Ok(match outcome.verified {
        Some(false) => EXIT_VERIFY,
        _ => EXIT_OK,
    })
}

fn relative(p: &Path, base: &PathBuf) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().replace('\\', "/")
}
