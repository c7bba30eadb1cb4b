//! `tlsecho`: command-line front end of the toolkit.
//!
//! Exit status is 0 on success, 1 for invalid input and 2 when a numerical
//! procedure fails to converge.

mod commands;
mod manifest;

use anyhow::{Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use manifest::{ConfigRef, Output, RunManifest};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use tlsecho::config::DEFAULT_TOML;
use tlsecho::Config;

/// Directory searched for `tlsecho.toml` and for relative `--config` paths.
pub const CONFIG_DIR_ENV: &str = "TLSECHO_CONFIG_DIR";

#[derive(Parser, Debug)]
#[command(name = "tlsecho", version, about = "Echo decoherence of dipolar two-level-system networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Sample configuration (TOML). Defaults to $TLSECHO_CONFIG_DIR/tlsecho.toml, then the built-in LiYF4:Tb file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for outputs and manifest.json; stdout when absent.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Single-ion levels and matrix elements (optionally pair levels) at a field.
    Levels(commands::LevelsArgs),
    /// Fluctuation rate table of all hyperfine species.
    Rates(commands::RatesArgs),
    /// Evaluate one dephasing kernel on a log time grid.
    Kernel(commands::KernelArgs),
    /// Synthesize a composed echo curve.
    Echo(commands::EchoArgs),
    /// Stretched-exponential fit of one trace CSV, with optional Mims filtering.
    FitTrace(commands::FitTraceArgs),
    /// Global (c1, c2, W_Delta) fit over a list of traces.
    Fit(commands::FitArgs),
    /// Monte Carlo and exact-diagonalization validation suites.
    McValidate(commands::McValidateArgs),
    /// Concentration needed for a target coherence time, singles vs pairs.
    Abundance(commands::AbundanceArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Shared run state handed to every subcommand.
pub struct Run {
    pub cfg: Config,
    pub out: Output,
}

fn load_config(path: Option<&Path>) -> Result<(Config, ConfigRef)> {
    let env_dir = std::env::var_os(CONFIG_DIR_ENV).map(PathBuf::from);
    let resolved = match path {
        Some(p) if p.exists() => Some(p.to_path_buf()),
        Some(p) => match env_dir.as_ref().map(|d| d.join(p)).filter(|q| p.is_relative() && q.exists()) {
            Some(q) => Some(q),
            None => anyhow::bail!("config file {} not found", p.display()),
        },
        None => env_dir.map(|d| d.join("tlsecho.toml")).filter(|q| q.exists()),
    };
    match resolved {
        Some(p) => {
            let cfg = Config::load(&p)?;
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            Ok((
                cfg,
                ConfigRef {
                    path: p.display().to_string(),
                    sha256: manifest::sha256_text(&text),
                },
            ))
        }
        None => Ok((
            Config::default(),
            ConfigRef {
                path: "<builtin>".into(),
                sha256: manifest::sha256_text(DEFAULT_TOML),
            },
        )),
    }
}

/// Flag values that affect results; output location and thread count do not.
fn recorded_flags(m: &ArgMatches) -> BTreeMap<String, String> {
    let mut flags = BTreeMap::new();
    for id in m.ids() {
        let name = id.as_str();
        if matches!(name, "out_dir" | "threads" | "config") {
            continue;
        }
        if let Ok(Some(raw)) = m.try_get_raw(name) {
            let v: Vec<String> = raw.map(|s| s.to_string_lossy().into_owned()).collect();
            flags.insert(name.to_string(), v.join(","));
        }
    }
    flags
}

fn run(argv: Vec<String>) -> Result<()> {
    let matches = Cli::command().try_get_matches_from(&argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let common = match &cli.command {
        Command::Levels(a) => &a.common,
        Command::Rates(a) => &a.common,
        Command::Kernel(a) => &a.common,
        Command::Echo(a) => &a.common,
        Command::FitTrace(a) => &a.common,
        Command::Fit(a) => &a.common,
        Command::McValidate(a) => &a.common,
        Command::Abundance(a) => &a.common,
    }
    .clone();
    if let Some(n) = common.threads {
        anyhow::ensure!(n >= 1, "invalid threads: must be >= 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (cfg, cref) = load_config(common.config.as_deref())?;
    let seed = match &cli.command {
        Command::Echo(a) => Some(a.seed),
        Command::McValidate(a) => Some(a.seed),
        _ => None,
    };
    let mut configs = vec![cref];
    if let Command::Fit(a) = &cli.command {
        let text = std::fs::read_to_string(&a.traces).with_context(|| format!("reading {}", a.traces.display()))?;
        configs.push(ConfigRef {
            path: a.traces.display().to_string(),
            sha256: manifest::sha256_text(&text),
        });
    }
    let manifest = RunManifest {
        subcommand: name.to_string(),
        configs,
        flags: recorded_flags(sub),
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        output_dir: common.out_dir.clone(),
        argv,
    };
    let run = Run {
        cfg,
        out: Output::new(&manifest)?,
    };
    match cli.command {
        Command::Levels(a) => commands::levels(&run, &a),
        Command::Rates(a) => commands::rates(&run, &a),
        Command::Kernel(a) => commands::kernel(&run, &a),
        Command::Echo(a) => commands::echo(&run, &a),
        Command::FitTrace(a) => commands::fit_trace(&run, &a),
        Command::Fit(a) => commands::fit(&run, &a),
        Command::McValidate(a) => commands::mc_validate(&run, &a),
        Command::Abundance(a) => commands::abundance(&run, &a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<tlsecho::Error>()) {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(ce) = err.downcast_ref::<clap::Error>() {
                let _ = ce.print();
                return if ce.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
            }
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
