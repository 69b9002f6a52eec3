use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wscl::config::RunConfig;
use wscl::pipeline::{self, Axis, Metric, TrainPhase};
use wscl::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "wscl", version, about = "Learn state and action correspondences between two agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `method` in the config (cc, dcc-T, weascl-T, oracle).
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate demonstrations and paired-abstraction files.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train phase 1 (similarity nets, forward model), phase 2 (maps) or both.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        phase: String,
    },
    /// Evaluate a trained model (or the oracle) and write report CSVs.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: return, compounding, recovery, misalignment, similarity.
        #[arg(long, default_value = "return,compounding,recovery,misalignment,similarity")]
        metrics: String,
    },
    /// Train and evaluate every cell along one axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// horizon, seed or method.
        #[arg(long)]
        axis: String,
    },
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(m) = &common.method {
        cfg.method = m.clone();
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, force } => {
            let (cfg, out) = load(&common)?;
            let ds = pipeline::generate(&cfg)?;
            let m = pipeline::write_dataset(&out, &cfg, &ds, force)?;
            log::info!("wrote {} files to {}", m.files.len(), out.display());
        }
        Command::Train { common, phase } => {
            let phase: TrainPhase = phase.parse()?;
            let (cfg, out) = load(&common)?;
            let s = pipeline::cmd_train(&out, &cfg, phase)?;
            report_status("phase 1", s.phase1_status.map(|s| s.as_str()));
            report_status("phase 2", s.phase2_status.map(|s| s.as_str()));
        }
        Command::Eval { common, metrics } => {
            let metrics = Metric::parse_list(&metrics)?;
            let (cfg, out) = load(&common)?;
            let s = pipeline::cmd_eval(&out, &cfg, &metrics)?;
            for f in &s.written {
                println!("{}", out.join(f).display());
            }
            if !s.errors.is_empty() {
                let names: Vec<&str> = s.errors.keys().map(String::as_str).collect();
                return Err(Error::InvalidArgument(format!("metrics failed: {}", names.join(", "))));
            }
        }
        Command::Sweep { common, axis } => {
            let axis: Axis = axis.parse()?;
            let (cfg, out) = load(&common)?;
            let results = pipeline::cmd_sweep(&out, &cfg, axis)?;
            let failed = results.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                log::warn!("{failed} of {} sweep cells failed; see the error column", results.len());
            }
            println!("{}", Path::new(&out).join(format!("sweep_{}.csv", axis.name())).display());
        }
    }
    Ok(())
}

fn report_status(what: &str, status: Option<&str>) {
    match status {
        Some("max-epochs") => log::warn!("{what} hit its epoch cap before converging"),
        Some(s) => log::info!("{what}: {s}"),
        None => {}
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WSCL_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
