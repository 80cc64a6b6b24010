use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use latentswap::pipeline::{run, Command, PipelineConfig};
use latentswap::{Error, Result};

#[derive(Parser)]
#[command(name = "latentswap", version, about = "Mask-guided object swapping with a small diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Invert an image to its noise latent.
    Invert(RunArgs),
    /// Swap the masked object for a concept.
    Swap(RunArgs),
    /// Insert a concept into a masked background region.
    Insert(RunArgs),
    /// Apply planN.mask / planN.concept swaps in order.
    MultiSwap(RunArgs),
    /// Write inspection images of the recorded trace.
    TraceDump(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: PathBuf,
    /// `--key value` or `--key=value` pairs overriding the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, got `{arg}`")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn execute(command: Command, args: &RunArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&args.config).map_err(|e| e.at("config"))?;
    for (k, v) in parse_overrides(&args.overrides).map_err(|e| e.at("config"))? {
        cfg.set(&k, &v).map_err(|e| e.at("config"))?;
    }
    let report = run(command, &cfg)?;
    for p in &report.outputs {
        log::info!("wrote {}", p.display());
    }
    log::info!("manifest {}", report.manifest_path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Cmd::Invert(a) => (Command::Invert, a),
        Cmd::Swap(a) => (Command::Swap, a),
        Cmd::Insert(a) => (Command::Insert, a),
        Cmd::MultiSwap(a) => (Command::MultiSwap, a),
        Cmd::TraceDump(a) => (Command::TraceDump, a),
    };
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("latentswap {command}: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
