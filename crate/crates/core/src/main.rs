use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lass::cli::{run_command, Command};
use lass::config::ExperimentConfig;

/// Language-specific sub-network experiments on synthetic multilingual data.
#[derive(Parser)]
#[command(name = "lass", version)]
struct Args {
    /// INI file with [data], [model], [train], [mask], [eval] and [sweep] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every artifact of the experiment.
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun finished commands and replace artifacts from another configuration.
    #[arg(long, global = true)]
    force: bool,
    /// One of gen-data, train-base, make-masks, lass-train, evaluate,
    /// zero-shot, extend, analyze, sweep.
    #[arg(required = true)]
    commands: Vec<String>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = (|| {
        let env = std::env::vars().filter(|(k, _)| k.starts_with("LASS_"));
        let mut cfg = ExperimentConfig::load(args.config.as_deref(), env)?;
        if let Some(seed) = args.seed {
            cfg.set_seed(seed);
        }
        let commands = args
            .commands
            .iter()
            .map(|c| c.parse::<Command>())
            .collect::<lass::Result<Vec<_>>>()?;
        let mut out = std::io::stderr();
        for cmd in commands {
            run_command(cmd, &cfg, &args.run_dir, args.force, &mut out)?;
        }
        Ok::<_, lass::Error>(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
