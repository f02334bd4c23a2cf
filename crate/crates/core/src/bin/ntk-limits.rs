use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser};
use ntk_limits::cli::{
    exit_code, run, write_outputs, CommandKind, Experiment, ExperimentConfig, Format,
};
use ntk_limits::Error;

/// Infinite-width kernels of fully-connected, graph-based and deconvolutional
/// networks, with finite-width Monte Carlo checks.
#[derive(Parser)]
#[command(name = "ntk-limits", version)]
struct Cli {
    #[arg(value_enum)]
    command: CommandKind,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Args)]
struct Flags {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Worker thread cap.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print nothing on success.
    #[arg(long, short)]
    quiet: bool,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.flags.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(Experiment::default_for(cli.command)),
    };
    if cfg.experiment.kind() != cli.command {
        return Err(Error::Config(format!(
            "config is for `{}`, not `{}`",
            cfg.experiment.kind().name(),
            cli.command.name()
        )));
    }
    let f = &cli.flags;
    if let Some(out) = &f.out {
        cfg.out = out.clone();
    }
    if let Some(format) = f.format {
        cfg.format = format;
    }
    if let Some(jobs) = f.jobs {
        cfg.jobs = Some(jobs);
    }
    if let Some(seed) = f.seed {
        cfg.seed = seed;
    }
    if f.quiet {
        cfg.verbosity = 0;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    if cli.flags.print_config {
        // A closed pipe (e.g. `| head`) is not an error here.
        let _ = writeln!(std::io::stdout(), "{}", cfg.to_json());
        return ExitCode::SUCCESS;
    }
    let result = run(&cfg).and_then(|out| write_outputs(&cfg, &out).map(|files| (out, files)));
    match result {
        Ok((out, files)) => {
            if cfg.verbosity > 0 {
                for line in &out.summary {
                    println!("{line}");
                }
                println!("wrote {} files to {}", files.len(), cfg.out.display());
            }
            for f in &out.failures {
                eprintln!("check failed: {f}");
            }
            ExitCode::from(out.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
