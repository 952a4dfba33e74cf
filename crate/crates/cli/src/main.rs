use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowsense::config::{init_template, RunConfig};
use flowsense::error::Error;
use flowsense::pipeline::{run_pipeline, run_stage, StageReport};

#[derive(Parser)]
#[command(name = "flowsense", version, about = "Network-flow behavioral modeling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration template with all defaults.
    Init {
        #[arg(default_value = "flowsense.toml")]
        path: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Parse flows and aggregate hourly category traffic.
    Ingest(Common),
    /// Build hourly feature vectors and training windows.
    Featurize(Common),
    /// Circadian metrics for each survey week.
    Classical(Common),
    /// Train the backbone and per-user adapters, then extract latents.
    Train(Common),
    /// Train the sparse autoencoder on the latents.
    Sae(Common),
    /// Label and filter SAE features.
    Interpret(Common),
    /// Between/within-person models of survey outcomes.
    Stats(Common),
    /// Leave-one-subject-out probes of classical metrics.
    Probe(Common),
    /// Generate a synthetic cohort with known ground truth.
    Synth(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

fn load(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    cfg.threads = c.threads;
    cfg.validate()?;
    Ok(cfg)
}

fn report(reports: &[StageReport]) -> ExitCode {
    let mut non_converged = 0;
    for r in reports {
        println!(
            "{}: {} outputs, manifest {}",
            r.stage,
            r.outputs.len(),
            r.manifest.display()
        );
        non_converged += r.non_converged;
    }
    if non_converged > 0 {
        eprintln!("warning: {non_converged} model fits did not converge; results were written");
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}

fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let (stage, common) = match cli.command {
        Command::Init { path, force } => {
            if path.exists() && !force {
                return Err(Error::Config(format!(
                    "{} exists; pass --force to overwrite",
                    path.display()
                )));
            }
            std::fs::write(&path, init_template())?;
            println!("wrote {}", path.display());
            return Ok(ExitCode::SUCCESS);
        }
        Command::Pipeline(c) => {
            let cfg = load(&c)?;
            return Ok(report(&run_pipeline(&cfg)?));
        }
        Command::Ingest(c) => ("ingest", c),
        Command::Featurize(c) => ("featurize", c),
        Command::Classical(c) => ("classical", c),
        Command::Train(c) => ("train", c),
        Command::Sae(c) => ("sae", c),
        Command::Interpret(c) => ("interpret", c),
        Command::Stats(c) => ("stats", c),
        Command::Probe(c) => ("probe", c),
        Command::Synth(c) => ("synth", c),
    };
    let cfg = load(&common)?;
    Ok(report(&[run_stage(stage, &cfg)?]))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}
