use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simfsvgd::evaluation::{export_curves, EvalRecord};
use simfsvgd::experiments::{
    eval_checkpoint, export_dir, load_config, run_experiment, run_score_bench, ExperimentConfig, ScoreBenchConfig,
};

#[derive(Parser)]
#[command(name = "simfsvgd", version, about = "Simulator-informed functional priors for BNN dynamics models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config merged over the experiment's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set fsvgd.steps=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Score-estimator accuracy against analytic Gaussian scores.
    ScoreBench(RunArgs),
    /// 1-D sinusoid study with posterior dumps.
    Sinusoid1d(RunArgs),
    /// Pendulum sim-to-real study (NLL vs training-set size).
    Pendulum(RunArgs),
    /// Evaluate a saved ensemble checkpoint on a saved dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "checkpoint")]
        method: String,
        /// Seed for the calibration draws.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Append the record to this results CSV instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild results.csv and results.agg.csv from an output directory.
    Export {
        #[arg(long)]
        out: PathBuf,
    },
}

fn seeds_override(args: &RunArgs) -> Vec<String> {
    let mut sets = args.sets.clone();
    if let Some(s) = args.seed {
        sets.push(format!("seeds=[{s}]"));
    }
    sets
}

fn run_study(default: ExperimentConfig, args: &RunArgs) -> simfsvgd::Result<()> {
    let cfg = load_config(&default, args.config.as_deref(), &seeds_override(args))?;
    let records = run_experiment(&cfg, &args.out, args.jobs)?;
    println!("{} cells -> {}", records.len(), args.out.join("results.csv").display());
    Ok(())
}

fn append_record(path: &Path, rec: EvalRecord) -> simfsvgd::Result<()> {
    let mut all = if path.exists() {
        simfsvgd::evaluation::load_curves(path)?
    } else {
        Vec::new()
    };
    all.push(rec);
    export_curves(&all, path)
}

fn run(cli: Cli) -> simfsvgd::Result<()> {
    match cli.command {
        Command::ScoreBench(args) => {
            let cfg = load_config(&ScoreBenchConfig::default(), args.config.as_deref(), &seeds_override(&args))?;
            let rows = run_score_bench(&cfg, &args.out, args.jobs)?;
            println!("{} rows -> {}", rows.len(), args.out.join("score_bench.csv").display());
        }
        Command::Sinusoid1d(args) => run_study(ExperimentConfig::sinusoid(), &args)?,
        Command::Pendulum(args) => run_study(ExperimentConfig::pendulum(), &args)?,
        Command::Eval {
            checkpoint,
            data,
            method,
            seed,
            out,
        } => {
            let rec = eval_checkpoint(&checkpoint, &data, &method, seed)?;
            match out {
                Some(path) => append_record(&path, rec)?,
                None => println!("{}", serde_json::to_string(&rec)?),
            }
        }
        Command::Export { out } => {
            let records = export_dir(&out)?;
            println!("{} records -> {}", records.len(), out.join("results.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
