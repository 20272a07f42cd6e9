use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fadingfl::baselines::BaselineKind;
use fadingfl::runner::{
    partition_report, run_baseline, run_evaluation, run_training, verify_theory, ExperimentConfig,
    Profile, RunOutcome, TheoryCheck, TrainingCheckpoint,
};

#[derive(Parser)]
#[command(name = "fadingfl", version, about = "Spectrum and power allocation for federated learning over fading uplinks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; missing keys take the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `run.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// desk or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    dump_effective_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the allocation agents alongside federated learning.
    Train,
    /// Greedy decentralized execution from a training checkpoint.
    Eval {
        /// Defaults to `checkpoint.json` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a heuristic allocation policy through the same loop.
    Baseline {
        /// max-sum-rate, max-individual, random or perfect.
        #[arg(long)]
        policy: String,
    },
    /// Monte Carlo checks of the convergence analysis on a quadratic task.
    VerifyTheory {
        /// lemma1, lemma2 or theorem1.
        #[arg(long)]
        check: String,
        /// Defaults to `theory.trials`.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Per-client sizes and class mix of the training data.
    PartitionReport,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let profile = common
        .profile
        .as_deref()
        .map(str::parse::<Profile>)
        .transpose()?;
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path, profile)
            .with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::from_toml_str("", profile)?,
    };
    if let Some(seed) = common.seed {
        config.run.seed = seed;
    }
    if let Some(out) = &common.out {
        config.run.output_dir = out.display().to_string();
    }
    config.validate()?;
    Ok(config)
}

fn summarize(kind: &str, outcome: &RunOutcome, out: &Path) {
    println!(
        "{kind} {}: {} episodes, final accuracy {:.4}, final-run upload success {:.3}, outputs in {}",
        outcome.run_id,
        outcome.rows.len(),
        outcome.final_accuracy,
        outcome.final_run_success_rate,
        out.display()
    );
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.common)?;
    if cli.common.dump_effective_config {
        print!("{}", config.to_toml_string()?);
        return Ok(());
    }
    let out = PathBuf::from(&config.run.output_dir);
    match cli.command {
        Command::Train => {
            let outcome = run_training(&config, Some(&out))?;
            summarize("train", &outcome, &out);
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| out.join("checkpoint.json"));
            let checkpoint = TrainingCheckpoint::load(&path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let eval_out = out.join("eval");
            let outcome = run_evaluation(&config, &checkpoint, Some(&eval_out))?;
            summarize("eval", &outcome, &eval_out);
        }
        Command::Baseline { policy } => {
            let kind: BaselineKind = policy.parse()?;
            let outcome = run_baseline(&config, kind, Some(&out))?;
            summarize(kind.name(), &outcome, &out);
        }
        Command::VerifyTheory { check, trials } => {
            let name = check;
            let check: TheoryCheck = name.parse()?;
            let trials = trials.unwrap_or(config.theory.trials);
            let report = verify_theory(&config, check, trials, config.run.seed)?;
            let path = out.join("theory_report.json");
            write_json(&path, &report)?;
            println!(
                "{}: {} ({} trials), report in {}",
                name,
                if report.pass { "pass" } else { "FAIL" },
                trials,
                path.display()
            );
            if !report.pass {
                anyhow::bail!("theory check failed");
            }
        }
        Command::PartitionReport => {
            let report = partition_report(&config)?;
            let path = out.join("partition_report.json");
            write_json(&path, &report)?;
            for (n, (size, counts)) in report.sizes.iter().zip(&report.class_counts).enumerate() {
                println!("client {n}: {size} samples, per class {counts:?}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
