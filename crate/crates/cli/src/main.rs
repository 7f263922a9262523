use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use idpo::config::ExperimentConfig;
use idpo::dpo::Variant;
use idpo::experiment;
use idpo::Error;

/// Toy diffusion preference post-training: pretrain, build preference
/// pairs, post-train with Diffusion-DPO or Inversion-DPO, and diagnose.
#[derive(Parser, Debug)]
#[command(name = "idpo", version)]
struct Cli {
    /// Config file of `key = value` lines. Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides one config key, e.g. `--set posttrain.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base denoiser; writes base.idpo and pretrain.csv.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample and score candidate pools; writes the pair file and a score CSV.
    Pairgen {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pair file to write; scores go to `<stem>_scores.csv` beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Preference post-training; writes posttrained.idpo, posttrain.csv, eval.csv.
    Posttrain {
        #[command(flatten)]
        inputs: TrainInputs,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Inversion steps T used during training.
        #[arg(long)]
        inversion_steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Round-trip error and adjacent noise gap per step count; writes
    /// diagnose.csv and trajectories.csv.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched-budget comparison of both variants and the single-step
    /// ablation; writes compare.csv and compare_summary.csv.
    Compare {
        #[command(flatten)]
        inputs: TrainInputs,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainInputs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli, extra: &[String]) -> idpo::Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend_from_slice(extra);
    match &cli.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => {
            let mut kv = idpo::config::KeyValues::default();
            for o in &overrides {
                kv.set(o)?;
            }
            ExperimentConfig::from_kv(&kv)
        }
    }
}

fn show(path: &Path) -> String {
    path.display().to_string()
}

fn run(cli: &Cli) -> idpo::Result<()> {
    match &cli.command {
        Command::Pretrain { out } => {
            let cfg = load_config(cli, &[])?;
            let path = experiment::run_pretrain(&cfg, out)?;
            println!("wrote {}", show(&path));
        }
        Command::Pairgen { checkpoint, out } => {
            let cfg = load_config(cli, &[])?;
            let n = experiment::run_pairgen(&cfg, checkpoint, out)?;
            println!("wrote {n} pairs to {}", show(out));
        }
        Command::Posttrain {
            inputs,
            variant,
            inversion_steps,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(v) = variant {
                extra.push(format!("posttrain.variant={v}"));
            }
            if let Some(t) = inversion_steps {
                extra.push(format!("schedule.T={t}"));
            }
            let cfg = load_config(cli, &extra)?;
            let outcome = experiment::run_posttrain(&cfg, &inputs.checkpoint, &inputs.pairs, out)?;
            let last = outcome.report.last().expect("posttraining logs step 0");
            println!(
                "{} T={} steps={}: held-out accuracy {:.3}, mean reward {:.5} -> {:.5}",
                cfg.posttrain.dpo.variant,
                cfg.steps,
                cfg.posttrain.steps,
                last.pair_accuracy.unwrap_or(0.0),
                outcome.base_eval.mean_reward,
                outcome.final_eval.mean_reward
            );
        }
        Command::Diagnose { checkpoint, out } => {
            let cfg = load_config(cli, &[])?;
            for row in experiment::run_diagnose(&cfg, checkpoint, out)? {
                println!(
                    "T={:3} roundtrip_error={:.6} adjacent_eps_gap={:.6}",
                    row.steps, row.roundtrip_error, row.adjacent_eps_gap
                );
            }
        }
        Command::Compare { inputs, out } => {
            let cfg = load_config(cli, &[])?;
            for run in experiment::run_compare(&cfg, &inputs.checkpoint, &inputs.pairs, out)? {
                let steps = run
                    .steps_to_threshold
                    .map_or_else(|| "none".to_string(), |s| s.to_string());
                println!(
                    "{:24} steps_to_threshold={steps:>5} accuracy={:.3} reward={:.5}",
                    run.label, run.final_accuracy, run.final_reward
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
