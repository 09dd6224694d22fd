use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fedfsl::checkpoint::Checkpoint;
use fedfsl::config::{ExperimentConfig, KEYS, OUTPUT_ROOT_ENV};
use fedfsl::experiment::{checkpoint_features, evaluate_checkpoint, run_experiment};
use fedfsl::metrics;

/// Federated few-shot learning simulator.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file (`[section]` headers and `key = value` lines).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides such as `--gamma 0.5` or `--federation.rounds=20`; they
    /// take precedence over the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Verb {
    /// Train every configured seed and write metrics, checkpoints and
    /// evaluation files.
    Run {
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Few-shot accuracy of a checkpoint on the configured novel classes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the confusion matrix here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Generator features of the novel samples under a checkpoint.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for features.csv and classifier.csv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Final accuracy per algorithm, mean ± ci95 over runs.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Write the summary CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List configuration keys with their defaults.
    Keys,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.verb {
        Verb::Run { dry_run, args } => {
            let cfg = args.load()?;
            if dry_run {
                print!("{}", cfg.to_text());
                return Ok(());
            }
            let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
            let out = run_experiment(&cfg, root.as_deref())?;
            for r in &out.runs {
                match &r.final_eval {
                    Some(e) => println!(
                        "seed {}: accuracy {:.2}% ± {:.2}% over {} episodes",
                        r.seed,
                        100.0 * e.mean_accuracy,
                        100.0 * e.ci95_halfwidth,
                        e.episodes_evaluated
                    ),
                    None => println!("seed {}: {} rounds, not evaluated", r.seed, r.records.len()),
                }
            }
            println!("wrote {}", out.run_dir.display());
        }
        Verb::Eval { checkpoint, out, args } => {
            let cfg = args.load()?;
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let r = evaluate_checkpoint(&cfg, &ckpt)?;
            println!(
                "accuracy {:.2}% ± {:.2}% over {} episodes",
                100.0 * r.mean_accuracy,
                100.0 * r.ci95_halfwidth,
                r.episodes_evaluated
            );
            for (c, a) in &r.per_class_accuracy {
                println!("  class {c}: {:.2}%", 100.0 * a);
            }
            if let Some(p) = out {
                std::fs::write(&p, metrics::format_confusion(&r)).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Verb::DumpFeatures { checkpoint, out, args } => {
            let cfg = args.load()?;
            let ckpt = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let dump = checkpoint_features(&cfg, &ckpt)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("features.csv"), metrics::format_features(&dump))?;
            std::fs::write(out.join("classifier.csv"), metrics::format_classifier(&dump))?;
            println!("{} samples, separation ratio {:.3}", dump.rows.len(), dump.separation_ratio());
        }
        Verb::Compare { files, out } => {
            let rows = metrics::compare_runs(&files)?;
            print!("{}", metrics::summary_table(&rows));
            if let Some(p) = out {
                std::fs::write(&p, metrics::format_summary(&rows)).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Verb::Keys => {
            for (section, key, default, doc) in KEYS {
                println!("{section}.{key} = {default}\t# {doc}");
            }
        }
    }
    Ok(())
}
