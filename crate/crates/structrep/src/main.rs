//! structrep CLI: synth-data, pretrain, finetune, eval, report, plot.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use structrep::commands;
use structrep::config::ExperimentConfig;
use structrep::error::Error;
use structrep::template::DecisionConfig;

#[derive(Parser)]
#[command(
    name = "structrep",
    about = "Few-shot structured report generation: contrastive pretraining, prompt-initialized classifiers, template rendering, and evaluation.",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config file (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Override config keys dot-path style, e.g. --set pretrain.epochs=3.
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by data.synth.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Regenerate even when the output directory is not empty.
        #[arg(long)]
        force: bool,
    },
    /// Contrastive image-text pretraining.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from the existing checkpoint, extending epoch numbering.
        #[arg(long)]
        resume: bool,
    },
    /// Few-shot fine-tuning sweep over shots x seeds x init modes.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Pretrained bundle (default: <output_root>/pretrain/checkpoint.ckpt).
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; a pretrain-only bundle is scored zero-shot.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render the structured report for one image.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        template: PathBuf,
        /// Sidecar JSON output (default: <image>.report.json).
        #[arg(long)]
        sidecar: Option<PathBuf>,
        /// Non-exclusive decision threshold on similarity.
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        /// Softmax scale.
        #[arg(long, default_value_t = 50.0)]
        gamma: f64,
    },
    /// Plot shots-vs-AUC curves from a finetune metrics directory.
    Plot {
        /// Directory containing aggregate.csv (a finetune output dir).
        #[arg(long)]
        metrics_dir: PathBuf,
        #[arg(long, default_value = "plots/shots_vs_auc.svg")]
        out: PathBuf,
    },
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::SynthData { config, force } => {
            let (cfg, raw) = ExperimentConfig::load(&config.config, &config.overrides)?;
            commands::cmd_synth_data(&cfg, raw, force)
        }
        Command::Pretrain { config, resume } => {
            let (cfg, raw) = ExperimentConfig::load(&config.config, &config.overrides)?;
            let out = commands::cmd_pretrain(&cfg, raw, resume)?;
            println!("checkpoint: {}", out.checkpoint.display());
            println!("metrics:    {}", out.metrics.display());
            if let (Some(best), Some(epoch)) =
                (out.report.best_val_retrieval, out.report.best_epoch)
            {
                println!("best val retrieval@top1: {best:.4} (epoch {epoch})");
            }
            Ok(())
        }
        Command::Finetune { config, pretrained } => {
            let (cfg, raw) = ExperimentConfig::load(&config.config, &config.overrides)?;
            let out = commands::cmd_finetune(&cfg, raw, pretrained)?;
            println!("cells:     {}", out.cells_csv.display());
            println!("aggregate: {}", out.aggregate_csv.display());
            let table = out.results_base.with_extension("txt");
            if let Ok(text) = std::fs::read_to_string(table) {
                println!("\n{text}");
            }
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            split,
        } => {
            let (cfg, raw) = ExperimentConfig::load(&config.config, &config.overrides)?;
            let out = commands::cmd_eval(&cfg, raw, checkpoint, &split)?;
            println!("macro AUC: {:.4}", out.macro_auc);
            println!("metrics:     {}", out.metrics_json.display());
            println!("predictions: {}", out.predictions_csv.display());
            Ok(())
        }
        Command::Report {
            checkpoint,
            image,
            template,
            sidecar,
            threshold,
            gamma,
        } => {
            let decision = DecisionConfig { threshold, gamma };
            let out = commands::cmd_report(&checkpoint, &image, &template, &decision)?;
            print!("{}", out.text);
            let sidecar_path = sidecar.unwrap_or_else(|| {
                let mut p = image.as_os_str().to_owned();
                p.push(".report.json");
                PathBuf::from(p)
            });
            std::fs::write(
                &sidecar_path,
                serde_json::to_string_pretty(&out.sidecar).expect("sidecar serializes"),
            )
            .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
            eprintln!("sidecar: {}", sidecar_path.display());
            Ok(())
        }
        Command::Plot { metrics_dir, out } => {
            let path = commands::cmd_plot(&metrics_dir, &out)?;
            println!("plot: {}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Ok(device) = std::env::var("STRUCTREP_DEVICE") {
        if device != "cpu" {
            eprintln!("error: STRUCTREP_DEVICE={device} is unsupported; only `cpu` exists");
            return ExitCode::from(1);
        }
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_)
                | Error::TemplateParse(_)
                | Error::TemplateValidation(_)
                | Error::Data(_)
                | Error::Checkpoint(_)
                | Error::UndefinedMetric(_)
                | Error::Io { .. } => 1,
                Error::DimensionMismatch(_)
                | Error::Divergence(_)
                | Error::Evaluation(_)
                | Error::Json(_) => 2,
            };
            ExitCode::from(code)
        }
    }
}
