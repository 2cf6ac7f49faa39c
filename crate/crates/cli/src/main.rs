use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use uwkit_cli::commands;
use uwkit_cli::config::{resolve, Overrides};
use uwkit_cli::data::Split;

/// Underwater instance segmentation with masked-graph distillation.
///
/// Settings come from the built-in defaults, then the `--config` file, then
/// `--seed` / `--out`, each overriding the previous.
#[derive(Debug, Parser)]
#[command(name = "uwkit", version)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed. For `synth` it seeds the generated corpus instead.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Holdout,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus (`--out`, plus `--out/val`).
    Synth {
        /// Training images (default from the config).
        #[arg(long)]
        count: Option<usize>,
        /// Held-out images (default from the config).
        #[arg(long)]
        holdout: Option<usize>,
    },
    /// Pre-train the teacher on the task losses.
    TrainTeacher {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the student with feature distillation from a frozen teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// COCO-protocol box and mask AP of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory; defaults to the configured split.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "holdout")]
        split: SplitArg,
    },
    /// Detect instances in image files and draw mask overlays.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        score_threshold: f64,
    },
    /// Size buckets, per-class counts and colour statistics of a corpus.
    Stats {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let synth = matches!(cli.command, Command::Synth { .. });
    let overrides = Overrides {
        seed: if synth { None } else { cli.seed },
        out: cli.out.clone(),
    };
    let mut cfg = resolve(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth { count, holdout } => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            cfg.data.train_images = count.unwrap_or(cfg.data.train_images);
            cfg.data.holdout_images = holdout.unwrap_or(cfg.data.holdout_images);
            let n = commands::cmd_synth(&cfg, cli.force)?;
            println!("wrote {n} images to {}", cfg.out.display());
        }
        Command::TrainTeacher { resume } => {
            let p = commands::cmd_train_teacher(&cfg, resume.as_deref(), cli.force)?;
            println!("{}", p.display());
        }
        Command::Distill { teacher, resume } => {
            let p = commands::cmd_distill(&cfg, &teacher, resume.as_deref(), cli.force)?;
            println!("{}", p.display());
        }
        Command::Eval { checkpoint, data, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Holdout => Split::Holdout,
            };
            let r = commands::cmd_eval(&cfg, &checkpoint, data.as_deref(), split)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Infer {
            checkpoint,
            images,
            score_threshold,
        } => {
            let r = commands::cmd_infer(&cfg, &checkpoint, &images, score_threshold)?;
            println!("{} detections written to {}", r.len(), cfg.out.join("results.json").display());
        }
        Command::Stats { data } => {
            let s = commands::cmd_stats(&cfg, data.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}
