mod manifest;
mod ops;
mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use relcap::config::RunConfig;
use relcap::gradcheck::DEFAULT_STEP;

#[derive(Parser)]
#[command(
    name = "relcap",
    version = env!("BUILD_GIT_DESCRIBE"),
    about = "Joint VQA and question-relevant captioning on synthetic scenes"
)]
struct Cli {
    /// JSON config file; flags override it, it overrides built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for this run.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite outputs left by an earlier run.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (defaults to the core count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset with questions and candidate captions.
    GenData {
        /// Candidate captions per question.
        #[arg(long)]
        captions: Option<usize>,
    },
    /// Train from random init on ground-truth captions.
    Train {
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Cap both splits at their first N examples.
        #[arg(long)]
        limit: Option<usize>,
        /// Drop the caption pathway entirely.
        #[arg(long)]
        ablate_captions: bool,
        /// Keep captions but skip the attention adjustment.
        #[arg(long)]
        no_caa: bool,
    },
    /// Sample captions from a trained model for every image-question pair.
    GenerateCaptions {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Second-phase training on the model's own sampled captions.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Optimize only the answer loss during this phase.
        #[arg(long)]
        vqa_only: bool,
    },
    /// Soft accuracy on a split, broken down by question template.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Earth mover's distance between model attention and reference maps.
    Emd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Finite-difference check of the joint loss gradient.
    Gradcheck {
        /// Central-difference step size.
        #[arg(long)]
        step: Option<f64>,
    },
    /// Render charts and a markdown summary from metric files.
    Report {
        /// Metrics CSV files, one per run.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// EMD summary JSON files to chart alongside.
        #[arg(long = "emd")]
        emd: Vec<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RELCAP_LOG", "info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }

    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match &cli.cmd {
        Cmd::GenData { captions } => {
            if let Some(c) = captions {
                config.data.captions_per_question = *c;
            }
        }
        Cmd::Train { epochs, ablate_captions, no_caa, .. } => {
            if let Some(e) = epochs {
                config.train.epochs = *e;
            }
            if *ablate_captions {
                config.model.use_captions = false;
            }
            if *no_caa {
                config.model.use_caa = false;
            }
        }
        Cmd::Finetune { epochs, vqa_only, .. } => {
            if let Some(e) = epochs {
                config.phase2.epochs = *e;
            }
            if *vqa_only {
                config.phase2.vqa_only = true;
            }
        }
        _ => {}
    }

    let argv: Vec<String> = std::env::args().collect();
    let ctx = ops::Ctx { config, seed: cli.seed, out: cli.out, force: cli.force, argv };
    match cli.cmd {
        Cmd::GenData { .. } => ops::gen_data(&ctx),
        Cmd::Train { data, limit, .. } => ops::train(&ctx, &data, limit),
        Cmd::GenerateCaptions { data, checkpoint, split } => {
            ops::generate_captions_cmd(&ctx, &data, &checkpoint, &split)
        }
        Cmd::Finetune { data, checkpoint, vqa_only, .. } => {
            ops::finetune(&ctx, &data, &checkpoint, vqa_only)
        }
        Cmd::Eval { data, checkpoint, split } => ops::eval(&ctx, &data, &checkpoint, &split),
        Cmd::Emd { data, checkpoint, split } => ops::emd(&ctx, &data, &checkpoint, &split),
        Cmd::Gradcheck { step } => ops::gradcheck(&ctx, step.unwrap_or(DEFAULT_STEP)),
        Cmd::Report { metrics, emd } => ops::report(&ctx, &metrics, &emd),
    }
}
