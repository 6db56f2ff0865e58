use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// One-shot personalization of a miniature text-to-image diffusion model.
#[derive(Debug, Parser)]
#[command(name = "personalab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Configuration file of `key=value` lines
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random stream [default: the config's `seed`, 0]
    #[arg(long, env = "PERSONALAB_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Personalize the base model on one subject image
    Train {
        #[command(flatten)]
        common: Common,
        /// Subject directory (class.txt, seen.png, unseen_*.png)
        #[arg(long)]
        subject_dir: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Write resumable training state every N steps (0 disables)
        #[arg(long, default_value_t = 0)]
        state_every: usize,
        /// Continue from a training state file
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also write full before/after snapshots for analyze-delta
        #[arg(long)]
        snapshots: bool,
    },
    /// Generate images from a personalization checkpoint
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "a photo of v*")]
        prompt: String,
        /// Number of images
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Permit augmentation tokens in the prompt (ablation only)
        #[arg(long)]
        allow_aug_token: bool,
    },
    /// Score generations against the subject's seen and held-out images
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subject_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory of generated PNGs to score
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        generated: Option<PathBuf>,
        /// Checkpoint to generate from instead
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prompt the images were generated from
        #[arg(long, default_value = "a photo of v*")]
        prompt: String,
        /// Images to generate when scoring a checkpoint
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Relative weight change per module group between two snapshots
    AnalyzeDelta {
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Custom group `NAME=GLOB[,GLOB...]` (repeatable; replaces the defaults)
        #[arg(long = "group", value_name = "NAME=GLOBS")]
        groups: Vec<String>,
    },
    /// Measure the text condition's effect on the noise prediction per timestep
    ProbeTimesteps {
        #[command(flatten)]
        common: Common,
        /// Personalization checkpoint (default: the base model alone)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "a photo of a dog")]
        base_prompt: String,
        /// Comparison prompt (repeatable)
        #[arg(long = "other", default_values_t = ["a photo of a cat".to_string()])]
        others: Vec<String>,
        /// Number of probe images
        #[arg(long, default_value_t = 8)]
        images: usize,
        /// Evaluate every STRIDE-th timestep
        #[arg(long, default_value_t = 10)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a container's header directory and size
    InspectCheckpoint {
        path: PathBuf,
        /// Full snapshot to compare the file size against
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Also write the directory as CSV here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-token cross-attention maps
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "a photo of v*")]
        prompt: String,
        /// Subject directory whose seen image is probed
        #[arg(long)]
        subject_dir: PathBuf,
        #[arg(long, default_value_t = 500)]
        t: usize,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a base model on the sprite world and save it as a snapshot
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            common,
            subject_dir,
            out,
            state_every,
            resume,
            snapshots,
        } => commands::train(&common, &subject_dir, &out, state_every, resume.as_deref(), snapshots),
        Command::Generate {
            common,
            checkpoint,
            prompt,
            n,
            out,
            allow_aug_token,
        } => commands::generate(&common, &checkpoint, &prompt, n, &out, allow_aug_token),
        Command::Evaluate {
            common,
            subject_dir,
            out,
            generated,
            checkpoint,
            prompt,
            n,
        } => commands::evaluate(&common, &subject_dir, &out, generated.as_deref(), checkpoint.as_deref(), &prompt, n),
        Command::AnalyzeDelta {
            before,
            after,
            out,
            groups,
        } => commands::analyze_delta(&before, &after, &out, &groups),
        Command::ProbeTimesteps {
            common,
            checkpoint,
            base_prompt,
            others,
            images,
            stride,
            out,
        } => commands::probe(&common, checkpoint.as_deref(), &base_prompt, &others, images, stride, &out),
        Command::InspectCheckpoint { path, compare, out } => {
            commands::inspect(&path, compare.as_deref(), out.as_deref())
        }
        Command::Attention {
            common,
            checkpoint,
            prompt,
            subject_dir,
            t,
            layer,
            out,
        } => commands::attention(&common, checkpoint.as_deref(), &prompt, &subject_dir, t, layer, &out),
        Command::Pretrain { common, out } => commands::pretrain(&common, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
