//! `objint`: synthesize scenes, train on a multi-instance image, and invert,
//! re-render and evaluate the learned object model.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

/// Process failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 1, message: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Self { code: 2, message: msg.into() }
    }
}

impl From<objint_core::Error> for Failure {
    fn from(e: objint_core::Error) -> Self {
        use objint_core::Error as E;
        let code = match &e {
            E::Io { .. } | E::Image { .. } | E::Checkpoint(_) => 2,
            E::NonFinite { .. } => 3,
            E::Tensor(_) | E::InvalidInput(_) | E::Config(_) => 1,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "objint", version, about = "Learn an object model from one image of many instances")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.batch_size=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-instance scene with ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of instances (overrides synth.instances).
        #[arg(long)]
        k: Option<usize>,
        /// sphere, ellipsoid or union (overrides synth.shape).
        #[arg(long)]
        object: Option<String>,
    },
    /// Split a scene image into instance masks.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Train the generator and critics on one scene.
    Train {
        #[command(flatten)]
        common: Common,
        /// Scene image, or a directory with scene.png (and mask_<k>.png, scene.toml).
        #[arg(long)]
        scene: PathBuf,
        /// Directory of mask_<k>.png; without it the scene is segmented.
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even when the configuration hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Render an azimuth sweep and intrinsic maps of a sampled instance.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Recover pose and latent code of one observed instance.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
    /// Re-render an instance under each configured light.
    Relight {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// inversion.json from `invert`; a sampled instance otherwise.
        #[arg(long)]
        inversion: Option<PathBuf>,
    },
    /// Render a linear path between two latent codes at one pose.
    Interpolate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// inversion.json for the start code (sampled otherwise).
        #[arg(long)]
        from: Option<PathBuf>,
        /// inversion.json for the end code (sampled otherwise).
        #[arg(long)]
        to: Option<PathBuf>,
    },
    /// Invert every instance of a synthetic dataset and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory written by `synth`.
        #[arg(long)]
        scene: PathBuf,
    },
}

fn run() -> Result<(), Failure> {
    let help = format!("Configuration keys and defaults:\n{}", config::key_listing());
    let matches = Cli::command().after_long_help(help).try_get_matches();
    let matches = match matches {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return if code == 0 { Ok(()) } else { Err(Failure::usage(String::new())) };
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::usage(e.to_string()))?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::usage(format!("--threads: {e}")))?;
    }
    match cli.command {
        Command::Synth { common, k, object } => commands::synth(&common, k, object.as_deref()),
        Command::Segment { common, scene } => commands::segment(&common, &scene),
        Command::Train { common, scene, masks, resume, force } => {
            commands::train(&common, &scene, masks.as_deref(), resume.as_deref(), force)
        }
        Command::Render { common, checkpoint } => commands::render(&common, &checkpoint),
        Command::Invert { common, checkpoint, scene, masks, instance } => {
            commands::invert(&common, &checkpoint, &scene, masks.as_deref(), instance)
        }
        Command::Relight { common, checkpoint, inversion } => commands::relight(&common, &checkpoint, inversion.as_deref()),
        Command::Interpolate { common, checkpoint, from, to } => {
            commands::interpolate(&common, &checkpoint, from.as_deref(), to.as_deref())
        }
        Command::Eval { common, checkpoint, scene } => commands::eval(&common, &checkpoint, &scene),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
