//! `patchvq` — patch-dictionary image classification pipeline.

mod commands;
mod config;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::AblationAxis;
use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "patchvq",
    about = "Whitened patch dictionaries, Q-nearest-neighbor encoding, shallow classifier"
)]
struct Cli {
    /// TOML experiment configuration; defaults are the reference setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap the worker thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Single-threaded execution for bit-reproducible runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Command-line overrides for the most commonly swept parameters.
#[derive(Args)]
struct Overrides {
    /// CIFAR-10 batch directory.
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    /// Dictionary size |D|.
    #[arg(long, global = true)]
    dict_size: Option<usize>,
    /// Patch side P.
    #[arg(long, global = true)]
    patch_size: Option<usize>,
    /// Selected neighbors Q (overrides the configured fraction).
    #[arg(long, global = true)]
    neighbors: Option<usize>,
    /// Gaussian white-noise dictionary instead of image patches.
    #[arg(long, global = true)]
    gaussian: bool,
    /// Assignment mode: hard or soft.
    #[arg(long, global = true)]
    assignment: Option<String>,
    /// Pooling window k₁.
    #[arg(long, global = true)]
    pool_kernel: Option<usize>,
    /// Pooling stride s₁.
    #[arg(long, global = true)]
    pool_stride: Option<usize>,
    /// Add the hidden ReLU layer to the classifier.
    #[arg(long, global = true)]
    hidden: bool,
    /// Train from the static feature cache without augmentation.
    #[arg(long, global = true)]
    no_augment: bool,
    /// Re-augment and re-encode the training split each epoch.
    #[arg(long, global = true, conflicts_with = "no_augment")]
    augment: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate whitening and sample the dictionary.
    BuildDict,
    /// Encode both splits into on-disk feature caches.
    Encode,
    /// Train the classifier, writing a metrics CSV and a checkpoint.
    Train,
    /// Evaluate the saved checkpoint on the test cache.
    Evaluate,
    /// Covariance spectra and dimension estimates over patch sizes.
    Analyze,
    /// Sweep one axis, running the full pipeline per value.
    Ablate {
        /// Parameter to sweep.
        #[arg(long, value_enum)]
        axis: AblationAxis,
        /// Values to run, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(root) = &self.dataset_root {
            config.dataset_root = root.clone();
        }
        if let Some(size) = self.dict_size {
            config.dictionary.size = size;
        }
        if let Some(p) = self.patch_size {
            config.dictionary.patch_side = p;
        }
        if let Some(q) = self.neighbors {
            config.encoder.q = Some(q);
        }
        if self.gaussian {
            config.dictionary.gaussian = true;
        }
        if let Some(mode) = &self.assignment {
            config.encoder.assignment = mode.clone();
        }
        if let Some(k) = self.pool_kernel {
            config.encoder.pool_kernel = k;
        }
        if let Some(s) = self.pool_stride {
            config.encoder.pool_stride = s;
        }
        if self.hidden {
            config.classifier.hidden = true;
        }
        if self.no_augment {
            config.train.augment = false;
        }
        if self.augment {
            config.train.augment = true;
        }
    }
}

fn error_class(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<patchvq::Error>() {
        Some(patchvq::Error::Io { .. }) => "io",
        Some(patchvq::Error::Format { .. }) => "format",
        Some(patchvq::Error::Dimension(_)) => "dimension",
        Some(patchvq::Error::InvalidArgument(_)) => "invalid-argument",
        Some(patchvq::Error::Numerical(_)) => "numerical",
        None => "config",
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool setup failed: {e}"))?;
    }
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut config);
    config.validate()?;
    match &cli.command {
        Command::BuildDict => commands::cmd_build_dict(&config),
        Command::Encode => commands::cmd_encode(&config),
        Command::Train => commands::cmd_train(&config),
        Command::Evaluate => commands::cmd_evaluate(&config),
        Command::Analyze => commands::cmd_analyze(&config),
        Command::Ablate { axis, values } => commands::cmd_ablate(&config, *axis, values),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err:#}", error_class(&err));
            ExitCode::FAILURE
        }
    }
}
