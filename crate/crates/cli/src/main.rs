mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "dropaug", version, about = "Dropout as data augmentation: training, back-projection and noise analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON experiment document.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with the protocol named in the config and refit the best epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Repeat the run for each hidden-layer noise level.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Back-project samples through a trained checkpoint.
    Backproject {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        /// Use masks that keep every unit (x* must equal x).
        #[arg(long)]
        all_ones_masks: bool,
    },
    /// Probability that a single mask leaves every active unit intact.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Drop probability (converted to keep probability 1 - p).
        #[arg(long)]
        p_drop: f64,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        s: Option<f64>,
        /// Monte Carlo trials; switches to the sampling estimate.
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        active: Option<usize>,
        #[arg(long)]
        total: Option<usize>,
    },
    /// Histogram of the per-sample dropped fraction.
    Histogram {
        #[command(flatten)]
        common: Common,
        /// `dropout` or `random_dropout`; ignored when --config supplies a scheme.
        #[arg(long, default_value = "dropout")]
        scheme: String,
        #[arg(long, default_value_t = 0.5)]
        p_drop: f64,
        #[arg(long, default_value_t = 1000)]
        width: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Histogram range as `lo,hi`.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0])]
        range: Vec<f64>,
    },
    /// Fit PCA on the training split and dump the transform.
    Pca {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        k: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common, .. }
            | Command::Backproject { common, .. }
            | Command::Analyze { common, .. }
            | Command::Histogram { common, .. }
            | Command::Pca { common, .. } => common,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(dropaug::Error),
}

impl From<dropaug::Error> for CliError {
    fn from(e: dropaug::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind() {
            "io" | "format" => 3,
            "numeric" => 4,
            "state" => 5,
            _ => 2,
        }
    }
}

fn report(err: &CliError) -> ExitCode {
    let body = serde_json::json!({ "error": { "kind": err.kind(), "message": err.message() } });
    eprintln!("{body}");
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return report(&CliError::Usage(e.to_string().trim_end().to_owned())),
    };
    let level = if cli.command.common().quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let result = match cli.command {
        Command::Train { common, grid } => commands::train(&common, &grid),
        Command::Backproject {
            common,
            checkpoint,
            samples,
            all_ones_masks,
        } => commands::backproject(&common, checkpoint, samples, all_ones_masks),
        Command::Analyze {
            common,
            p_drop,
            d,
            s,
            trials,
            active,
            total,
        } => commands::analyze(&common, p_drop, d, s, trials, active, total),
        Command::Histogram {
            common,
            scheme,
            p_drop,
            width,
            trials,
            bins,
            range,
        } => match range[..] {
            [lo, hi] => commands::histogram(&common, &scheme, p_drop, width, trials, bins, (lo, hi)),
            _ => Err(CliError::Usage("--range takes exactly two values: lo,hi".into())),
        },
        Command::Pca { common, k } => commands::pca(&common, k),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
