//! The `varbound` command line: identity batteries, schedule and proposal
//! ablations, toy training, likelihood evaluation, and sampling.
//!
//! Exit codes: 0 on success, 1 when an invariant or bound is violated or a
//! computation fails, 2 on usage or configuration errors.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod artifacts;
pub mod commands;
pub mod config;

use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "varbound", version, about = "Likelihood-bound experiments on toy diffusion models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run identity checks and write one row per configuration.
    Verify(Flags),
    /// Compare variance schedules on the optimal DSM loss.
    AblateSchedule(Flags),
    /// Compare eta proposals by estimator variance.
    AblateIs(Flags),
    /// Train a noise-prediction network on a toy density.
    Train(Flags),
    /// Per-datapoint likelihood bound and bits/dim.
    EvalNll(Flags),
    /// Ancestral samples from a checkpoint or the exact score.
    Sample(Flags),
    /// Index the manifests of run directories under --out.
    Report(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Verify(_) => "verify",
            Self::AblateSchedule(_) => "ablate-schedule",
            Self::AblateIs(_) => "ablate-is",
            Self::Train(_) => "train",
            Self::EvalNll(_) => "eval-nll",
            Self::Sample(_) => "sample",
            Self::Report(_) => "report",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Self::Verify(f)
            | Self::AblateSchedule(f)
            | Self::AblateIs(f)
            | Self::Train(f)
            | Self::EvalNll(f)
            | Self::Sample(f)
            | Self::Report(f) => f,
        }
    }
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Args)]
pub struct Flags {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Schedule preset(s): vp-sigmoid, vp-tanh, vp-gensig, sp-sigmoid, ve; comma list or `all` for ablate-schedule.
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    pub eta0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub eta1: Option<f64>,
    #[arg(long, value_parser = ["sigmoid", "tanh", "gensig", "ve-exp"])]
    pub family: Option<String>,
    /// Generalized-sigmoid exponent in (0, 4].
    #[arg(long)]
    pub a: Option<f64>,
    /// Noise family, comma list, or `all`.
    #[arg(long)]
    pub noise: Option<String>,
    /// Comma list of uniform-t, designed, learned.
    #[arg(long, value_delimiter = ',')]
    pub proposals: Option<Vec<String>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Monte Carlo samples per estimate.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Datapoints (eval-nll, verify pointwise) or draws (sample).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_parser = ["none", "uniform", "tn"])]
    pub dequant: Option<String>,
    #[arg(long, value_parser = ["theorem1", "expansion", "debruijn", "thermo", "pointwise", "all"])]
    pub check: Option<String>,
    /// gaussian, gmm2, grid8, or `all` (verify).
    #[arg(long)]
    pub density: Option<String>,
    #[arg(long)]
    pub ckpt: Option<String>,
    #[arg(long)]
    pub learned_steps: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub warmup_noise: Option<String>,
    #[arg(long)]
    pub warmup_sigma0: Option<f64>,
}

impl Flags {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json(&std::fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    c.$field = v.clone();
                }
            )*};
        }
        set!(
            seed, schedule, eta0, eta1, a, noise, proposals, steps, batch, samples, repeats, n, dequant, check,
            density, learned_steps, tolerance, sample_steps, warmup_noise
        );
        if self.family.is_some() {
            c.family = self.family.clone();
        }
        if self.ckpt.is_some() {
            c.ckpt = self.ckpt.clone();
        }
        if self.warmup_sigma0.is_some() {
            c.warmup_sigma0 = self.warmup_sigma0;
        }
        Ok(c)
    }
}

/// Usage-class errors map to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<varbound::Error>() {
            return match e {
                varbound::Error::Configuration(_)
                | varbound::Error::InvalidArgument(_)
                | varbound::Error::Unsupported(_)
                | varbound::Error::Domain { .. }
                | varbound::Error::Ordering { .. } => EXIT_USAGE,
                _ => EXIT_VIOLATION,
            };
        }
    }
    EXIT_VIOLATION
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(&cli.command) {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_VIOLATION,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code_for(&e)
        }
    }
}
