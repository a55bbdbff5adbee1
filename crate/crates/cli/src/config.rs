//! Command-line flags and JSON configuration files.
//!
//! Every subcommand accepts `--config <file.json>` holding the same options
//! as its flags (snake_case keys). Flags given on the command line override
//! file values; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::exit::ConfigError;

#[derive(Parser, Debug)]
#[command(
    name = "freemcg",
    version,
    about = "Derivative-free, manifold-constrained classifier gradients for attribution and counterfactuals",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Attribution map for one input.
    Attribute(AttributeArgs),
    /// Counterfactual towards a target class.
    Counterfactual(CounterfactualArgs),
    /// Removal curve of an attribution map.
    Road(RoadArgs),
    /// Numerical checks of the gradient estimator.
    Verify(VerifyArgs),
    /// Counterfactual parameter grid.
    Sweep(SweepArgs),
    /// Write a synthetic model, prior and input to a directory.
    Example(ExampleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Ascent,
    Reverse,
}

impl From<ModeArg> for freemcg_core::counterfactual::CfMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ascent => Self::Ascent,
            ModeArg::Reverse => Self::Reverse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskArg {
    TwoClass,
    Blob,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeArgs {
    /// JSON file with any of the options below.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Input array file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Classifier parameter file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Prior (denoiser) parameter file.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Comma-separated diffusion timesteps [default: 100,200,...,700].
    #[arg(long, value_delimiter = ',')]
    pub timesteps: Option<Vec<usize>>,
    /// Particles per timestep [default: 100].
    #[arg(long)]
    pub particles: Option<usize>,
    /// Class to explain [default: predicted class].
    #[arg(long)]
    pub target_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output array file for the map.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional image of the map (.ppm for color PPM, otherwise PGM).
    #[arg(long)]
    pub ppm: Option<PathBuf>,
    /// Draw one timestep per particle instead of a fixed grid.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub random_t: Option<bool>,
    /// Rescale the map so its maximum is 1.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: Option<bool>,
    /// Diffusion steps [default: 1000].
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub steps: Option<usize>,
    /// [default: 1e-4]
    #[arg(long)]
    pub beta_min: Option<f64>,
    /// [default: 0.02]
    #[arg(long)]
    pub beta_max: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterfactualArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// [default: reverse]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub target_class: Option<usize>,
    /// Ensemble-gradient weight [default: 0.2].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Pull towards the input [default: 0.01].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Forward-diffusion depth [default: 400 reverse, 300 ascent].
    #[arg(long)]
    pub t_start: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub particles: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    /// DDIM stochasticity in [0, 1] [default: 0].
    #[arg(long)]
    pub eta: Option<f64>,
    /// Ascent iterations [default: 18].
    #[arg(long)]
    pub iters: Option<usize>,
    /// Unit-normalize the ensemble gradient [default: true reverse, false ascent].
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub grad_norm: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Diffusion steps [default: 1000].
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub steps: Option<usize>,
    /// [default: 1e-4]
    #[arg(long)]
    pub beta_min: Option<f64>,
    /// [default: 0.02]
    #[arg(long)]
    pub beta_max: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Attribution map array, shaped like the input's spatial layout.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Comma-separated removal fractions [default: 0,0.1,...,0.9].
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Imputation noise [default: 0.05].
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// [default: reverse]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub target_class: Option<usize>,
    /// Comma-separated grid values [default: 0.2].
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    /// [default: 0.01]
    #[arg(long, value_delimiter = ',')]
    pub beta: Option<Vec<f64>>,
    /// [default: mode default]
    #[arg(long, value_delimiter = ',')]
    pub t_start: Option<Vec<usize>>,
    /// [default: 100]
    #[arg(long, value_delimiter = ',')]
    pub particles: Option<Vec<usize>>,
    /// [default: 0]
    #[arg(long, value_delimiter = ',')]
    pub eta: Option<Vec<f64>>,
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub grad_norm: Option<bool>,
    /// Seeded runs per grid point [default: 10].
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Largest accepted number of grid points [default: 64].
    #[arg(long)]
    pub max_grid: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Diffusion steps [default: 1000].
    #[arg(long = "T")]
    #[serde(rename = "T")]
    pub steps: Option<usize>,
    /// [default: 1e-4]
    #[arg(long)]
    pub beta_min: Option<f64>,
    /// [default: 0.02]
    #[arg(long)]
    pub beta_max: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExampleArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// [default: two-class]
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Which class the written input is drawn from [default: 0].
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Overlay command-line values on the contents of `config`.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let file: Value = serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("{}: malformed JSON: {e}", path.display())))?;
    let Value::Object(mut merged) = file else {
        return Err(ConfigError(format!("{}: expected a JSON object", path.display())).into());
    };
    serde_json::from_value::<T>(Value::Object(merged.clone()))
        .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    if let Value::Object(given) = serde_json::to_value(flags)? {
        for (k, v) in given {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    Ok(serde_json::from_value(Value::Object(merged))?)
}

pub fn require<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| {
        ConfigError(format!(
            "missing required option --{} (or \"{}\" in the config file)",
            key.replace('_', "-"),
            key
        ))
        .into()
    })
}
