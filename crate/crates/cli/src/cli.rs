use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use qtk_core::lapq::Phase;
use qtk_core::BiasCorrection;

use crate::config::PartialSettings;

#[derive(Debug, Parser)]
#[command(name = "qtk", version, about = "Loss-aware post-training quantization of small networks")]
pub struct Cli {
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true, env = "QTK_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Find step sizes for a model and report the calibration result.
    Calibrate(CalibrateArgs),
    /// Evaluate a model quantized with stored step sizes.
    Eval(EvalArgs),
    /// Loss over a 2-D grid of two step sizes, as CSV.
    Landscape(LandscapeArgs),
    /// Finite-difference Hessian, gradient, curvature and interaction term.
    Hessian(HessianArgs),
    /// Calibrate on growing calibration subsets and report held-out accuracy.
    SweepCalibSize(SweepArgs),
    /// Write the model with grid-snapped weights.
    Quantize(QuantizeArgs),
}

fn parse_bias(s: &str) -> Result<BiasCorrection, String> {
    s.parse().map_err(|e: qtk_core::Error| e.to_string())
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    match s {
        "lw" => Ok(Phase::Lw),
        "qa" => Ok(Phase::Qa),
        "full" => Ok(Phase::Full),
        _ => Err(format!("unknown phase '{s}' (expected lw, qa or full)")),
    }
}

/// Settings shared by every command.
#[derive(Debug, Clone, Default, Args)]
pub struct SettingsArgs {
    /// JSON file with default settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight bit width (2-8, or 32 for full precision).
    #[arg(long)]
    pub wbits: Option<u8>,
    /// Activation bit width (2-8, or 32 for full precision).
    #[arg(long)]
    pub abits: Option<u8>,
    /// Keep the first and last weight layers at full precision.
    #[arg(long, value_name = "BOOL")]
    pub skip_first_last: Option<bool>,
    /// Restore per-channel weight statistics after quantization.
    #[arg(long, value_name = "MODE", num_args = 0..=1, default_missing_value = "mean", value_parser = parse_bias)]
    pub bias_correct: Option<BiasCorrection>,
    /// Norms for the layer-wise trajectory.
    #[arg(long, value_delimiter = ',')]
    pub p_grid: Option<Vec<f64>>,
    /// lw (layer-wise at --p), qa (plus quadratic fit) or full.
    #[arg(long, value_parser = parse_phase)]
    pub phase: Option<Phase>,
    /// Norm for the layer-wise phase and layer-wise baselines.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub ftol: Option<f64>,
    /// Calibration samples drawn (without replacement) from a larger set.
    #[arg(long)]
    pub calib_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for calibration-subset sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Finite-difference step relative to each step size.
    #[arg(long)]
    pub h_rel: Option<f64>,
}

impl SettingsArgs {
    pub fn flags(&self) -> PartialSettings {
        PartialSettings {
            wbits: self.wbits,
            abits: self.abits,
            skip_first_last: self.skip_first_last,
            bias_correct: self.bias_correct,
            p_grid: self.p_grid.clone(),
            phase: self.phase,
            p: self.p,
            max_outer: self.max_outer,
            ftol: self.ftol,
            calib_size: self.calib_size,
            batch_size: self.batch_size,
            seed: self.seed,
            h_rel: self.h_rel,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Model manifest (model.json).
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration inputs (.qtn).
    #[arg(long)]
    pub calib: PathBuf,
    /// Calibration labels (.qtn vector of class indices).
    #[arg(long)]
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub settings: SettingsArgs,
    /// Held-out inputs to report accuracy on.
    #[arg(long, requires = "test_labels")]
    pub test: Option<PathBuf>,
    #[arg(long, requires = "test")]
    pub test_labels: Option<PathBuf>,
    /// Result file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the bare step entries here.
    #[arg(long)]
    pub steps_out: Option<PathBuf>,
    /// Include wall-clock phase timings (makes output non-reproducible).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A calibrate result or a JSON list of step entries.
    #[arg(long)]
    pub steps: PathBuf,
    /// Inputs to evaluate on (.qtn).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub settings: SettingsArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LandscapeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub settings: SettingsArgs,
    /// Base point; layer-wise calibration at --p when omitted.
    #[arg(long)]
    pub steps: Option<PathBuf>,
    /// Step-vector position scanned along rows.
    #[arg(long, default_value_t = 0)]
    pub i: usize,
    /// Step-vector position scanned along columns.
    #[arg(long, default_value_t = 1)]
    pub j: usize,
    /// Relative half-width of each axis around the base point.
    #[arg(long, default_value_t = 0.5)]
    pub span: f64,
    /// Grid points per axis.
    #[arg(long, default_value_t = 21)]
    pub resolution: usize,
    /// CSV file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HessianArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub settings: SettingsArgs,
    /// Base point; layer-wise calibration at --p when omitted.
    #[arg(long)]
    pub steps: Option<PathBuf>,
    /// Step-vector positions to differentiate (default: all weight steps).
    #[arg(long, value_delimiter = ',')]
    pub indices: Option<Vec<usize>>,
    /// Directory for hessian.csv, gradient.csv and summary.json.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub settings: SettingsArgs,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub test_labels: PathBuf,
    /// Subset sizes (default: 32, 64, ... up to the full set).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A calibrate result or a JSON list of step entries.
    #[arg(long)]
    pub steps: PathBuf,
    #[command(flatten)]
    pub settings: SettingsArgs,
    /// Output directory for model.json, tensors and steps.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}
