use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eemax_core::chanmodel::units::{dbm_to_watts, dbw_to_watts};
use eemax_core::objective::PowerModel;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "eemax", version, about = "Energy-efficiency power control with stochastic boxes")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Flat key=value file; keys are flag names without the leading dashes.
    /// Flags on the command line take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dataset of channel matrices.
    GenData(GenDataArgs),
    /// Train the α/β networks on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compute reference optima for a dataset.
    Oracle(OracleArgs),
    /// Box method versus gradient descent on the Rastrigin function.
    Rastrigin(RastriginArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData(_) => "gen-data",
            Self::Train(_) => "train",
            Self::Eval(_) => "eval",
            Self::Oracle(_) => "oracle",
            Self::Rastrigin(_) => "rastrigin",
            Self::Replay(_) => "replay",
        }
    }
}

/// Maximum transmit power, in exactly one unit.
#[derive(Debug, Clone, Args)]
#[group(multiple = false)]
pub struct PowerArgs {
    /// Maximum transmit power in dBm.
    #[arg(long, value_name = "DBM", allow_negative_numbers = true)]
    pub pmax_dbm: Option<f64>,
    /// Maximum transmit power in dBW.
    #[arg(long, value_name = "DBW", allow_negative_numbers = true)]
    pub pmax_dbw: Option<f64>,
}

/// Link power model shared by every command that evaluates EE.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub power: PowerArgs,
    /// Static circuit power per link, W.
    #[arg(long, default_value_t = 1.0)]
    pub static_power: f64,
    /// Power-amplifier inefficiency.
    #[arg(long, default_value_t = 4.0)]
    pub amp_inefficiency: f64,
    /// Bandwidth used for Mbit/J reporting, Hz.
    #[arg(long, default_value_t = 180e3)]
    pub bandwidth: f64,
}

impl ModelArgs {
    /// p_max in watts; 1 W when no unit flag is given.
    pub fn p_max_w(&self) -> CliResult<f64> {
        let w = match (self.power.pmax_dbm, self.power.pmax_dbw) {
            (Some(dbm), _) => dbm_to_watts(dbm),
            (_, Some(dbw)) => dbw_to_watts(dbw),
            _ => 1.0,
        };
        if !(w > 0.0 && w.is_finite()) {
            return Err(CliError::Usage(format!("maximum power must be positive and finite, got {w} W")));
        }
        Ok(w)
    }

    pub fn power_model(&self) -> PowerModel {
        PowerModel {
            amp_inefficiency: self.amp_inefficiency,
            static_power_w: self.static_power,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    pub users: usize,
    #[arg(long, default_value_t = 4)]
    pub bs: usize,
    /// Receive antennas per base station.
    #[arg(long, default_value_t = 2)]
    pub antennas: usize,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Path-loss exponent.
    #[arg(long, default_value_t = 4.5)]
    pub decay: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out set evaluated after training.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Epochs to run in this invocation.
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Monte-Carlo draws per sample and step.
    #[arg(long, default_value_t = 16)]
    pub smc: usize,
    /// Penalty weight.
    #[arg(long, default_value_t = 10.0)]
    pub eps: f64,
    /// Entropy stop threshold in nats; default `I ln(10 ell_min)`.
    #[arg(long, allow_negative_numbers = true)]
    pub h0: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    pub kappa_step: f64,
    #[arg(long, default_value_t = 50)]
    pub kappa_window: usize,
    /// Shrink the feasible region when the widths are small.
    #[arg(long)]
    pub region_adapt: bool,
    #[arg(long, default_value_t = 0.99)]
    pub rho: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = PenaltyArg::Hinge)]
    pub penalty: PenaltyArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Continue the run stored in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sga,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PenaltyArg {
    Hinge,
    Literal,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Oracle CSV from `eemax oracle`; adds the ratio column.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Training state holding the region scale; defaults to `state.json`
    /// next to the checkpoint, else p_max.
    #[arg(long)]
    pub state: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Per-sample CSV: the oracle layout when `--oracle` is given.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleModeArg {
    Grid,
    Multistart,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = OracleModeArg::Grid)]
    pub mode: OracleModeArg,
    /// Grid points per dimension; default 41 up to three users, 21 for four.
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Box,
    Gd,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct RastriginArgs {
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Both)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 50_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.02)]
    pub kappa_step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Directory receiving the re-created outputs.
    #[arg(long)]
    pub into: PathBuf,
}
