use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use skullstrip_core::data::Split;
use skullstrip_core::nn::StrategyKind;

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "skullstrip", version, about = "Brain extraction with U-Net+ResNet and scSE attention")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for model initialization, shuffling and data generation.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Attention strategy; repeat to select several for `compare`.
    #[arg(long = "strategy", global = true, value_name = "none|standard|pre|post|identity")]
    pub strategies: Vec<StrategyKind>,
    /// Dataset manifest.
    #[arg(long, global = true, value_name = "PATH")]
    pub data: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            strategies: self.strategies.clone(),
            data: self.data.clone(),
            out: self.out.clone(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom cohort and its manifest.
    GenData(GenDataArgs),
    /// Train one model and keep the checkpoint with the lowest validation loss.
    Train(TrainArgs),
    /// Per-subject metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Predict brain masks for image tensors.
    Predict(PredictArgs),
    /// Train and evaluate every selected strategy under one configuration.
    Compare,
    /// Loss and accuracy curves from training histories.
    Plot(PlotArgs),
    /// Side-by-side image, ground truth and per-checkpoint predictions.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub subjects: Option<usize>,
    /// Slice size, `64` or `64x48` (height x width).
    #[arg(long, value_parser = parse_size)]
    pub size: Option<(usize, usize)>,
    /// Slices per subject.
    #[arg(long)]
    pub slices: Option<usize>,
    /// Time-points per series.
    #[arg(long)]
    pub timepoints: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Image tensors: `[T, Z, H, W]` series, `[Z, H, W]` stacks or `[H, W]` slices.
    #[arg(required = true, value_name = "IMAGE")]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// history.csv files, one curve set each.
    #[arg(long = "history", required = true, value_name = "PATH")]
    pub histories: Vec<PathBuf>,
    /// Series names, in the order of `--history`. Defaults to each file's
    /// parent directory name.
    #[arg(long = "label")]
    pub labels: Vec<String>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    /// One prediction panel per checkpoint.
    #[arg(long = "checkpoint", required = true, value_name = "PATH")]
    pub checkpoints: Vec<PathBuf>,
    /// Subject id; defaults to the first subject of the split.
    #[arg(long)]
    pub subject: Option<String>,
    /// Slice index; defaults to the middle slice.
    #[arg(long)]
    pub slice: Option<usize>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Pixel replication factor.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..=32))]
    pub scale: u32,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let dim = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad size {s:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((dim(h)?, dim(w)?)),
        None => dim(s).map(|d| (d, d)),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s.to_ascii_lowercase().as_str() {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; expected train, val or test")),
    }
}
