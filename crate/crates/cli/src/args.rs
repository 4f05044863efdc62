//! Command-line surface. Every flag has an explicit default so the resolved
//! configuration printed at startup reproduces the run.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eadnet::losses::EdgeTarget;
use eadnet::metrics::Metric;
use eadnet::models::EdgeNetVariant;

#[derive(Debug, Parser)]
#[command(
    name = "eadnet",
    version,
    about = "Edge-aware two-phase image deblurring"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Blur clear images (or procedural scenes) into training triples.
    Synth(SynthArgs),
    /// Extract edge maps with Canny or a trained edge network.
    Edges(EdgesArgs),
    /// Phase 1: train the edge network, optionally against a discriminator.
    TrainEdge(TrainEdgeArgs),
    /// Phase 2: train the deblurring network with frozen edge networks.
    TrainDeblur(TrainDeblurArgs),
    /// Deblur one image or a directory of images.
    Deblur(DeblurArgs),
    /// Score restored images against references.
    Eval(EvalArgs),
    /// Print the trainable parameter count of a model.
    Params(ParamsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BlurArg {
    Gaussian,
    Motion,
    Mixed,
}

#[derive(Debug, Args)]
pub struct CannyArgs {
    /// Gaussian smoothing before the gradient.
    #[arg(long, default_value_t = 1.4)]
    pub canny_sigma: f64,
    /// Low hysteresis threshold, relative to the largest gradient.
    #[arg(long, default_value_t = 0.1)]
    pub canny_low: f64,
    /// High hysteresis threshold, relative to the largest gradient.
    #[arg(long, default_value_t = 0.2)]
    pub canny_high: f64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of clear PPM/PGM images; procedural scenes when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Number of pairs; defaults to one per input image.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = BlurArg::Mixed)]
    pub blur: BlurArg,
    /// Probability of motion blur in mixed mode.
    #[arg(long, default_value_t = 0.5)]
    pub p_motion: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_min: f64,
    #[arg(long, default_value_t = 3.0)]
    pub sigma_max: f64,
    /// Side of the motion kernel grid.
    #[arg(long, default_value_t = eadnet::blur::MAX_KERNEL_SIZE)]
    pub kernel_size: usize,
    /// Largest excursion of a motion trajectory, in pixels.
    #[arg(long, default_value_t = 16.0)]
    pub max_extent: f64,
    /// Side of procedural scenes.
    #[arg(long, default_value_t = 256)]
    pub scene_size: usize,
    #[command(flatten)]
    pub canny: CannyArgs,
}

#[derive(Debug, Args)]
pub struct EdgesArgs {
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file (for a file input) or directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Predict edges with this edge network instead of Canny.
    #[arg(long)]
    pub edge_checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    pub side_layer: EdgeNetVariant,
    #[command(flatten)]
    pub canny: CannyArgs,
}

#[derive(Debug, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory receiving checkpoints and the loss history.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// The learning rate is multiplied by --decay-factor every this many epochs.
    #[arg(long, default_value_t = 20)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 0.1)]
    pub decay_factor: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Side of the square random crops (a multiple of 16).
    #[arg(long, default_value_t = 256)]
    pub crop: usize,
    /// Seed of the crop sampler.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the weight initialization.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    /// Side-output weights, comma separated.
    #[arg(long, default_value = "0.7,0.1,0.1,0.1,0.1", value_delimiter = ',')]
    pub alpha: Vec<f64>,
    /// Clamp of probabilities inside the cross-entropy.
    #[arg(long, default_value_t = eadnet::losses::DEFAULT_EPS)]
    pub bce_eps: f64,
}

#[derive(Debug, Args)]
pub struct TrainEdgeArgs {
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0.05)]
    pub lambda_adv: f64,
    /// The adversarial term is dropped from this epoch on.
    #[arg(long, default_value_t = 50)]
    pub adv_epochs: usize,
}

#[derive(Debug, Args)]
pub struct DeblurNetArgs {
    #[arg(long, default_value_t = 64)]
    pub base_channels: usize,
    /// Widths of the two stride-2 encoder convs.
    #[arg(long, default_value = "128,256", value_delimiter = ',')]
    pub down_channels: Vec<usize>,
    #[arg(long, default_value_t = 9)]
    pub res_blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub expand_ratio: usize,
    #[arg(long, default_value_t = 128)]
    pub lowrank_channels: usize,
    #[arg(long, default_value_t = 9)]
    pub head_kernel: usize,
    #[arg(long, default_value_t = 1)]
    pub head_stride: usize,
}

#[derive(Debug, Args)]
pub struct TrainDeblurArgs {
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Trained full edge network; the input network is sliced from it.
    #[arg(long)]
    pub edge_checkpoint: PathBuf,
    /// Which edge map feeds the deblurring network.
    #[arg(long, default_value = "1", value_parser = parse_variant)]
    pub side_layer: EdgeNetVariant,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_pixel: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lambda_perceptual: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_edge: f64,
    /// Edges the edge loss compares against.
    #[arg(long, default_value = "blurry", value_parser = parse_edge_target)]
    pub edge_target: EdgeTarget,
    #[arg(long, default_value_t = 0.5)]
    pub binarize_threshold: f64,
    /// Depth of the frozen perceptual feature stack.
    #[arg(long, default_value_t = 1)]
    pub perceptual_layer: usize,
    #[command(flatten)]
    pub net: DeblurNetArgs,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub deblur_checkpoint: PathBuf,
    #[arg(long)]
    pub edge_checkpoint: PathBuf,
    #[arg(long, default_value = "1", value_parser = parse_variant)]
    pub side_layer: EdgeNetVariant,
}

#[derive(Debug, Args)]
pub struct DeblurArgs {
    /// Blurry image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file (for a file input) or directory.
    #[arg(long)]
    pub output: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChannelArg {
    Luma,
    PerChannel,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of restored images, paired by file name with --truth.
    #[arg(long, requires = "truth", conflicts_with = "manifest")]
    pub pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    pub truth: Option<PathBuf>,
    /// Dataset whose blurry images are restored and scored.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Score the blurry images themselves instead of restoring them.
    #[arg(long, requires = "manifest")]
    pub baseline: bool,
    #[arg(long)]
    pub deblur_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub edge_checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "1", value_parser = parse_variant)]
    pub side_layer: EdgeNetVariant,
    #[arg(long, default_value = "psnr,ssim", value_delimiter = ',', value_parser = parse_metric)]
    pub metrics: Vec<Metric>,
    /// Peak value for PSNR; images are read into [0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub peak: f64,
    #[arg(long, value_enum, default_value_t = ChannelArg::Luma)]
    pub ssim_channels: ChannelArg,
    #[arg(long, default_value_t = 5)]
    pub ms_ssim_scales: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    EdgenetFull,
    EdgenetReduced1,
    EdgenetReduced3,
    EdgenetReduced5,
    Deblurnet,
    Discriminator,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
}

fn parse_variant(s: &str) -> Result<EdgeNetVariant, String> {
    s.parse().map_err(|e: eadnet::Error| e.to_string())
}

fn parse_edge_target(s: &str) -> Result<EdgeTarget, String> {
    s.parse().map_err(|e: eadnet::Error| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: eadnet::Error| e.to_string())
}
