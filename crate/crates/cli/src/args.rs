use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "magc", version, about = "Map-assisted latent image codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render synthetic image/map pairs and a manifest.
    GenData(GenDataArgs),
    /// Train the pixel autoencoder.
    TrainVae(TrainArgs),
    /// Train the latent codec on autoencoder latents.
    TrainLcm(TrainLcmArgs),
    /// Train the conditional denoiser against a frozen codec.
    TrainDiffusion(TrainDiffusionArgs),
    /// Compress an image (and its map) to a stream.
    Compress(CompressArgs),
    /// Decode a stream back to an image.
    Decompress(DecompressArgs),
    /// Score one or more codec checkpoints on a dataset.
    Eval(EvalArgs),
    /// Bjontegaard deltas between two `bpp,quality` curves.
    Bd(BdArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pairs (overrides the `pairs` config key).
    #[arg(long = "pairs", short = 'n')]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CommonTrain {
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `full` or `desk`.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest or its directory.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub common: CommonTrain,
}

#[derive(Args, Debug)]
pub struct TrainLcmArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vae: PathBuf,
    /// Index into the λ grid {0.1, 0.39, 1.25}.
    #[arg(long)]
    pub lambda_index: Option<u8>,
    /// Per-step loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonTrain,
}

#[derive(Args, Debug)]
pub struct TrainDiffusionArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub lcm: PathBuf,
    #[command(flatten)]
    pub common: CommonTrain,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub lcm: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackendArg {
    PixelDecoder,
    Diffusion,
}

#[derive(Args, Debug)]
pub struct DecompressArgs {
    #[arg(long)]
    pub stream: PathBuf,
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub vae: PathBuf,
    #[arg(long)]
    pub lcm: PathBuf,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "pixel-decoder")]
    pub backend: BackendArg,
    /// Sampling steps for the diffusion backend.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Original image; prints PSNR against it.
    #[arg(long)]
    pub reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vae: PathBuf,
    /// One codec checkpoint per λ.
    #[arg(long, num_args = 1.., required = true)]
    pub lcm: Vec<PathBuf>,
    #[arg(long)]
    pub denoiser: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pixel-decoder")]
    pub backend: BackendArg,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip segmentation scoring.
    #[arg(long)]
    pub no_miou: bool,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BdMethodArg {
    Cubic,
    Pchip,
}

#[derive(Args, Debug)]
pub struct BdArgs {
    pub anchor: PathBuf,
    pub test: PathBuf,
    #[arg(long, value_enum, default_value = "cubic")]
    pub method: BdMethodArg,
}
