//! `cpn`: command-line front end for the palmprint toolkit.

mod commands;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cpn", version, about = "Touchless palmprint recognition toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a Gabor bank and write it as a checkpoint plus a kernel listing.
    GenBank(GenBankArgs),
    /// Generate a synthetic palmprint corpus.
    GenData(GenDataArgs),
    /// Cut keypoint-aligned ROIs out of full palm images.
    ExtractRoi(ExtractRoiArgs),
    /// Apply the ROI-bias perturbation to every image of a manifest.
    Bias(BiasArgs),
    /// Train a network from a TOML run configuration.
    Train(TrainArgs),
    /// Write descriptors for every image of a manifest.
    Embed(EmbedArgs),
    /// Score every probe image against every gallery image with a coding baseline.
    BaselineMatch(BaselineMatchArgs),
    /// Run the verification protocol and write a CSV report bundle.
    Evaluate(EvaluateArgs),
    /// Re-run the protocol under increasing ROI bias.
    BiasSweep(BiasSweepArgs),
    /// Train on the synthetic desk corpus under several loss settings.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenBankArgs {
    /// Wavelengths.
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 10.0, 15.0])]
    lambdas: Vec<f64>,
    /// Gaussian widths.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 3.0, 5.0])]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 12)]
    directions: usize,
    /// Kernel side in pixels (odd).
    #[arg(long, default_value_t = 35)]
    size: usize,
    /// Spatial aspect ratio.
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Include curved templates.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    curved: bool,
    /// Checkpoint path; the listing goes next to it with a `.txt` extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    identities: usize,
    #[arg(long, default_value_t = 6)]
    images: usize,
    /// Leading images of each palm labelled as enrollment.
    #[arg(long, default_value_t = 3)]
    enroll: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    first_identity: u32,
    /// Per-image translation jitter in pixels.
    #[arg(long)]
    translation: Option<f64>,
    /// Per-image rotation jitter in radians.
    #[arg(long)]
    rotation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output directory for the images and `manifest.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractRoiArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// ROI side in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
}

#[derive(Args)]
struct BiasArgs {
    /// Translation degree in pixels.
    #[arg(long)]
    r: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    input: PathBuf,
    /// Output manifest; biased images are written beside it.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory for the checkpoint, `model.toml` and `loss.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Directory written by `cpn train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Descriptor file; a CSV row index goes next to it.
    #[arg(long)]
    out: PathBuf,
}

/// Coding-bank flags shared by the baseline matchers.
#[derive(Args, Clone)]
struct CodingArgs {
    #[arg(long, default_value_t = 6)]
    orientations: usize,
    #[arg(long, default_value_t = 8.0)]
    coding_lambda: f64,
    #[arg(long, default_value_t = 2.5)]
    coding_sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    coding_gamma: f64,
    #[arg(long, default_value_t = 17)]
    coding_size: usize,
}

/// Where enrollment and probe images come from: one manifest split by
/// stage, or two manifests.
#[derive(Args, Clone)]
struct SetArgs {
    #[arg(long, conflicts_with_all = ["gallery", "probes"])]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "probes")]
    gallery: Option<PathBuf>,
    #[arg(long, requires = "gallery")]
    probes: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BaselineName {
    Compcode,
    RegionHist,
}

#[derive(Args)]
struct BaselineMatchArgs {
    #[arg(long, value_enum)]
    matcher: BaselineName,
    #[command(flatten)]
    coding: CodingArgs,
    #[command(flatten)]
    sets: SetArgs,
    /// Score CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// compcode, region-hist, compcode-curved, compcode+curved,
    /// region-hist+curved or cpn.
    #[arg(long)]
    matcher: String,
    /// Trained model directory, required by `cpn`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    coding: CodingArgs,
    #[command(flatten)]
    sets: SetArgs,
    /// Output directory for the CSV bundle.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BiasSweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [0, 2, 4, 6, 8, 10])]
    r: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = ["compcode".to_string(), "region-hist".to_string()])]
    matchers: Vec<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    coding: CodingArgs,
    #[command(flatten)]
    sets: SetArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    /// Softmax against arc-margin settings of scale and margin.
    Loss,
    /// Block-loss weight.
    Mu,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    kind: SweepKind,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Synthetic corpus seed.
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    #[arg(long, default_value_t = 1)]
    model_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenBank(a) => commands::gen_bank(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::ExtractRoi(a) => commands::extract_roi(a),
        Command::Bias(a) => commands::bias(a),
        Command::Train(a) => commands::train(a),
        Command::Embed(a) => commands::embed(a),
        Command::BaselineMatch(a) => commands::baseline_match(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::BiasSweep(a) => commands::bias_sweep(a),
        Command::Sweep(a) => commands::sweep(a),
    }
}
