use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fqb_core::bestrowden::GenuineAggregate;
use fqb_core::{ErcThreshold, ThresholdScope};

/// Face quality estimation and subgroup bias analysis over embedding data.
///
/// A data directory holds metadata.csv (image_id,subject_id,<attributes>...),
/// embeddings.fqbe and optionally activations.fqbe, layer.fqbe, layer.json
/// and truth.csv. FQBE files are "FQBE", u32 version 1, u64 rows, u64 cols,
/// then row-major little-endian f32. Quality files are CSV image_id,score.
/// Pair files are CSV kind,probe,reference,score with kind genuine|impostor.
///
/// Exit status: 0 on success, 1 on usage errors, 2 on data errors.
/// FQB_THREADS caps worker threads (0 or unset = all cores).
#[derive(Debug, Parser)]
#[command(name = "fqb", version)]
pub struct Cli {
    /// JSON run config supplying defaults for any flag below; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub run_config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with subgroup-dependent noise.
    Synth(SynthArgs),
    /// Build genuine/impostor pairs and score them with cosine similarity.
    Pairs(PairsArgs),
    /// Compute per-image quality scores and write image_id,score CSV.
    #[command(subcommand)]
    Quality(QualityCommand),
    /// Fit the comparison-score quality regressor and save it as JSON.
    TrainQuality(TrainArgs),
    /// Per-subgroup FNMR at fixed FMR targets.
    FnmrTable(FnmrTableArgs),
    /// Error-versus-reject curve: reject_ratio,fnmr,remaining_genuine.
    Erc(ErcArgs),
    /// Subgroup proportions over quality quantile thresholds.
    Proportions(ProportionsArgs),
    /// Per-subgroup quality histograms and pairwise overlap.
    Distributions(DistributionsArgs),
    /// Full bundle: <out>/<estimator>/<attribute>/{fnmr_table.csv,
    /// erc_fmr<target>.csv, proportions.csv, distributions.csv, summary.json}.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Data directory (metadata.csv, embeddings.fqbe, ...).
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Seed for every random draw [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthetic config JSON: {dim, activation_dim, attribute, seed,
    /// subgroups: [{label, subjects, images_per_subject, noise_scale}]}.
    /// Omitted: two subgroups, 20 subjects x 4 images, noise 0.1 vs 0.3, D=32, H=64.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output data directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Output pairs CSV.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Impostor references sampled per probe [default: 1000].
    #[arg(long)]
    pub cap: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Subcommand)]
pub enum QualityCommand {
    /// Stochastic-embedding robustness via dropout on the last layer.
    Serfiq(SerfiqArgs),
    /// Predict with a trained comparison-score regressor.
    Bestrowden(BestRowdenArgs),
    /// Validate and realign an external image_id,score file.
    External(ExternalArgs),
}

#[derive(Debug, Args)]
pub struct SerfiqParams {
    /// Dropout passes per image [default: 100].
    #[arg(long)]
    pub m: Option<usize>,
    /// Dropout rate on the last-layer input [default: 0.5].
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    /// L2-normalize stochastic embeddings before measuring distances.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct SerfiqArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Output quality CSV.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Last-layer weights [default: <data>/layer.fqbe].
    #[arg(long, value_name = "FILE")]
    pub layer: Option<PathBuf>,
    /// Layer sidecar JSON {activation, bias} [default: next to the weights as layer.json].
    #[arg(long, value_name = "FILE")]
    pub layer_sidecar: Option<PathBuf>,
    #[command(flatten)]
    pub params: SerfiqParams,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct BestRowdenArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Model JSON written by train-quality.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExternalArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Score file from an external estimator (image_id,score).
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Estimator name [default: external].
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Aggregate {
    Mean,
    Max,
}

impl From<Aggregate> for GenuineAggregate {
    fn from(a: Aggregate) -> Self {
        match a {
            Aggregate::Mean => GenuineAggregate::Mean,
            Aggregate::Max => GenuineAggregate::Max,
        }
    }
}

#[derive(Debug, Args)]
pub struct RegressorParams {
    /// Comma-separated ridge strengths [default: 1e-4,1e-3,...,1e2].
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    /// Cross-validation folds [default: 5].
    #[arg(long)]
    pub folds: Option<usize>,
    /// Genuine score aggregation per image [default: mean].
    #[arg(long, value_enum)]
    pub aggregate: Option<Aggregate>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Scored pairs CSV; generated from the data when omitted.
    #[arg(long, value_name = "FILE")]
    pub pairs: Option<PathBuf>,
    /// Output model JSON.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub params: RegressorParams,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scope {
    Global,
    PerSubgroup,
}

impl From<Scope> for ThresholdScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Global => ThresholdScope::Global,
            Scope::PerSubgroup => ThresholdScope::PerSubgroup,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ErcMode {
    Fixed,
    Rederive,
}

impl From<ErcMode> for ErcThreshold {
    fn from(m: ErcMode) -> Self {
        match m {
            ErcMode::Fixed => ErcThreshold::Fixed,
            ErcMode::Rederive => ErcThreshold::Rederive,
        }
    }
}

#[derive(Debug, Args)]
pub struct FnmrTableArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Scored pairs CSV.
    #[arg(long, value_name = "FILE")]
    pub pairs: PathBuf,
    /// Metadata attribute to stratify by.
    #[arg(long)]
    pub attribute: Option<String>,
    /// Comma-separated FMR targets [default: 0.001,0.01].
    #[arg(long, value_delimiter = ',')]
    pub fmr: Option<Vec<f64>>,
    /// Threshold source for subgroup rows [default: global].
    #[arg(long, value_enum)]
    pub scope: Option<Scope>,
    /// Output directory for fnmr_table.csv and fnmr_table.json.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QualityInput {
    /// Quality CSV (image_id,score).
    #[arg(long, value_name = "FILE")]
    pub quality: PathBuf,
    /// Estimator name [default: quality file stem].
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct ErcArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_name = "FILE")]
    pub pairs: PathBuf,
    #[command(flatten)]
    pub quality: QualityInput,
    /// FMR target fixing the decision threshold [default: 0.001].
    #[arg(long)]
    pub fmr: Option<f64>,
    /// Comma-separated reject ratios in [0,1) [default: 0,0.02,...,0.9].
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Keep the full-set threshold or re-derive it per point [default: fixed].
    #[arg(long, value_enum)]
    pub threshold: Option<ErcMode>,
    /// Output CSV.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProportionsArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub quality: QualityInput,
    #[arg(long)]
    pub attribute: Option<String>,
    /// Quantile thresholds [default: 100].
    #[arg(long)]
    pub points: Option<usize>,
    /// Output CSV: threshold_quantile,threshold_value,label,fraction,remaining_total.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistributionsArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub quality: QualityInput,
    #[arg(long)]
    pub attribute: Option<String>,
    /// Equal-width bins over the pooled range [default: 50].
    #[arg(long)]
    pub bins: Option<usize>,
    /// Output CSV: label,bin,bin_lo,bin_hi,mass.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Scored pairs CSV; generated from the data when omitted.
    #[arg(long, value_name = "FILE")]
    pub pairs: Option<PathBuf>,
    /// Built-in estimators to run: serfiq, bestrowden [default: serfiq when
    /// activations and layer exist, plus bestrowden].
    #[arg(long, value_delimiter = ',')]
    pub estimators: Option<Vec<String>>,
    /// Extra external estimators as NAME=FILE (repeatable).
    #[arg(long = "quality", value_name = "NAME=FILE")]
    pub external: Vec<String>,
    /// Pre-trained regressor for bestrowden; trained on this data when omitted.
    #[arg(long, value_name = "FILE")]
    pub bestrowden_model: Option<PathBuf>,
    /// Comma-separated attributes [default: every metadata attribute].
    #[arg(long, value_delimiter = ',')]
    pub attributes: Option<Vec<String>>,
    /// Comma-separated FMR targets [default: 0.001,0.01].
    #[arg(long, value_delimiter = ',')]
    pub fmr: Option<Vec<f64>>,
    /// Impostor references per probe when generating pairs [default: 1000].
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long, value_enum)]
    pub scope: Option<Scope>,
    #[arg(long, value_enum)]
    pub erc_threshold: Option<ErcMode>,
    #[command(flatten)]
    pub serfiq: SerfiqParams,
    #[command(flatten)]
    pub regressor: RegressorParams,
    #[command(flatten)]
    pub seed: SeedArg,
}
