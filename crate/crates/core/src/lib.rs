//! Face image quality estimation from embeddings, verification metrics and
//! the analyses that relate quality assignment to subgroup recognition bias.
//!
//! Pipeline: load or [`synthetic::generate`] a [`Dataset`], build genuine and
//! impostor pairs with [`generate_pairs`], score them with [`score_pairs`],
//! estimate per-image quality ([`serfiq`], [`bestrowden`], or an external
//! score file), then run [`report::bias_report`].

pub mod analysis;
pub mod bestrowden;
pub mod dataset;
pub mod error;
pub mod fqbe;
mod linalg;
pub mod pairs;
pub mod quality;
pub mod report;
pub mod rng;
pub mod serfiq;
pub mod stats;
pub mod synthetic;
pub mod verification;

pub use analysis::{
    error_vs_reject, proportion_vs_threshold, quality_distributions, DistributionSummary,
    ErcThreshold, ErrorRejectCurve, ProportionCurve,
};
pub use bestrowden::{predict_quality, quality_labels, train_regressor, RegressorModel, RidgeCv};
pub use dataset::{load_dataset, save_dataset, DataDir, Dataset, SampleRecord};
pub use error::{Error, Result};
pub use fqbe::Matrix;
pub use pairs::{generate_pairs, ComparisonSet, Pair, ScoredComparisons, ScoredPair};
pub use quality::{load_quality_csv, write_quality_csv, QualityScores};
pub use report::{bias_report, ReportBundle, ReportConfig};
pub use serfiq::{serfiq_dataset, serfiq_quality, stochastic_embeddings, LastLayer, SerfiqConfig};
pub use synthetic::{generate, make_last_layer, SynthConfig};
pub use verification::{
    cosine_similarity, fnmr_at_threshold, score_pairs, subgroup_fnmr_table, threshold_at_fmr,
    Threshold, ThresholdScope, VerificationReport,
};
