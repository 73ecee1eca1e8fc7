//! Full analysis bundle per (estimator, attribute), written as
//!
//! ```text
//! <out>/<estimator>/<attribute>/fnmr_table.csv
//!                              /erc_fmr<target>.csv   one per FMR target
//!                              /proportions.csv
//!                              /distributions.csv
//!                              /summary.json
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{
    default_reject_grid, error_vs_reject, proportion_vs_threshold, quality_distributions,
    DistributionSummary, ErcThreshold, ErrorRejectCurve, LabelStats, Overlap, ProportionCurve,
    DEFAULT_BINS, DEFAULT_PROPORTION_POINTS,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pairs::ScoredComparisons;
use crate::quality::QualityScores;
use crate::verification::{subgroup_fnmr_table, ThresholdScope, VerificationReport, DEFAULT_FMR_TARGETS};

pub const FNMR_TABLE_FILE: &str = "fnmr_table.csv";
pub const PROPORTIONS_FILE: &str = "proportions.csv";
pub const DISTRIBUTIONS_FILE: &str = "distributions.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn erc_file_name(fmr_target: f64) -> String {
    format!("erc_fmr{fmr_target}.csv")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub attributes: Vec<String>,
    pub fmr_targets: Vec<f64>,
    pub reject_grid: Vec<f64>,
    pub proportion_points: usize,
    pub bins: usize,
    pub threshold_scope: ThresholdScope,
    pub erc_threshold: ErcThreshold,
}

impl ReportConfig {
    pub fn new(attributes: Vec<String>) -> Self {
        Self {
            attributes,
            fmr_targets: DEFAULT_FMR_TARGETS.to_vec(),
            reject_grid: default_reject_grid(),
            proportion_points: DEFAULT_PROPORTION_POINTS,
            bins: DEFAULT_BINS,
            threshold_scope: ThresholdScope::Global,
            erc_threshold: ErcThreshold::Fixed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeReport {
    pub estimator: String,
    pub attribute: String,
    pub verification: VerificationReport,
    pub ercs: Vec<ErrorRejectCurve>,
    pub proportions: ProportionCurve,
    pub distributions: DistributionSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub reports: Vec<AttributeReport>,
}

pub fn bias_report(
    dataset: &Dataset,
    scored: &ScoredComparisons,
    quality_sets: &[QualityScores],
    config: &ReportConfig,
) -> Result<ReportBundle> {
    if quality_sets.is_empty() {
        return Err(Error::Empty("quality estimators"));
    }
    if config.attributes.is_empty() {
        return Err(Error::Empty("attributes"));
    }
    let mut names = HashSet::new();
    for q in quality_sets {
        if !names.insert(path_component(&q.estimator_name)) {
            return Err(Error::InvalidArgument(format!(
                "estimator name `{}` used twice",
                q.estimator_name
            )));
        }
        q.check_aligned(dataset)?;
    }
    let tables = config
        .attributes
        .iter()
        .map(|a| subgroup_fnmr_table(dataset, scored, a, &config.fmr_targets, config.threshold_scope))
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::new();
    for quality in quality_sets {
        let ercs = config
            .fmr_targets
            .iter()
            .map(|&t| error_vs_reject(scored, quality, t, &config.reject_grid, config.erc_threshold))
            .collect::<Result<Vec<_>>>()?;
        for (attribute, table) in config.attributes.iter().zip(&tables) {
            reports.push(AttributeReport {
                estimator: quality.estimator_name.clone(),
                attribute: attribute.clone(),
                verification: table.clone(),
                ercs: ercs.clone(),
                proportions: proportion_vs_threshold(dataset, quality, attribute, config.proportion_points)?,
                distributions: quality_distributions(dataset, quality, attribute, config.bins)?,
            });
        }
    }
    Ok(ReportBundle { reports })
}

/// File-system safe rendering of an estimator or attribute name.
pub fn path_component(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect();
    if s.is_empty() || s.chars().all(|c| c == '.') {
        format!("_{s}")
    } else {
        s
    }
}

#[derive(Serialize)]
struct ErcSummary<'a> {
    fmr_target: f64,
    threshold: f64,
    mode: ErcThreshold,
    file: String,
    fnmr_at_zero_reject: Option<f64>,
    points: &'a [crate::analysis::ErcPoint],
}

#[derive(Serialize)]
struct ProportionSummary<'a> {
    labels: &'a [String],
    base_fractions: &'a [f64],
    median_threshold: f64,
    median_fractions: &'a [f64],
}

#[derive(Serialize)]
struct DistributionOverview<'a> {
    bins: usize,
    stats: &'a [LabelStats],
    overlaps: &'a [Overlap],
}

#[derive(Serialize)]
struct Summary<'a> {
    estimator: &'a str,
    attribute: &'a str,
    files: Vec<String>,
    verification: &'a VerificationReport,
    table: Vec<String>,
    erc: Vec<ErcSummary<'a>>,
    proportions: ProportionSummary<'a>,
    distributions: DistributionOverview<'a>,
}

impl AttributeReport {
    pub fn file_names(&self) -> Vec<String> {
        let mut files = vec![FNMR_TABLE_FILE.to_string()];
        files.extend(self.ercs.iter().map(|e| erc_file_name(e.fmr_target)));
        files.extend([PROPORTIONS_FILE, DISTRIBUTIONS_FILE, SUMMARY_FILE].map(String::from));
        files
    }

    pub fn directory(&self, out: &Path) -> PathBuf {
        out.join(path_component(&self.estimator))
            .join(path_component(&self.attribute))
    }

    fn summary_json(&self) -> Result<String> {
        let base = &self.proportions.points[0];
        let median = self.proportions.point_at(0.5);
        let summary = Summary {
            estimator: &self.estimator,
            attribute: &self.attribute,
            files: self.file_names(),
            verification: &self.verification,
            table: self.verification.rows.iter().map(|r| r.render()).collect(),
            erc: self
                .ercs
                .iter()
                .map(|e| ErcSummary {
                    fmr_target: e.fmr_target,
                    threshold: e.threshold,
                    mode: e.mode,
                    file: erc_file_name(e.fmr_target),
                    fnmr_at_zero_reject: e.points[0].fnmr,
                    points: &e.points,
                })
                .collect(),
            proportions: ProportionSummary {
                labels: &self.proportions.labels,
                base_fractions: &base.fractions,
                median_threshold: median.threshold,
                median_fractions: &median.fractions,
            },
            distributions: DistributionOverview {
                bins: self.distributions.bin_edges.len() - 1,
                stats: &self.distributions.stats,
                overlaps: &self.distributions.overlaps,
            },
        };
        serde_json::to_string_pretty(&summary)
            .map(|s| s + "\n")
            .map_err(|e| Error::json(SUMMARY_FILE, &e))
    }

    /// Writes every file of this entry; returns the paths in write order.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let dir = self.directory(out);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut written = Vec::new();
        let mut track = |p: PathBuf| {
            written.push(p.clone());
            p
        };
        self.verification.write_csv(track(dir.join(FNMR_TABLE_FILE)))?;
        for erc in &self.ercs {
            erc.write_csv(track(dir.join(erc_file_name(erc.fmr_target))))?;
        }
        self.proportions.write_csv(track(dir.join(PROPORTIONS_FILE)))?;
        self.distributions.write_csv(track(dir.join(DISTRIBUTIONS_FILE)))?;
        let summary = track(dir.join(SUMMARY_FILE));
        fs::write(&summary, self.summary_json()?).map_err(|e| Error::io(&summary, e))?;
        Ok(written)
    }
}

impl ReportBundle {
    pub fn get(&self, estimator: &str, attribute: &str) -> Option<&AttributeReport> {
        self.reports
            .iter()
            .find(|r| r.estimator == estimator && r.attribute == attribute)
    }

    pub fn write(&self, out: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let out = out.as_ref();
        let mut all = Vec::new();
        for r in &self.reports {
            all.extend(r.write(out)?);
        }
        Ok(all)
    }
}
