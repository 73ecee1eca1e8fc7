//! Verification metrics: cosine scores, FMR thresholds, FNMR and the
//! per-subgroup FNMR table.
//!
//! A comparison is a match when `score >= threshold`. FMR is the fraction of
//! impostor scores that match; FNMR is the fraction of genuine scores that
//! do not.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pairs::{ComparisonSet, Pair, ScoredComparisons, ScoredPair};

pub const DEFAULT_FMR_TARGETS: [f64; 2] = [0.001, 0.01];
pub const ALL_LABEL: &str = "All";

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(dot.is_finite() && na.is_finite() && nb.is_finite()) {
        return Err(Error::NonFinite {
            what: "cosine input".into(),
            row: 0,
        });
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm { row: 0 });
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Cosine score for every pair, preserving pair order.
pub fn score_pairs(dataset: &Dataset, pairs: &ComparisonSet) -> Result<ScoredComparisons> {
    let n = dataset.len();
    let score = |list: &[Pair]| -> Result<Vec<ScoredPair>> {
        list.par_iter()
            .map(|&pair| {
                for index in [pair.probe, pair.reference] {
                    if index >= n {
                        return Err(Error::IndexOutOfRange { index, len: n });
                    }
                }
                let score = cosine_similarity(dataset.embedding(pair.probe), dataset.embedding(pair.reference))?;
                Ok(ScoredPair { pair, score })
            })
            .collect()
    };
    Ok(ScoredComparisons {
        genuine: score(&pairs.genuine)?,
        impostor: score(&pairs.impostor)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    pub achieved_fmr: f64,
}

/// Fewest impostor scores that can resolve `target`.
pub fn min_impostors_for(target: f64) -> usize {
    // slack absorbs 1/target landing a hair above an integer
    (1.0 / target - 1e-9).ceil().max(1.0) as usize
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must lie in (0, 1), got {v}")))
    }
}

/// Smallest threshold, taken from the distinct observed impostor scores (or
/// one ulp above the maximum), whose FMR does not exceed `target_fmr`.
pub fn threshold_at_fmr(impostor_scores: &[f64], target_fmr: f64) -> Result<Threshold> {
    check_fraction("target FMR", target_fmr)?;
    if impostor_scores.is_empty() {
        return Err(Error::Empty("impostor scores"));
    }
    let needed = min_impostors_for(target_fmr);
    if impostor_scores.len() < needed {
        return Err(Error::TooFewImpostors {
            target: target_fmr,
            needed,
            found: impostor_scores.len(),
        });
    }
    if let Some(row) = impostor_scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            what: "impostor scores".into(),
            row,
        });
    }
    let mut sorted = impostor_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        // sorted[i] is the first occurrence of its value; n - i scores are >= it
        let fmr = (n - i) as f64 / n as f64;
        if fmr <= target_fmr {
            return Ok(Threshold {
                value: sorted[i],
                achieved_fmr: fmr,
            });
        }
        let v = sorted[i];
        while i < n && sorted[i] == v {
            i += 1;
        }
    }
    Ok(Threshold {
        value: sorted[n - 1].next_up(),
        achieved_fmr: 0.0,
    })
}

/// Fraction of genuine scores strictly below `threshold`.
pub fn fnmr_at_threshold(genuine_scores: &[f64], threshold: f64) -> Result<f64> {
    if genuine_scores.is_empty() {
        return Err(Error::Empty("genuine scores"));
    }
    Ok(count_non_matches(genuine_scores.iter().copied(), threshold) as f64 / genuine_scores.len() as f64)
}

pub(crate) fn count_non_matches(scores: impl Iterator<Item = f64>, threshold: f64) -> usize {
    scores.filter(|&s| s < threshold).count()
}

/// Where subgroup thresholds come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdScope {
    /// One threshold per FMR target from every impostor score.
    #[default]
    Global,
    /// Each subgroup uses thresholds from its own label-pure impostor pairs.
    PerSubgroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnmrCell {
    pub fmr_target: f64,
    pub threshold: Option<f64>,
    /// `None` when the row has no genuine pairs (or, per-subgroup, too few impostors).
    pub fnmr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub label: String,
    pub genuine_count: usize,
    pub impostor_count: usize,
    pub cells: Vec<FnmrCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalThreshold {
    pub fmr_target: f64,
    pub threshold: f64,
    pub achieved_fmr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub attribute: String,
    pub scope: ThresholdScope,
    pub global_thresholds: Vec<GlobalThreshold>,
    /// One row per label (sorted), then the `All` row.
    pub rows: Vec<SubgroupRow>,
}

pub fn subgroup_fnmr_table(
    dataset: &Dataset,
    scored: &ScoredComparisons,
    attribute: &str,
    fmr_targets: &[f64],
    scope: ThresholdScope,
) -> Result<VerificationReport> {
    if fmr_targets.is_empty() {
        return Err(Error::Empty("FMR targets"));
    }
    let labels = dataset.labels(attribute)?;
    let impostors = scored.impostor_scores();
    let global_thresholds = fmr_targets
        .iter()
        .map(|&t| {
            threshold_at_fmr(&impostors, t).map(|th| GlobalThreshold {
                fmr_target: t,
                threshold: th.value,
                achieved_fmr: th.achieved_fmr,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let label_of_pair = |p: &ScoredPair| {
        let a = labels[p.pair.probe];
        (a == labels[p.pair.reference]).then_some(a)
    };
    let mut genuine_by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut impostor_by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for l in &labels {
        genuine_by.entry(l).or_default();
        impostor_by.entry(l).or_default();
    }
    for p in &scored.genuine {
        if let Some(l) = label_of_pair(p) {
            genuine_by.get_mut(l).unwrap().push(p.score);
        }
    }
    for p in &scored.impostor {
        if let Some(l) = label_of_pair(p) {
            impostor_by.get_mut(l).unwrap().push(p.score);
        }
    }

    let make_row = |label: &str, genuine: &[f64], impostor: &[f64], own_thresholds: bool| SubgroupRow {
        label: label.to_string(),
        genuine_count: genuine.len(),
        impostor_count: impostor.len(),
        cells: global_thresholds
            .iter()
            .map(|g| {
                let threshold = if own_thresholds {
                    threshold_at_fmr(impostor, g.fmr_target).ok().map(|t| t.value)
                } else {
                    Some(g.threshold)
                };
                let fnmr = threshold.and_then(|t| fnmr_at_threshold(genuine, t).ok());
                FnmrCell {
                    fmr_target: g.fmr_target,
                    threshold,
                    fnmr,
                }
            })
            .collect(),
    };

    let per_subgroup = scope == ThresholdScope::PerSubgroup;
    let mut rows: Vec<SubgroupRow> = genuine_by
        .iter()
        .map(|(l, g)| make_row(l, g, &impostor_by[l], per_subgroup))
        .collect();
    rows.push(make_row(ALL_LABEL, &scored.genuine_scores(), &impostors, false));
    Ok(VerificationReport {
        attribute: attribute.to_string(),
        scope,
        global_thresholds,
        rows,
    })
}

/// `0.004 -> "0.40%"`.
pub fn format_percent(rate: f64) -> String {
    format!("{:.2}%", rate * 100.0)
}

const EMPTY_CELL: &str = "--";
const CSV_EMPTY: &str = "NA";

impl SubgroupRow {
    /// Table row in `Label & 0.40% & 0.00%` form.
    pub fn render(&self) -> String {
        let mut s = self.label.clone();
        for c in &self.cells {
            s.push_str(" & ");
            match c.fnmr {
                Some(v) => s.push_str(&format_percent(v)),
                None => s.push_str(EMPTY_CELL),
            }
        }
        s
    }
}

impl VerificationReport {
    pub fn row(&self, label: &str) -> Option<&SubgroupRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// FNMR for `label` at `fmr_target`, if defined.
    pub fn fnmr(&self, label: &str, fmr_target: f64) -> Option<f64> {
        self.row(label)?
            .cells
            .iter()
            .find(|c| c.fmr_target == fmr_target)?
            .fnmr
    }

    /// Header plus one rendered line per row, `\\`-terminated like a LaTeX tabular body.
    pub fn render_table(&self) -> String {
        let mut out = String::from("Classes");
        for g in &self.global_thresholds {
            let _ = write!(out, " & {}FMR", trim_percent(g.fmr_target));
        }
        out.push_str(" \\\\\n");
        for r in &self.rows {
            out.push_str(&r.render());
            out.push_str(" \\\\\n");
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
        w.write_record([
            "attribute",
            "label",
            "fmr_target",
            "threshold",
            "fnmr",
            "genuine_count",
            "impostor_count",
        ])
        .map_err(|e| Error::csv(path, &e))?;
        let opt = |v: Option<f64>| v.map_or_else(|| CSV_EMPTY.to_string(), |v| v.to_string());
        for r in &self.rows {
            for c in &r.cells {
                w.write_record([
                    self.attribute.clone(),
                    r.label.clone(),
                    c.fmr_target.to_string(),
                    opt(c.threshold),
                    opt(c.fnmr),
                    r.genuine_count.to_string(),
                    r.impostor_count.to_string(),
                ])
                .map_err(|e| Error::csv(path, &e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `0.001 -> "0.1%"`, `0.01 -> "1%"`.
fn trim_percent(fraction: f64) -> String {
    let s = format!("{:.4}", fraction * 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("{s}%")
}
