//! Correlation analyses between quality assignment and recognition bias:
//! error-versus-reject curves, subgroup proportions over quality thresholds
//! and per-subgroup quality distributions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::pairs::ScoredComparisons;
use crate::quality::QualityScores;
use crate::stats;
use crate::verification::{count_non_matches, threshold_at_fmr};

pub const DEFAULT_PROPORTION_POINTS: usize = 100;
pub const DEFAULT_BINS: usize = 50;

/// Reject ratios 0, 0.02, ..., 0.90.
pub fn default_reject_grid() -> Vec<f64> {
    (0..=45).map(|k| k as f64 / 50.0).collect()
}

/// Number of images discarded at ratio `r`: `ceil(r * n)`.
pub fn reject_count(ratio: f64, n: usize) -> usize {
    // slack absorbs products like 0.1 * 30 = 3.0000000000000004
    ((ratio * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Image indices from lowest to highest quality; ties by ascending index.
pub fn rejection_order(quality: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..quality.len()).collect();
    order.sort_by(|&a, &b| quality[a].total_cmp(&quality[b]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErcThreshold {
    /// Threshold computed once on the full impostor set.
    #[default]
    Fixed,
    /// Threshold recomputed from the impostors that survive each rejection step.
    Rederive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErcPoint {
    pub reject_ratio: f64,
    pub rejected_images: usize,
    /// `None` when no genuine pair survives (or, re-derived, too few impostors).
    pub fnmr: Option<f64>,
    pub remaining_genuine: usize,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRejectCurve {
    pub estimator: String,
    pub fmr_target: f64,
    pub threshold: f64,
    pub mode: ErcThreshold,
    pub points: Vec<ErcPoint>,
}

fn check_pairs_in_range(scored: &ScoredComparisons, n: usize) -> Result<()> {
    for p in scored.genuine.iter().chain(&scored.impostor) {
        for index in [p.pair.probe, p.pair.reference] {
            if index >= n {
                return Err(Error::IndexOutOfRange { index, len: n });
            }
        }
    }
    Ok(())
}

fn normalized_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::Empty("reject grid"));
    }
    if let Some(r) = grid.iter().find(|r| !(**r >= 0.0 && **r < 1.0)) {
        return Err(Error::InvalidArgument(format!("reject ratio {r} outside [0, 1)")));
    }
    let mut g = grid.to_vec();
    g.push(0.0);
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

pub fn error_vs_reject(
    scored: &ScoredComparisons,
    quality: &QualityScores,
    fmr_target: f64,
    grid: &[f64],
    mode: ErcThreshold,
) -> Result<ErrorRejectCurve> {
    let n = quality.len();
    if n == 0 {
        return Err(Error::Empty("quality scores"));
    }
    check_pairs_in_range(scored, n)?;
    let grid = normalized_grid(grid)?;
    let threshold = threshold_at_fmr(&scored.impostor_scores(), fmr_target)?.value;
    let order = rejection_order(&quality.values);

    let mut kept = vec![true; n];
    let mut rejected = 0;
    let mut points = Vec::with_capacity(grid.len());
    for &ratio in &grid {
        let target = reject_count(ratio, n);
        while rejected < target {
            kept[order[rejected]] = false;
            rejected += 1;
        }
        let both = |a: usize, b: usize| kept[a] && kept[b];
        let point_threshold = match mode {
            ErcThreshold::Fixed => Some(threshold),
            ErcThreshold::Rederive => {
                let imp: Vec<f64> = scored
                    .impostor
                    .iter()
                    .filter(|p| both(p.pair.probe, p.pair.reference))
                    .map(|p| p.score)
                    .collect();
                threshold_at_fmr(&imp, fmr_target).ok().map(|t| t.value)
            }
        };
        let genuine = scored
            .genuine
            .iter()
            .filter(|p| both(p.pair.probe, p.pair.reference))
            .map(|p| p.score);
        let remaining_genuine = genuine.clone().count();
        let fnmr = match point_threshold {
            Some(t) if remaining_genuine > 0 => {
                Some(count_non_matches(genuine, t) as f64 / remaining_genuine as f64)
            }
            _ => None,
        };
        points.push(ErcPoint {
            reject_ratio: ratio,
            rejected_images: rejected,
            fnmr,
            remaining_genuine,
            threshold: point_threshold,
        });
    }
    Ok(ErrorRejectCurve {
        estimator: quality.estimator_name.clone(),
        fmr_target,
        threshold,
        mode,
        points,
    })
}

impl ErrorRejectCurve {
    /// `reject_ratio,fnmr,remaining_genuine`; undefined FNMR is written as `NA`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
        w.write_record(["reject_ratio", "fnmr", "remaining_genuine"])
            .map_err(|e| Error::csv(path, &e))?;
        for p in &self.points {
            w.write_record([
                p.reject_ratio.to_string(),
                p.fnmr.map_or_else(|| "NA".to_string(), |v| v.to_string()),
                p.remaining_genuine.to_string(),
            ])
            .map_err(|e| Error::csv(path, &e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionPoint {
    /// Quantile level in `[0, 1)`.
    pub quantile: f64,
    pub threshold: f64,
    pub remaining_total: usize,
    /// Aligned with [`ProportionCurve::labels`].
    pub fractions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionCurve {
    pub estimator: String,
    pub attribute: String,
    pub labels: Vec<String>,
    pub points: Vec<ProportionPoint>,
}

impl ProportionCurve {
    pub fn fraction(&self, point: usize, label: &str) -> Option<f64> {
        let k = self.labels.iter().position(|l| l == label)?;
        Some(self.points.get(point)?.fractions[k])
    }

    /// Point closest to quantile level `q`.
    pub fn point_at(&self, q: f64) -> &ProportionPoint {
        self.points
            .iter()
            .min_by(|a, b| (a.quantile - q).abs().total_cmp(&(b.quantile - q).abs()))
            .expect("curve has points")
    }

    /// `threshold_quantile,threshold_value,label,fraction,remaining_total`
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
        w.write_record([
            "threshold_quantile",
            "threshold_value",
            "label",
            "fraction",
            "remaining_total",
        ])
        .map_err(|e| Error::csv(path, &e))?;
        for p in &self.points {
            for (label, f) in self.labels.iter().zip(&p.fractions) {
                w.write_record([
                    p.quantile.to_string(),
                    p.threshold.to_string(),
                    label.clone(),
                    f.to_string(),
                    p.remaining_total.to_string(),
                ])
                .map_err(|e| Error::csv(path, &e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-label share of the images with quality at or above each empirical
/// quantile `sorted[floor(k * n / points)]`, `k = 0..points`.
pub fn proportion_vs_threshold(
    dataset: &Dataset,
    quality: &QualityScores,
    attribute: &str,
    num_points: usize,
) -> Result<ProportionCurve> {
    quality.check_aligned(dataset)?;
    if num_points == 0 {
        return Err(Error::InvalidArgument("need at least one proportion point".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let labels_of = dataset.labels(attribute)?;
    let labels = dataset.label_set(attribute)?;
    let label_idx: Vec<usize> = labels_of
        .iter()
        .map(|l| labels.binary_search_by(|x| x.as_str().cmp(l)).unwrap())
        .collect();
    let n = dataset.len();
    let mut sorted = quality.values.clone();
    sorted.sort_by(f64::total_cmp);

    let points = (0..num_points)
        .map(|k| {
            let threshold = sorted[(k * n / num_points).min(n - 1)];
            let mut counts = vec![0usize; labels.len()];
            for (i, &q) in quality.values.iter().enumerate() {
                if q >= threshold {
                    counts[label_idx[i]] += 1;
                }
            }
            let remaining_total: usize = counts.iter().sum();
            ProportionPoint {
                quantile: k as f64 / num_points as f64,
                threshold,
                remaining_total,
                fractions: counts
                    .iter()
                    .map(|&c| c as f64 / remaining_total as f64)
                    .collect(),
            }
        })
        .collect();
    Ok(ProportionCurve {
        estimator: quality.estimator_name.clone(),
        attribute: attribute.to_string(),
        labels,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub a: String,
    pub b: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub estimator: String,
    pub attribute: String,
    /// `bins + 1` edges; a single bin when the pooled range is degenerate.
    pub bin_edges: Vec<f64>,
    pub labels: Vec<String>,
    /// Probability mass per bin, aligned with `labels`.
    pub histograms: Vec<Vec<f64>>,
    pub stats: Vec<LabelStats>,
    /// One entry per unordered label pair, `a < b`.
    pub overlaps: Vec<Overlap>,
}

impl DistributionSummary {
    pub fn histogram(&self, label: &str) -> Option<&[f64]> {
        let k = self.labels.iter().position(|l| l == label)?;
        Some(&self.histograms[k])
    }

    /// Symmetric lookup; 1 for a label against itself.
    pub fn overlap(&self, a: &str, b: &str) -> Option<f64> {
        if a == b {
            return self.labels.iter().any(|l| l == a).then_some(1.0);
        }
        self.overlaps
            .iter()
            .find(|o| (o.a == a && o.b == b) || (o.a == b && o.b == a))
            .map(|o| o.coefficient)
    }

    pub fn stats(&self, label: &str) -> Option<&LabelStats> {
        self.stats.iter().find(|s| s.label == label)
    }

    /// `label,bin,bin_lo,bin_hi,mass`
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
        w.write_record(["label", "bin", "bin_lo", "bin_hi", "mass"])
            .map_err(|e| Error::csv(path, &e))?;
        for (label, hist) in self.labels.iter().zip(&self.histograms) {
            for (b, mass) in hist.iter().enumerate() {
                w.write_record([
                    label.clone(),
                    b.to_string(),
                    self.bin_edges[b].to_string(),
                    self.bin_edges[b + 1].to_string(),
                    mass.to_string(),
                ])
                .map_err(|e| Error::csv(path, &e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `sum_b min(a_b, b_b)` of two probability histograms.
pub fn histogram_overlap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).sum()
}

pub fn quality_distributions(
    dataset: &Dataset,
    quality: &QualityScores,
    attribute: &str,
    bins: usize,
) -> Result<DistributionSummary> {
    quality.check_aligned(dataset)?;
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let labels_of = dataset.labels(attribute)?;
    let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (l, &q) in labels_of.iter().zip(&quality.values) {
        grouped.entry(l).or_default().push(q);
    }
    let lo = quality.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = quality.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bins = if hi > lo { bins } else { 1 };
    let width = (hi - lo) / bins as f64;
    let mut bin_edges: Vec<f64> = (0..bins).map(|k| lo + k as f64 * width).collect();
    bin_edges.push(hi);
    let bin_of = |v: f64| {
        if bins == 1 {
            0
        } else {
            (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
        }
    };

    let mut labels = Vec::new();
    let mut histograms = Vec::new();
    let mut label_stats = Vec::new();
    for (label, values) in &grouped {
        let mut h = vec![0.0; bins];
        for &v in values {
            h[bin_of(v)] += 1.0;
        }
        let total = values.len() as f64;
        h.iter_mut().for_each(|c| *c /= total);
        labels.push(label.to_string());
        histograms.push(h);
        label_stats.push(LabelStats {
            label: label.to_string(),
            count: values.len(),
            mean: stats::mean(values),
            median: stats::median(values),
        });
    }
    let mut overlaps = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            overlaps.push(Overlap {
                a: labels[i].clone(),
                b: labels[j].clone(),
                coefficient: histogram_overlap(&histograms[i], &histograms[j]),
            });
        }
    }
    Ok(DistributionSummary {
        estimator: quality.estimator_name.clone(),
        attribute: attribute.to_string(),
        bin_edges,
        labels,
        histograms,
        stats: label_stats,
        overlaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SampleRecord;
    use crate::fqbe::Matrix;
    use crate::pairs::{Pair, ScoredPair};
    use proptest::prelude::*;

    fn labeled(labels: &[&str]) -> Dataset {
        let recs = labels
            .iter()
            .enumerate()
            .map(|(i, l)| SampleRecord::new(format!("i{i}"), format!("s{}", i / 2)).with_attribute("g", *l))
            .collect();
        let n = labels.len();
        Dataset::new(recs, Matrix::new(n, 1, vec![1.0; n]).unwrap(), None).unwrap()
    }

    fn q(values: Vec<f64>) -> QualityScores {
        QualityScores::new("test", values).unwrap()
    }

    fn sp(a: usize, b: usize, score: f64) -> ScoredPair {
        ScoredPair {
            pair: Pair::new(a, b),
            score,
        }
    }

    #[test]
    fn reject_counts() {
        assert_eq!(reject_count(0.0, 50), 0);
        assert_eq!(reject_count(0.1, 30), 3);
        assert_eq!(reject_count(0.11, 30), 4);
        assert_eq!(reject_count(0.999, 10), 10);
        assert_eq!(rejection_order(&[0.5, 0.1, 0.5, 0.1]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn oracle_quality_drives_fnmr_to_zero() {
        // images 0..4; genuine (0,1) fails, (2,3) matches
        let scored = ScoredComparisons {
            genuine: vec![sp(0, 1, 0.05), sp(2, 3, 0.9)],
            impostor: (0..10).map(|k| sp(0, 2, k as f64 / 100.0)).collect(),
        };
        let quality = q(vec![0.0, 0.0, 1.0, 1.0]);
        let erc = error_vs_reject(&scored, &quality, 0.1, &[0.0, 0.25, 0.5], ErcThreshold::Fixed).unwrap();
        assert_eq!(erc.points[0].fnmr, Some(0.5));
        assert_eq!(erc.points[1].fnmr, Some(0.0));
        assert_eq!(erc.points[2].fnmr, Some(0.0));
        assert_eq!(erc.points[2].remaining_genuine, 1);
        // dropping the last genuine pair leaves FNMR undefined
        let erc = error_vs_reject(&scored, &quality, 0.1, &[0.75], ErcThreshold::Fixed).unwrap();
        assert_eq!(erc.points.len(), 2);
        assert_eq!(erc.points[1].fnmr, None);
    }

    #[test]
    fn erc_input_errors() {
        let scored = ScoredComparisons {
            genuine: vec![sp(0, 1, 0.5)],
            impostor: vec![sp(0, 2, 0.1); 10],
        };
        let quality = q(vec![0.0; 3]);
        assert!(error_vs_reject(&scored, &quality, 0.1, &[], ErcThreshold::Fixed).is_err());
        assert!(error_vs_reject(&scored, &quality, 0.1, &[1.0], ErcThreshold::Fixed).is_err());
        assert!(error_vs_reject(&scored, &q(vec![0.0; 2]), 0.1, &[0.0], ErcThreshold::Fixed).is_err());
    }

    #[test]
    fn rederived_threshold_tracks_surviving_impostors() {
        let scored = ScoredComparisons {
            genuine: vec![sp(0, 1, 0.5), sp(2, 3, 0.5)],
            impostor: vec![sp(0, 2, 0.9), sp(1, 3, 0.2), sp(1, 2, 0.3), sp(0, 3, 0.1)],
        };
        let quality = q(vec![0.0, 1.0, 1.0, 1.0]);
        let erc = error_vs_reject(&scored, &quality, 0.5, &[0.25], ErcThreshold::Rederive).unwrap();
        assert_eq!(erc.points[0].threshold, Some(0.3));
        assert_eq!(erc.points[1].threshold, Some(0.3));
        let fixed = error_vs_reject(&scored, &quality, 0.5, &[0.25], ErcThreshold::Fixed).unwrap();
        assert_eq!(fixed.points[1].threshold, Some(fixed.threshold));
    }

    #[test]
    fn constant_quality_keeps_proportions() {
        let ds = labeled(&["a", "a", "b", "c", "c", "c"]);
        let curve = proportion_vs_threshold(&ds, &q(vec![0.5; 6]), "g", 10).unwrap();
        for p in &curve.points {
            assert_eq!(p.fractions, curve.points[0].fractions);
            assert_eq!(p.remaining_total, 6);
        }
    }

    #[test]
    fn separated_label_vanishes_at_median() {
        let ds = labeled(&["a", "b", "a", "b", "a", "b", "a", "b"]);
        let quality = q(vec![0.9, 0.1, 0.8, 0.2, 0.7, 0.3, 0.6, 0.4]);
        let curve = proportion_vs_threshold(&ds, &quality, "g", 100).unwrap();
        assert_eq!(curve.fraction(0, "b"), Some(0.5));
        let median = curve.points.iter().position(|p| p.quantile == 0.5).unwrap();
        assert_eq!(curve.fraction(median, "b"), Some(0.0));
        assert!(proportion_vs_threshold(&ds, &quality, "pose", 10).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = [0.25, 0.25, 0.25, 0.25, 0.0, 0.0];
        let b = [0.0, 0.0, 0.25, 0.25, 0.25, 0.25];
        assert_eq!(histogram_overlap(&a, &b), 0.5);
        assert_eq!(histogram_overlap(&a, &a), 1.0);
        assert_eq!(histogram_overlap(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn distribution_identical_and_disjoint() {
        let ds = labeled(&["a", "b", "a", "b"]);
        let same = quality_distributions(&ds, &q(vec![0.1, 0.1, 0.9, 0.9]), "g", 50).unwrap();
        assert_eq!(same.bin_edges.len(), 51);
        assert_eq!(same.overlap("a", "b"), Some(1.0));
        let apart = quality_distributions(&ds, &q(vec![0.1, 0.9, 0.2, 0.8]), "g", 50).unwrap();
        assert_eq!(apart.overlap("b", "a"), Some(0.0));
        assert_eq!(apart.stats("a").unwrap().median, 0.15000000000000002);
    }

    #[test]
    fn degenerate_range_uses_one_bin() {
        let ds = labeled(&["a", "b"]);
        let d = quality_distributions(&ds, &q(vec![0.4, 0.4]), "g", 50).unwrap();
        assert_eq!(d.bin_edges, vec![0.4, 0.4]);
        assert_eq!(d.histogram("a"), Some(&[1.0][..]));
    }

    proptest! {
        #[test]
        fn proportions_sum_to_one_and_ignore_monotone_transforms(
            values in prop::collection::vec(-5.0f64..5.0, 4..60),
            points in 1usize..30,
        ) {
            let labels: Vec<&str> = (0..values.len()).map(|i| ["x", "y", "z"][i % 3]).collect();
            let ds = labeled(&labels);
            let curve = proportion_vs_threshold(&ds, &q(values.clone()), "g", points).unwrap();
            for p in &curve.points {
                prop_assert!(p.remaining_total > 0);
                prop_assert!((p.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let moved: Vec<f64> = values.iter().map(|v| (v * 0.7).exp() + 3.0).collect();
            let other = proportion_vs_threshold(&ds, &q(moved), "g", points).unwrap();
            for (a, b) in curve.points.iter().zip(&other.points) {
                prop_assert_eq!(&a.fractions, &b.fractions);
            }
        }

        #[test]
        fn histograms_normalized_and_overlap_bounded(
            values in prop::collection::vec(0.0f64..1.0, 2..80),
        ) {
            let labels: Vec<&str> = (0..values.len()).map(|i| if i % 2 == 0 { "p" } else { "q" }).collect();
            let ds = labeled(&labels);
            let d = quality_distributions(&ds, &q(values), "g", 50).unwrap();
            for h in &d.histograms {
                prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let o = d.overlap("p", "q").unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&o));
            prop_assert_eq!(o, d.overlap("q", "p").unwrap());
        }
    }
}
