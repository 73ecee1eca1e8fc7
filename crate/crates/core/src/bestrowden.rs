//! Comparison-score quality labels and a linear quality regressor.
//!
//! An image's label is the z-score of its genuine score against its own
//! impostor score distribution, `z = (s_G - mean_I) / std_I`, with the
//! population standard deviation floored at [`STD_FLOOR`]. A ridge regressor
//! on standardized embeddings then learns to predict `z` for unseen images;
//! the ridge strength is picked by k-fold cross-validation.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::pairs::ScoredComparisons;
use crate::quality::QualityScores;
use crate::rng::stream_rng;
use crate::stats::{mean, population_std};

pub const ESTIMATOR_NAME: &str = "bestrowden";
pub const STD_FLOOR: f64 = 1e-6;
pub const SCALE_FLOOR: f64 = 1e-12;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];

/// How several genuine scores of one image collapse into `s_G`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenuineAggregate {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityLabel {
    pub image_index: usize,
    pub z: f64,
    pub genuine_mean: f64,
    pub impostor_mean: f64,
    pub impostor_std: f64,
}

/// Label for one image from its genuine and impostor scores. `None` unless
/// there is at least one genuine and two impostor scores.
pub fn zscore_label(genuine: &[f64], impostor: &[f64], aggregate: GenuineAggregate) -> Option<(f64, f64, f64, f64)> {
    if genuine.is_empty() || impostor.len() < 2 {
        return None;
    }
    let s_g = match aggregate {
        GenuineAggregate::Mean => mean(genuine),
        GenuineAggregate::Max => genuine.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let mu = mean(impostor);
    let sigma = population_std(impostor).max(STD_FLOOR);
    Some(((s_g - mu) / sigma, s_g, mu, sigma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<QualityLabel>,
    /// Images lacking one genuine or two impostor comparisons.
    pub omitted: Vec<usize>,
}

impl LabelSet {
    pub fn indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.image_index).collect()
    }

    pub fn z(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.z).collect()
    }
}

pub fn quality_labels(
    dataset: &Dataset,
    scored: &ScoredComparisons,
    aggregate: GenuineAggregate,
) -> Result<LabelSet> {
    let n = dataset.len();
    let mut genuine = vec![Vec::new(); n];
    let mut impostor = vec![Vec::new(); n];
    for (sink, list) in [(&mut genuine, &scored.genuine), (&mut impostor, &scored.impostor)] {
        for p in list {
            for index in [p.pair.probe, p.pair.reference] {
                if index >= n {
                    return Err(Error::IndexOutOfRange { index, len: n });
                }
                sink[index].push(p.score);
            }
        }
    }
    let mut labels = Vec::new();
    let mut omitted = Vec::new();
    for i in 0..n {
        match zscore_label(&genuine[i], &impostor[i], aggregate) {
            Some((z, genuine_mean, impostor_mean, impostor_std)) => labels.push(QualityLabel {
                image_index: i,
                z,
                genuine_mean,
                impostor_mean,
                impostor_std,
            }),
            None => omitted.push(i),
        }
    }
    if labels.is_empty() {
        return Err(Error::NoLabeledImages);
    }
    Ok(LabelSet { labels, omitted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeCv {
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for RidgeCv {
    fn default() -> Self {
        Self {
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            folds: DEFAULT_FOLDS,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    /// Mean over folds of the validation mean squared error.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub samples: usize,
    pub folds: usize,
    pub seed: u64,
    pub cv: Vec<LambdaScore>,
}

/// `score = w . ((x - means) / scales) + intercept`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingInfo>,
}

impl RegressorModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        Ok(self.intercept
            + x.iter()
                .zip(&self.weights)
                .zip(self.feature_means.iter().zip(&self.feature_scales))
                .map(|((v, w), (m, s))| w * (v - m) / s)
                .sum::<f64>())
    }

    /// Coefficients and intercept in the original feature units.
    pub fn raw_coefficients(&self) -> (Vec<f64>, f64) {
        let coef: Vec<f64> = self.weights.iter().zip(&self.feature_scales).map(|(w, s)| w / s).collect();
        let shift: f64 = coef.iter().zip(&self.feature_means).map(|(c, m)| c * m).sum();
        (coef, self.intercept - shift)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, &e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?;
        let d = model.weights.len();
        if model.feature_means.len() != d || model.feature_scales.len() != d {
            return Err(Error::format(path, "model vectors have inconsistent lengths"));
        }
        if model.feature_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::format(path, "feature scales must be positive"));
        }
        Ok(model)
    }
}

fn check_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<usize> {
    if rows.len() != targets.len() {
        return Err(Error::RowCountMismatch {
            what: "labels".into(),
            expected: rows.len(),
            found: targets.len(),
        });
    }
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::InvalidArgument("feature dimension must be at least 1".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: r.len(),
        });
    }
    Ok(d)
}

/// Ridge fit minimizing `(1/n) ||X_std w - (z - mean z)||^2 + lambda ||w||^2`
/// on features standardized with the training mean and population std.
pub fn fit_ridge(rows: &[Vec<f64>], targets: &[f64], lambda: f64) -> Result<RegressorModel> {
    let d = check_rows(rows, targets)?;
    if rows.is_empty() {
        return Err(Error::Empty("training rows"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let n = rows.len() as f64;
    let means: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let scales: Vec<f64> = (0..d)
        .map(|k| {
            let var = rows.iter().map(|r| (r[k] - means[k]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(SCALE_FLOOR)
        })
        .collect();
    let y_mean = targets.iter().sum::<f64>() / n;

    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut xs = vec![0.0; d];
    for (r, &y) in rows.iter().zip(targets) {
        for k in 0..d {
            xs[k] = (r[k] - means[k]) / scales[k];
        }
        let yc = y - y_mean;
        for a in 0..d {
            rhs[a] += xs[a] * yc;
            for b in 0..=a {
                gram[a * d + b] += xs[a] * xs[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            gram[b * d + a] = gram[a * d + b];
        }
    }
    gram.iter_mut().for_each(|v| *v /= n);
    rhs.iter_mut().for_each(|v| *v /= n);
    for a in 0..d {
        // constant columns standardize to zero; keep the system definite
        gram[a * d + a] += lambda.max(f64::EPSILON * 1e-3);
    }
    let weights = solve_spd(&gram, &rhs)?;
    Ok(RegressorModel {
        weights,
        intercept: y_mean,
        feature_means: means,
        feature_scales: scales,
        lambda,
        training: None,
    })
}

/// Fold id per row. Rows sharing a group id always share a fold; groups
/// (sorted by id) are shuffled with `seed` and dealt round-robin.
pub fn fold_assignment(n: usize, groups: Option<&[usize]>, folds: usize, seed: u64) -> Result<Vec<usize>> {
    let own: Vec<usize>;
    let groups = match groups {
        Some(g) if g.len() != n => {
            return Err(Error::RowCountMismatch {
                what: "group ids".into(),
                expected: n,
                found: g.len(),
            })
        }
        Some(g) => g,
        None => {
            own = (0..n).collect();
            &own
        }
    };
    let mut unique: Vec<usize> = groups.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if folds < 2 || unique.len() < folds {
        return Err(Error::InvalidArgument(format!(
            "{folds}-fold cross-validation needs at least {folds} samples (groups), got {}",
            unique.len()
        )));
    }
    unique.shuffle(&mut stream_rng(seed, 0));
    let mut fold_of_group = std::collections::HashMap::with_capacity(unique.len());
    for (pos, g) in unique.into_iter().enumerate() {
        fold_of_group.insert(g, pos % folds);
    }
    Ok(groups.iter().map(|g| fold_of_group[g]).collect())
}

/// Validation MSE for every grid value, grid order preserved.
pub fn cross_validate(
    rows: &[Vec<f64>],
    targets: &[f64],
    cv: &RidgeCv,
    groups: Option<&[usize]>,
) -> Result<Vec<LambdaScore>> {
    check_rows(rows, targets)?;
    if cv.lambda_grid.is_empty() {
        return Err(Error::Empty("lambda grid"));
    }
    let fold = fold_assignment(rows.len(), groups, cv.folds, cv.seed)?;
    cv.lambda_grid
        .iter()
        .map(|&lambda| {
            let mut total = 0.0;
            for f in 0..cv.folds {
                let (mut tr_x, mut tr_y, mut va) = (Vec::new(), Vec::new(), Vec::new());
                for i in 0..rows.len() {
                    if fold[i] == f {
                        va.push(i);
                    } else {
                        tr_x.push(rows[i].clone());
                        tr_y.push(targets[i]);
                    }
                }
                let model = fit_ridge(&tr_x, &tr_y, lambda)?;
                let mut sse = 0.0;
                for &i in &va {
                    sse += (model.predict_row(&rows[i])? - targets[i]).powi(2);
                }
                total += sse / va.len() as f64;
            }
            Ok(LambdaScore {
                lambda,
                mse: total / cv.folds as f64,
            })
        })
        .collect()
}

/// Picks the grid value with the lowest CV error (ties go to the larger
/// lambda) and refits on all rows.
pub fn train_regressor(
    rows: &[Vec<f64>],
    targets: &[f64],
    cv: &RidgeCv,
    groups: Option<&[usize]>,
) -> Result<RegressorModel> {
    let scores = cross_validate(rows, targets, cv, groups)?;
    let best = select_lambda(&scores);
    let mut model = fit_ridge(rows, targets, best)?;
    model.training = Some(TrainingInfo {
        samples: rows.len(),
        folds: cv.folds,
        seed: cv.seed,
        cv: scores,
    });
    Ok(model)
}

pub fn select_lambda(scores: &[LambdaScore]) -> f64 {
    let mut best = scores[0];
    for s in &scores[1..] {
        if s.mse < best.mse || (s.mse == best.mse && s.lambda > best.lambda) {
            best = *s;
        }
    }
    best.lambda
}

/// Embedding rows (as `f64`) for the labeled images.
pub fn label_features(dataset: &Dataset, labels: &LabelSet) -> Vec<Vec<f64>> {
    labels
        .labels
        .iter()
        .map(|l| dataset.embedding(l.image_index).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Subject index per labeled image, for subject-disjoint folds.
pub fn label_subject_groups(dataset: &Dataset, labels: &LabelSet) -> Vec<usize> {
    let subjects: Vec<&str> = dataset
        .records()
        .iter()
        .map(|r| r.subject_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    labels
        .labels
        .iter()
        .map(|l| {
            let s = dataset.record(l.image_index).subject_id.as_str();
            subjects.binary_search(&s).unwrap()
        })
        .collect()
}

pub fn predict_quality(model: &RegressorModel, dataset: &Dataset) -> Result<QualityScores> {
    if dataset.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: dataset.dim(),
        });
    }
    let values = dataset
        .embeddings()
        .iter_rows()
        .map(|row| {
            let x: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
            model.predict_row(&x)
        })
        .collect::<Result<Vec<_>>>()?;
    QualityScores::new(ESTIMATOR_NAME, values)
}
