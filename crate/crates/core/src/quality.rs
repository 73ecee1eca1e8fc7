//! Per-image quality scores and the `image_id,score` CSV exchange format.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// One score per dataset image, in dataset order. Higher means more useful
/// for recognition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub estimator_name: String,
    pub values: Vec<f64>,
}

impl QualityScores {
    pub fn new(estimator_name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "quality scores".into(),
                row: i,
            });
        }
        Ok(Self {
            estimator_name: estimator_name.into(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_aligned(&self, dataset: &Dataset) -> Result<()> {
        if self.values.len() != dataset.len() {
            return Err(Error::RowCountMismatch {
                what: format!("quality scores `{}`", self.estimator_name),
                expected: dataset.len(),
                found: self.values.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    image_id: String,
    score: String,
}

/// Reads an `image_id,score` CSV and aligns it to dataset order.
pub fn load_quality_csv(
    path: impl AsRef<Path>,
    dataset: &Dataset,
    estimator_name: &str,
) -> Result<QualityScores> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, &e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, &e))?;
    if headers.iter().collect::<Vec<_>>() != ["image_id", "score"] {
        return Err(Error::format(path, "quality CSV header must be image_id,score"));
    }
    let index = dataset.id_index();
    let mut values: Vec<Option<f64>> = vec![None; dataset.len()];
    for row in rdr.records() {
        let row = row.map_err(|e| Error::csv(path, &e))?;
        let line = row.position().map_or(0, |p| p.line());
        let line_err = |message: String| Error::Csv {
            path: path.into(),
            line,
            message,
        };
        let (image_id, raw) = (&row[0], &row[1]);
        let score: f64 = raw.trim().parse().map_err(|_| {
            line_err(format!("unparsable score `{raw}` for image `{image_id}`"))
        })?;
        if !score.is_finite() {
            return Err(line_err(format!("non-finite score for `{image_id}`")));
        }
        let &i = index
            .get(image_id)
            .ok_or_else(|| Error::UnknownId(image_id.to_string()))?;
        if values[i].replace(score).is_some() {
            return Err(Error::DuplicateId(image_id.to_string()));
        }
    }
    let values = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::MissingId(dataset.record(i).image_id.clone())))
        .collect::<Result<Vec<_>>>()?;
    QualityScores::new(estimator_name, values)
}

pub fn write_quality_csv(
    path: impl AsRef<Path>,
    dataset: &Dataset,
    quality: &QualityScores,
) -> Result<()> {
    quality.check_aligned(dataset)?;
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
    w.write_record(["image_id", "score"])
        .map_err(|e| Error::csv(path, &e))?;
    for (r, v) in dataset.records().iter().zip(&quality.values) {
        w.write_record([r.image_id.as_str(), &v.to_string()])
            .map_err(|e| Error::csv(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `image_id -> score` map straight from the file, without alignment.
pub fn read_quality_map(path: impl AsRef<Path>) -> Result<HashMap<String, f64>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, &e))?;
    let mut out = HashMap::new();
    for row in rdr.deserialize::<ScoreRow>() {
        let row = row.map_err(|e| Error::csv(path, &e))?;
        let v = row
            .score
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("unparsable score `{}`", row.score)))?;
        out.insert(row.image_id, v);
    }
    Ok(out)
}
