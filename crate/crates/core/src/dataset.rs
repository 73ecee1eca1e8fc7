//! Embedding datasets: per-image metadata, the embedding matrix and optional
//! pre-last-layer activations.
//!
//! Metadata is a UTF-8 CSV with required `image_id` and `subject_id` columns.
//! Every other column is a categorical attribute (pose, ethnicity, age class,
//! ...). An empty cell means the image carries no label for that attribute.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fqbe::Matrix;

/// Rows whose norm is already this close to 1 are kept verbatim, so that
/// save/load of a normalized dataset is bit-exact.
const UNIT_NORM_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_id: String,
    pub subject_id: String,
    pub attributes: BTreeMap<String, String>,
}

impl SampleRecord {
    pub fn new(image_id: impl Into<String>, subject_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            subject_id: subject_id.into(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_attribute(mut self, name: impl Into<String>, label: impl Into<String>) -> Self {
        self.attributes.insert(name.into(), label.into());
        self
    }

    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }
}

/// Immutable after construction. Embedding rows are unit-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<SampleRecord>,
    attribute_names: Vec<String>,
    embeddings: Matrix,
    activations: Option<Matrix>,
}

impl Dataset {
    /// Validates alignment and L2-normalizes the embedding rows.
    pub fn new(
        records: Vec<SampleRecord>,
        mut embeddings: Matrix,
        activations: Option<Matrix>,
    ) -> Result<Self> {
        if embeddings.rows() != records.len() {
            return Err(Error::RowCountMismatch {
                what: "embedding matrix".into(),
                expected: records.len(),
                found: embeddings.rows(),
            });
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.image_id.is_empty() {
                return Err(Error::InvalidArgument("empty image_id".into()));
            }
            if r.subject_id.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "image `{}` has an empty subject_id",
                    r.image_id
                )));
            }
            if r.attributes.values().any(String::is_empty) {
                return Err(Error::InvalidArgument(format!(
                    "image `{}` has an empty attribute label",
                    r.image_id
                )));
            }
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::DuplicateId(r.image_id.clone()));
            }
        }
        if let Some(row) = embeddings.first_non_finite_row() {
            return Err(Error::NonFinite {
                what: "embeddings".into(),
                row,
            });
        }
        normalize_rows(&mut embeddings)?;
        if let Some(act) = &activations {
            if act.rows() != records.len() {
                return Err(Error::RowCountMismatch {
                    what: "activation matrix".into(),
                    expected: records.len(),
                    found: act.rows(),
                });
            }
            if let Some(row) = act.first_non_finite_row() {
                return Err(Error::NonFinite {
                    what: "activations".into(),
                    row,
                });
            }
        }
        let names: BTreeSet<&String> = records.iter().flat_map(|r| r.attributes.keys()).collect();
        let attribute_names = names.into_iter().cloned().collect();
        Ok(Self {
            records,
            attribute_names,
            embeddings,
            activations,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &SampleRecord {
        &self.records[i]
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embedding(&self, i: usize) -> &[f32] {
        self.embeddings.row(i)
    }

    pub fn activations(&self) -> Option<&Matrix> {
        self.activations.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Attribute column names, sorted.
    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn index_of(&self, image_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.image_id == image_id)
    }

    /// `image_id -> row` lookup table.
    pub fn id_index(&self) -> BTreeMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id.as_str(), i))
            .collect()
    }

    /// Per-image label for `attribute`; errors if any image lacks it.
    pub fn labels(&self, attribute: &str) -> Result<Vec<&str>> {
        self.records
            .iter()
            .map(|r| {
                r.attribute(attribute).ok_or_else(|| Error::MissingAttribute {
                    attribute: attribute.to_string(),
                    image_id: r.image_id.clone(),
                })
            })
            .collect()
    }

    /// Distinct labels of `attribute`, sorted.
    pub fn label_set(&self, attribute: &str) -> Result<Vec<String>> {
        let set: BTreeSet<&str> = self.labels(attribute)?.into_iter().collect();
        Ok(set.into_iter().map(str::to_string).collect())
    }

    /// Dataset restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        let activations = self.activations.as_ref().map(|a| a.select_rows(indices));
        Dataset::new(records, self.embeddings.select_rows(indices), activations)
    }

    pub fn with_activations(self, activations: Option<Matrix>) -> Result<Dataset> {
        Dataset::new(self.records, self.embeddings, activations)
    }
}

fn normalize_rows(m: &mut Matrix) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let norm = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm { row: i });
        }
        if (norm - 1.0).abs() <= UNIT_NORM_SLACK {
            continue;
        }
        for v in row.iter_mut() {
            *v = (f64::from(*v) / norm) as f32;
        }
    }
    Ok(())
}

/// Reads metadata CSV records in file order.
pub fn read_metadata(path: impl AsRef<Path>) -> Result<Vec<SampleRecord>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(path, &e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(path, &e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id_col), Some(subject_col)) = (find("image_id"), find("subject_id")) else {
        return Err(Error::format(
            path,
            "metadata header must contain image_id and subject_id columns",
        ));
    };
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::csv(path, &e))?;
        let line = row.position().map_or(0, |p| p.line());
        let mut rec = SampleRecord::new(&row[id_col], &row[subject_col]);
        if rec.image_id.is_empty() || rec.subject_id.is_empty() {
            return Err(Error::Csv {
                path: path.into(),
                line,
                message: "empty image_id or subject_id".into(),
            });
        }
        for (col, name) in headers.iter().enumerate() {
            if col == id_col || col == subject_col || row[col].is_empty() {
                continue;
            }
            rec.attributes.insert(name.to_string(), row[col].to_string());
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_metadata(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, &e))?;
    let mut header = vec!["image_id", "subject_id"];
    header.extend(dataset.attribute_names().iter().map(String::as_str));
    w.write_record(&header).map_err(|e| Error::csv(path, &e))?;
    for r in dataset.records() {
        let mut row = vec![r.image_id.as_str(), r.subject_id.as_str()];
        for name in dataset.attribute_names() {
            row.push(r.attribute(name).unwrap_or(""));
        }
        w.write_record(&row).map_err(|e| Error::csv(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(
    meta_path: impl AsRef<Path>,
    emb_path: impl AsRef<Path>,
    act_path: Option<&Path>,
) -> Result<Dataset> {
    let records = read_metadata(meta_path)?;
    let embeddings = Matrix::load(emb_path)?;
    let activations = act_path.map(Matrix::load).transpose()?;
    Dataset::new(records, embeddings, activations)
}

pub fn save_dataset(
    dataset: &Dataset,
    meta_path: impl AsRef<Path>,
    emb_path: impl AsRef<Path>,
    act_path: Option<&Path>,
) -> Result<()> {
    write_metadata(meta_path, dataset)?;
    dataset.embeddings().save(emb_path)?;
    if let (Some(p), Some(act)) = (act_path, dataset.activations()) {
        act.save(p)?;
    }
    Ok(())
}

/// Standard file names inside a data directory.
#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub const METADATA: &'static str = "metadata.csv";
    pub const EMBEDDINGS: &'static str = "embeddings.fqbe";
    pub const ACTIVATIONS: &'static str = "activations.fqbe";
    pub const LAYER: &'static str = "layer.fqbe";
    pub const LAYER_SIDECAR: &'static str = "layer.json";
    pub const TRUTH: &'static str = "truth.csv";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    /// Loads metadata and embeddings, plus activations when the file exists.
    pub fn load(&self) -> Result<Dataset> {
        let act = self.path(Self::ACTIVATIONS);
        let act = act.exists().then_some(act);
        load_dataset(
            self.path(Self::METADATA),
            self.path(Self::EMBEDDINGS),
            act.as_deref(),
        )
    }

    pub fn save(&self, dataset: &Dataset) -> Result<()> {
        self.create()?;
        save_dataset(
            dataset,
            self.path(Self::METADATA),
            self.path(Self::EMBEDDINGS),
            Some(&self.path(Self::ACTIVATIONS)),
        )
    }
}
