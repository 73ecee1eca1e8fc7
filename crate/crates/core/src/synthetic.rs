//! Synthetic embedding datasets with subgroup-dependent difficulty.
//!
//! Each subject gets a class-mean direction drawn uniformly on the unit
//! hypersphere. Each image is `normalize(mean + noise_scale * g)` with `g`
//! standard normal, so subgroups with a larger noise scale have weaker
//! genuine scores. The image's activation vector is `(1 + |noise|) * W e`
//! for the generated last layer `W` and embedding `e`: its magnitude, and
//! with it the dropout spread of the stochastic embeddings, grows with the
//! image's noise.
//!
//! Randomness: ChaCha8 seeded with `config.seed`; stream 0 drives the data,
//! stream 1 the last layer. Gaussians use Box-Muller.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DataDir, Dataset, SampleRecord};
use crate::error::{Error, Result};
use crate::fqbe::Matrix;
use crate::rng::{stream_rng, Gaussian};
use crate::serfiq::{Activation, LastLayer};

const DATA_STREAM: u64 = 0;
const LAYER_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub label: String,
    pub subjects: usize,
    pub images_per_subject: usize,
    pub noise_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dim: usize,
    pub activation_dim: usize,
    /// Metadata column that carries the subgroup label.
    #[serde(default = "default_attribute")]
    pub attribute: String,
    pub subgroups: Vec<SubgroupSpec>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_attribute() -> String {
    "subgroup".into()
}

fn default_seed() -> u64 {
    1
}

impl Default for SynthConfig {
    /// Two subgroups, 20 subjects x 4 images each, noise 0.1 vs 0.3.
    fn default() -> Self {
        let group = |label: &str, noise_scale| SubgroupSpec {
            label: label.into(),
            subjects: 20,
            images_per_subject: 4,
            noise_scale,
        };
        Self {
            dim: 32,
            activation_dim: 64,
            attribute: default_attribute(),
            subgroups: vec![group("clean", 0.1), group("noisy", 0.3)],
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 || self.activation_dim == 0 {
            return bad("dimensions must be at least 1".into());
        }
        if self.activation_dim < self.dim {
            return bad(format!(
                "activation_dim {} < dim {}: the last layer cannot have orthonormal columns",
                self.activation_dim, self.dim
            ));
        }
        if self.subgroups.is_empty() {
            return bad("at least one subgroup required".into());
        }
        if self.attribute.is_empty() {
            return bad("attribute name must be non-empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for g in &self.subgroups {
            if g.label.is_empty() || !seen.insert(g.label.as_str()) {
                return bad(format!("subgroup label `{}` empty or repeated", g.label));
            }
            if g.subjects == 0 || g.images_per_subject == 0 {
                return bad(format!("subgroup `{}` needs at least one subject and image", g.label));
            }
            if !(g.noise_scale >= 0.0 && g.noise_scale.is_finite()) {
                return bad(format!("subgroup `{}` has invalid noise scale {}", g.label, g.noise_scale));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn total_images(&self) -> usize {
        self.subgroups.iter().map(|g| g.subjects * g.images_per_subject).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// `|noise vector|` per image, dataset order.
    pub noise_magnitude: Vec<f64>,
    pub layer: LastLayer,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `H x D` weights with orthonormal columns (to f32 precision), identity
/// activation, no bias.
pub fn make_last_layer(config: &SynthConfig) -> Result<LastLayer> {
    config.validate()?;
    let (h, d) = (config.activation_dim, config.dim);
    let mut rng = stream_rng(config.seed, LAYER_STREAM);
    let mut g = Gaussian::new();
    let mut cols: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            let mut c = vec![0.0; h];
            g.fill(&mut rng, &mut c);
            c
        })
        .collect();
    // modified Gram-Schmidt, two passes
    for _ in 0..2 {
        for j in 0..d {
            for k in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let dot: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
                for (x, y) in rest[0].iter_mut().zip(&done[k]) {
                    *x -= dot * y;
                }
            }
            normalize(&mut cols[j]);
        }
    }
    let mut weights = vec![0.0; h * d];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            // f32-representable so the layer survives FQBE storage unchanged
            weights[i * d + j] = f64::from(*v as f32);
        }
    }
    LastLayer::new(h, d, weights, None, Activation::Identity)
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticData> {
    config.validate()?;
    let layer = make_last_layer(config)?;
    let (h, d) = (config.activation_dim, config.dim);
    let n = config.total_images();
    let mut rng = stream_rng(config.seed, DATA_STREAM);
    let mut gauss = Gaussian::new();

    let mut records = Vec::with_capacity(n);
    let mut emb = Vec::with_capacity(n * d);
    let mut act = Vec::with_capacity(n * h);
    let mut noise_magnitude = Vec::with_capacity(n);
    let mut mean = vec![0.0; d];
    let mut noise = vec![0.0; d];
    for group in &config.subgroups {
        for s in 0..group.subjects {
            let subject = format!("{}_s{:03}", group.label, s);
            gauss.fill(&mut rng, &mut mean);
            normalize(&mut mean);
            for k in 0..group.images_per_subject {
                gauss.fill(&mut rng, &mut noise);
                noise.iter_mut().for_each(|v| *v *= group.noise_scale);
                let magnitude = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut e: Vec<f64> = mean.iter().zip(&noise).map(|(m, z)| m + z).collect();
                normalize(&mut e);
                let gain = 1.0 + magnitude;
                for i in 0..h {
                    let wi = &layer.weights()[i * d..(i + 1) * d];
                    let proj: f64 = wi.iter().zip(&e).map(|(w, x)| w * x).sum();
                    act.push((gain * proj) as f32);
                }
                emb.extend(e.iter().map(|&v| v as f32));
                noise_magnitude.push(magnitude);
                records.push(
                    SampleRecord::new(format!("{subject}_i{k:02}"), subject.clone())
                        .with_attribute(config.attribute.clone(), group.label.clone()),
                );
            }
        }
    }
    let dataset = Dataset::new(records, Matrix::new(n, d, emb)?, Some(Matrix::new(n, h, act)?))?;
    Ok(SyntheticData {
        dataset,
        noise_magnitude,
        layer,
    })
}

impl SyntheticData {
    /// Writes the dataset, last layer and `truth.csv` (`image_id,noise_magnitude`).
    pub fn write(&self, dir: &DataDir) -> Result<()> {
        dir.save(&self.dataset)?;
        self.layer
            .save(dir.path(DataDir::LAYER), dir.path(DataDir::LAYER_SIDECAR))?;
        let path = dir.path(DataDir::TRUTH);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, &e))?;
        w.write_record(["image_id", "noise_magnitude"])
            .map_err(|e| Error::csv(&path, &e))?;
        for (r, m) in self.dataset.records().iter().zip(&self.noise_magnitude) {
            w.write_record([r.image_id.as_str(), &m.to_string()])
                .map_err(|e| Error::csv(&path, &e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::cosine_similarity;

    fn gram(layer: &LastLayer) -> Vec<f64> {
        let (h, d) = (layer.inputs(), layer.outputs());
        let mut out = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] = (0..h).map(|i| layer.weight(i, a) * layer.weight(i, b)).sum();
            }
        }
        out
    }

    fn cfg(dim: usize, h: usize, groups: &[(&str, usize, usize, f64)], seed: u64) -> SynthConfig {
        SynthConfig {
            dim,
            activation_dim: h,
            attribute: "subgroup".into(),
            subgroups: groups
                .iter()
                .map(|&(label, subjects, images_per_subject, noise_scale)| SubgroupSpec {
                    label: label.into(),
                    subjects,
                    images_per_subject,
                    noise_scale,
                })
                .collect(),
            seed,
        }
    }

    #[test]
    fn square_layer_is_orthogonal() {
        let l = make_last_layer(&cfg(4, 4, &[("a", 1, 1, 0.1)], 3)).unwrap();
        let g = gram(&l);
        for a in 0..4 {
            for b in 0..4 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((g[a * 4 + b] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn tall_layer_has_identity_gram() {
        let c = cfg(4, 8, &[("a", 1, 1, 0.1)], 11);
        let l = make_last_layer(&c).unwrap();
        let g = gram(&l);
        for a in 0..4 {
            for b in 0..4 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((g[a * 4 + b] - expect).abs() < 1e-6);
            }
        }
        assert_eq!(make_last_layer(&c).unwrap(), l);
    }

    #[test]
    fn narrow_layer_rejected() {
        assert!(matches!(
            make_last_layer(&cfg(8, 4, &[("a", 1, 1, 0.1)], 0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_noise_gives_perfect_genuine_scores() {
        let data = generate(&cfg(16, 16, &[("clean", 3, 3, 0.0), ("other", 2, 2, 0.5)], 5)).unwrap();
        let ds = &data.dataset;
        for i in 0..9 {
            for j in i + 1..9 {
                if ds.record(i).subject_id == ds.record(j).subject_id {
                    let s = cosine_similarity(ds.embedding(i), ds.embedding(j)).unwrap();
                    assert!((s - 1.0).abs() < 1e-6, "{s}");
                }
            }
        }
        assert!(data.noise_magnitude[..9].iter().all(|&m| m == 0.0));
    }

    #[test]
    fn noisy_variant_scores_lower_on_average() {
        let mut clean = 0.0;
        let mut noisy = 0.0;
        for seed in 0..100 {
            for (noise, acc) in [(0.0, &mut clean), (10.0, &mut noisy)] {
                let data = generate(&cfg(8, 8, &[("g", 1, 2, noise)], seed)).unwrap();
                *acc += cosine_similarity(data.dataset.embedding(0), data.dataset.embedding(1)).unwrap();
            }
        }
        assert!(noisy / 100.0 < clean / 100.0);
    }

    #[test]
    fn deterministic_and_well_formed() {
        let c = SynthConfig::default();
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.noise_magnitude, b.noise_magnitude);
        assert_eq!(a.dataset.len(), 160);
        assert_eq!(a.dataset.activations().unwrap().cols(), 64);
        assert_eq!(a.dataset.label_set("subgroup").unwrap(), vec!["clean", "noisy"]);
        let mut other = c.clone();
        other.seed = 43;
        assert_ne!(generate(&other).unwrap().dataset, a.dataset);
    }

    #[test]
    fn activation_magnitude_tracks_noise() {
        let data = generate(&SynthConfig::default()).unwrap();
        let acts = data.dataset.activations().unwrap();
        for (i, m) in data.noise_magnitude.iter().enumerate() {
            let norm = acts.row(i).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            assert!((norm - (1.0 + m)).abs() < 1e-4);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(cfg(4, 4, &[], 0).validate().is_err());
        assert!(cfg(4, 4, &[("a", 0, 1, 0.1)], 0).validate().is_err());
        assert!(cfg(4, 4, &[("a", 1, 1, -0.1)], 0).validate().is_err());
        assert!(cfg(4, 4, &[("a", 1, 1, 0.1), ("a", 1, 1, 0.2)], 0).validate().is_err());
    }

    #[test]
    fn written_files_reload() {
        let dir = tempfile::tempdir().unwrap();
        let dd = DataDir::new(dir.path());
        let data = generate(&cfg(4, 6, &[("a", 2, 2, 0.2), ("b", 2, 2, 0.4)], 2)).unwrap();
        data.write(&dd).unwrap();
        assert_eq!(dd.load().unwrap(), data.dataset);
        let layer = LastLayer::load(dd.path(DataDir::LAYER), dd.path(DataDir::LAYER_SIDECAR)).unwrap();
        assert_eq!((layer.inputs(), layer.outputs()), (6, 4));
        let truth = std::fs::read_to_string(dd.path(DataDir::TRUTH)).unwrap();
        assert!(truth.starts_with("image_id,noise_magnitude\n"));
        assert_eq!(truth.lines().count(), 9);
    }
}
