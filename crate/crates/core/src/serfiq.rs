//! Stochastic-embedding-robustness quality.
//!
//! An image's pre-last-layer activation vector is pushed through the last
//! layer `m` times, each time under a fresh dropout mask on the layer input.
//! The quality is `2 * sigmoid(-(2 / m^2) * sum_{i<j} ||x_i - x_j||)`: tight
//! clusters of stochastic embeddings score close to 1, spread-out ones
//! approach 0.
//!
//! Mask draw order is fixed: for each of the `m` passes, one `f64` uniform
//! per input unit in unit order; the unit is kept when `u < 1 - rate`. Kept
//! units are scaled by `1 / (1 - rate)`.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fqbe::Matrix;
use crate::quality::QualityScores;
use crate::rng::{keyed_stream, stream_rng, StreamRng};

pub const ESTIMATOR_NAME: &str = "serfiq";
pub const DEFAULT_PASSES: usize = 100;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Dense `H x D` layer, `x = act(W^T a + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayer {
    inputs: usize,
    outputs: usize,
    /// Row-major `inputs x outputs`.
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
    activation: Activation,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerSidecar {
    activation: Activation,
    bias: Option<Vec<f64>>,
}

impl LastLayer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
        activation: Activation,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::InvalidArgument("layer dimensions must be at least 1".into()));
        }
        if weights.len() != inputs * outputs {
            return Err(Error::DimensionMismatch {
                expected: inputs * outputs,
                found: weights.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != outputs {
                return Err(Error::DimensionMismatch {
                    expected: outputs,
                    found: b.len(),
                });
            }
        }
        let all = weights.iter().chain(bias.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "layer parameters".into(),
                row: 0,
            });
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        })
    }

    pub fn from_matrix(weights: &Matrix, bias: Option<Vec<f64>>, activation: Activation) -> Result<Self> {
        let w = weights.as_slice().iter().map(|&v| f64::from(v)).collect();
        Self::new(weights.rows(), weights.cols(), w, bias, activation)
    }

    /// `H`
    pub fn inputs(&self) -> usize {
        self.inputs
    }

    /// `D`
    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weight(&self, input: usize, output: usize) -> f64 {
        self.weights[input * self.outputs + output]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Forward pass with every unit kept.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut out = vec![0.0; self.outputs];
        self.accumulate(input, |_| Some(1.0), &mut out);
        Ok(out)
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.inputs {
            return Err(Error::DimensionMismatch {
                expected: self.inputs,
                found: input.len(),
            });
        }
        Ok(())
    }

    /// `out = act(sum_h W[h] * input[h] * gate(h) + bias)`; `None` drops the unit.
    fn accumulate(&self, input: &[f64], gate: impl Fn(usize) -> Option<f64>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (h, &a) in input.iter().enumerate() {
            let Some(g) = gate(h) else { continue };
            let coeff = a * g;
            if coeff == 0.0 {
                continue;
            }
            let row = &self.weights[h * self.outputs..(h + 1) * self.outputs];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * coeff;
            }
        }
        for (d, o) in out.iter_mut().enumerate() {
            let b = self.bias.as_ref().map_or(0.0, |b| b[d]);
            *o = self.activation.apply(*o + b);
        }
    }

    /// Writes weights as FQBE (`f32`) and bias/activation to a JSON sidecar.
    pub fn save(&self, weights_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
        let data = self.weights.iter().map(|&v| v as f32).collect();
        Matrix::new(self.inputs, self.outputs, data)?.save(weights_path)?;
        let sidecar = LayerSidecar {
            activation: self.activation,
            bias: self.bias.clone(),
        };
        let path = sidecar_path.as_ref();
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(path, &e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Missing sidecar means identity activation and no bias.
    pub fn load(weights_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<Self> {
        let weights = Matrix::load(weights_path)?;
        let path = sidecar_path.as_ref();
        let sidecar = if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(path, &e))?
        } else {
            LayerSidecar {
                activation: Activation::Identity,
                bias: None,
            }
        };
        Self::from_matrix(&weights, sidecar.bias, sidecar.activation)
    }
}

/// `m` stochastic embeddings of one image, row-major `m x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticEmbeddingSet {
    dim: usize,
    values: Vec<f64>,
}

impl StochasticEmbeddingSet {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidArgument("need at least two stochastic embeddings".into()));
        }
        let dim = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Ok(Self { dim, values })
    }

    pub fn m(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.values.len() / self.dim
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Scales every row to unit length; zero rows stay zero.
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for row in out.values.chunks_mut(self.dim.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SerfiqConfig {
    /// Number of dropout passes.
    pub m: usize,
    pub dropout_rate: f64,
    /// L2-normalize stochastic embeddings before measuring distances.
    pub normalize: bool,
}

impl Default for SerfiqConfig {
    fn default() -> Self {
        Self {
            m: DEFAULT_PASSES,
            dropout_rate: DEFAULT_DROPOUT_RATE,
            normalize: false,
        }
    }
}

impl SerfiqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidArgument(format!("m must be at least 2, got {}", self.m)));
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in (0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Stochastic embeddings drawn from stream `(seed, 0)`.
pub fn stochastic_embeddings(
    activation: &[f64],
    layer: &LastLayer,
    m: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<StochasticEmbeddingSet> {
    stochastic_embeddings_with(activation, layer, m, dropout_rate, &mut stream_rng(seed, 0))
}

pub fn stochastic_embeddings_with(
    activation: &[f64],
    layer: &LastLayer,
    m: usize,
    dropout_rate: f64,
    rng: &mut StreamRng,
) -> Result<StochasticEmbeddingSet> {
    SerfiqConfig {
        m,
        dropout_rate,
        normalize: false,
    }
    .validate()?;
    layer.check_input(activation)?;
    let keep = 1.0 - dropout_rate;
    let scale = 1.0 / keep;
    let mut values = vec![0.0; m * layer.outputs];
    let mut mask = vec![false; layer.inputs];
    for out in values.chunks_mut(layer.outputs) {
        for k in mask.iter_mut() {
            *k = rng.random::<f64>() < keep;
        }
        layer.accumulate(activation, |h| mask[h].then_some(scale), out);
    }
    Ok(StochasticEmbeddingSet {
        dim: layer.outputs,
        values,
    })
}

/// `1 / (1 + e^-t)` without overflow for large `|t|`.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn serfiq_quality(set: &StochasticEmbeddingSet) -> Result<f64> {
    let m = set.m();
    if m < 2 {
        return Err(Error::InvalidArgument("need at least two stochastic embeddings".into()));
    }
    if set.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "stochastic embeddings".into(),
            row: 0,
        });
    }
    let mut total = 0.0;
    for i in 0..m {
        let xi = set.row(i);
        for j in i + 1..m {
            let d2: f64 = xi.iter().zip(set.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            total += d2.sqrt();
        }
    }
    let mf = m as f64;
    // floor keeps the score strictly positive once the sigmoid underflows
    Ok((2.0 * sigmoid(-(2.0 / (mf * mf)) * total)).max(f64::MIN_POSITIVE))
}

/// Quality for every image. Image `k` draws masks from stream
/// `(seed, fnv1a(image_id))`, so scores do not depend on row order.
pub fn serfiq_dataset(
    dataset: &Dataset,
    layer: &LastLayer,
    config: &SerfiqConfig,
    seed: u64,
) -> Result<QualityScores> {
    config.validate()?;
    let acts = dataset.activations().ok_or(Error::MissingActivations)?;
    if acts.cols() != layer.inputs() {
        return Err(Error::DimensionMismatch {
            expected: layer.inputs(),
            found: acts.cols(),
        });
    }
    let values = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let a: Vec<f64> = acts.row(i).iter().map(|&v| f64::from(v)).collect();
            let mut rng = stream_rng(seed, keyed_stream(&dataset.record(i).image_id));
            let set = stochastic_embeddings_with(&a, layer, config.m, config.dropout_rate, &mut rng)?;
            let set = if config.normalize { set.normalized() } else { set };
            serfiq_quality(&set)
        })
        .collect::<Result<Vec<_>>>()?;
    QualityScores::new(ESTIMATOR_NAME, values)
}
