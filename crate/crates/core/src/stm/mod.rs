//! Small task-specific model: hashed n-gram features and a linear softmax classifier.
//!
//! Training minimizes the weighted cross-entropy `Σ w_i · ℓ(m(x_i), y_i)` with
//! mini-batch gradient descent. Each step subtracts `η · Σ_{i∈B} w_i ∇ℓ_i`, so a
//! sample of weight zero never moves the parameters. Models start from zero and
//! the seed only drives the per-epoch shuffle.

mod featurizer;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelSchema, SyntheticDataset};
use crate::error::{Error, Result};
use crate::evalharness::TestSet;

pub use featurizer::{Featurizer, SparseVector};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplier on the bias step. The bias sees every sample at full scale
    /// while hashed n-gram features are sparse and norm-scaled, so an undamped
    /// bias random-walks and swamps the word weights.
    pub bias_lr_scale: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 3,
            learning_rate: 0.1,
            batch_size: 32,
            seed: 0,
            bias_lr_scale: 0.01,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("training epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.bias_lr_scale >= 0.0) || !self.bias_lr_scale.is_finite() {
            return Err(Error::Config(format!(
                "bias learning-rate scale must be nonnegative, got {}",
                self.bias_lr_scale
            )));
        }
        Ok(())
    }
}

/// End-of-epoch probability of each sample's own label and argmax correctness.
/// Indexed `[sample][epoch]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingDynamics {
    pub label_probability: Vec<Vec<f64>>,
    pub correct: Vec<Vec<bool>>,
}

impl TrainingDynamics {
    pub fn num_samples(&self) -> usize {
        self.label_probability.len()
    }

    pub fn num_epochs(&self) -> usize {
        self.label_probability.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StmModel {
    pub featurizer: Featurizer,
    pub schema: LabelSchema,
    /// Row-major `num_classes × featurizer.dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient of the cross-entropy at one sample w.r.t. `(W, b)`: the outer product
/// `(p − onehot(y)) ⊗ φ(x)` for `W` and `p − onehot(y)` for `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerGradient {
    pub residual: Vec<f64>,
    pub features: SparseVector,
}

impl LastLayerGradient {
    /// Inner product over all `(W, b)` coordinates.
    pub fn dot(&self, other: &LastLayerGradient) -> f64 {
        let residual_dot: f64 = self
            .residual
            .iter()
            .zip(&other.residual)
            .map(|(a, b)| a * b)
            .sum();
        residual_dot * (self.features.dot(&other.features) + 1.0)
    }

    pub fn is_zero(&self) -> bool {
        self.residual.iter().all(|&r| r == 0.0)
    }

    /// Dense `W` part, row-major, followed by the bias part.
    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let classes = self.residual.len();
        let mut out = vec![0.0; classes * dim + classes];
        for (c, &r) in self.residual.iter().enumerate() {
            for (f, x) in self.features.iter() {
                out[c * dim + f] = r * x;
            }
            out[classes * dim + c] = r;
        }
        out
    }
}

impl StmModel {
    pub fn zeros(featurizer: Featurizer, schema: LabelSchema) -> Self {
        let classes = schema.num_classes();
        StmModel {
            weights: vec![0.0; classes * featurizer.dim],
            bias: vec![0.0; classes],
            featurizer,
            schema,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, features: &SparseVector) -> Vec<f64> {
        let dim = self.featurizer.dim;
        self.bias
            .iter()
            .enumerate()
            .map(|(c, &b)| {
                let row = &self.weights[c * dim..(c + 1) * dim];
                b + features.iter().map(|(f, x)| row[f] * x).sum::<f64>()
            })
            .collect()
    }

    pub fn predict_features(&self, features: &SparseVector) -> Vec<f64> {
        softmax(&self.logits(features))
    }

    pub fn predict_proba(&self, text: &str) -> Vec<f64> {
        self.predict_features(&self.featurizer.featurize(text))
    }

    pub fn predict(&self, text: &str) -> usize {
        argmax(&self.predict_proba(text))
    }

    pub fn gradient_features(&self, features: &SparseVector, label: usize) -> LastLayerGradient {
        let mut residual = self.predict_features(features);
        residual[label] -= 1.0;
        LastLayerGradient {
            residual,
            features: features.clone(),
        }
    }

    pub fn last_layer_gradient(&self, text: &str, label: usize) -> LastLayerGradient {
        self.gradient_features(&self.featurizer.featurize(text), label)
    }

    /// Unweighted cross-entropy `−ln p[y]`.
    pub fn loss(&self, features: &SparseVector, label: usize) -> f64 {
        let logits = self.logits(features);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        log_norm - logits[label]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dim = self.featurizer.dim;
        let nonzero = self
            .weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, &w)| (i / dim, i % dim, w))
            .collect();
        let checkpoint = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            featurizer: self.featurizer.clone(),
            schema: self.schema.clone(),
            bias: self.bias.clone(),
            weights: nonzero,
        };
        let text = serde_json::to_string(&checkpoint)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)?;
        if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                checkpoint.format_version
            )));
        }
        let mut model = StmModel::zeros(checkpoint.featurizer, checkpoint.schema);
        if checkpoint.bias.len() != model.num_classes() {
            return Err(Error::InvalidInput("checkpoint bias length mismatch".into()));
        }
        model.bias = checkpoint.bias;
        let dim = model.featurizer.dim;
        for (c, f, w) in checkpoint.weights {
            if c >= model.num_classes() || f >= dim {
                return Err(Error::InvalidInput(format!("checkpoint entry ({c}, {f}) out of range")));
            }
            model.weights[c * dim + f] = w;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    featurizer: Featurizer,
    schema: LabelSchema,
    bias: Vec<f64>,
    weights: Vec<(usize, usize, f64)>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Batches of sample positions for every epoch, as produced by the seeded shuffle.
pub fn batch_schedule(num_samples: usize, config: &TrainingConfig) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.epochs)
        .map(|_| {
            let mut order: Vec<usize> = (0..num_samples).collect();
            order.shuffle(&mut rng);
            order
                .chunks(config.batch_size)
                .map(<[usize]>::to_vec)
                .collect()
        })
        .collect()
}

pub fn featurize_all(featurizer: &Featurizer, texts: &[&str]) -> Vec<SparseVector> {
    texts.iter().map(|t| featurizer.featurize(t)).collect()
}

/// Trains a fresh model on a dataset with explicit per-sample weights.
pub fn train(
    dataset: &SyntheticDataset,
    weights: &[f64],
    config: &TrainingConfig,
    featurizer: &Featurizer,
) -> Result<(StmModel, TrainingDynamics)> {
    let features = featurize_all(featurizer, &dataset.texts());
    train_featurized(
        featurizer,
        dataset.schema(),
        &features,
        &dataset.labels(),
        weights,
        config,
    )
}

pub fn train_featurized(
    featurizer: &Featurizer,
    schema: &LabelSchema,
    features: &[SparseVector],
    labels: &[usize],
    weights: &[f64],
    config: &TrainingConfig,
) -> Result<(StmModel, TrainingDynamics)> {
    config.validate()?;
    let schedule = batch_schedule(features.len(), config);
    train_with_schedule(featurizer, schema, features, labels, weights, config, &schedule)
}

/// Training core with a caller-supplied batch schedule (`[epoch][batch][position]`).
pub fn train_with_schedule(
    featurizer: &Featurizer,
    schema: &LabelSchema,
    features: &[SparseVector],
    labels: &[usize],
    weights: &[f64],
    config: &TrainingConfig,
    schedule: &[Vec<Vec<usize>>],
) -> Result<(StmModel, TrainingDynamics)> {
    if features.len() != labels.len() || features.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature vectors, {} labels, {} weights",
            features.len(),
            labels.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid sample weight {w}")));
    }
    if !weights.iter().any(|&w| w > 0.0) {
        return Err(Error::InvalidInput(
            "all sample weights are zero; the training objective is degenerate".into(),
        ));
    }
    let classes = schema.num_classes();
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!("label {y} outside {classes} classes")));
    }

    let mut model = StmModel::zeros(featurizer.clone(), schema.clone());
    let dim = featurizer.dim;
    let mut dynamics = TrainingDynamics {
        label_probability: vec![Vec::with_capacity(schedule.len()); features.len()],
        correct: vec![Vec::with_capacity(schedule.len()); features.len()],
    };

    let mut residuals: Vec<(usize, Vec<f64>)> = Vec::with_capacity(config.batch_size);
    for (epoch, batches) in schedule.iter().enumerate() {
        for batch in batches {
            residuals.clear();
            for &i in batch {
                if weights[i] == 0.0 {
                    continue;
                }
                let mut r = model.predict_features(&features[i]);
                r[labels[i]] -= 1.0;
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite prediction at sample {i} in epoch {epoch}"
                    )));
                }
                let step = config.learning_rate * weights[i];
                r.iter_mut().for_each(|v| *v *= step);
                residuals.push((i, r));
            }
            for (i, r) in &residuals {
                for (c, &rc) in r.iter().enumerate() {
                    let row = &mut model.weights[c * dim..(c + 1) * dim];
                    for (f, x) in features[*i].iter() {
                        row[f] -= rc * x;
                    }
                    model.bias[c] -= rc * config.bias_lr_scale;
                }
            }
        }

        let mut total_loss = 0.0;
        for (i, x) in features.iter().enumerate() {
            let p = model.predict_features(x);
            let py = p[labels[i]];
            total_loss -= weights[i] * py.max(f64::MIN_POSITIVE).ln();
            dynamics.label_probability[i].push(py);
            dynamics.correct[i].push(argmax(&p) == labels[i]);
        }
        if !total_loss.is_finite() {
            return Err(Error::Numerical(format!(
                "weighted loss is {total_loss} after epoch {epoch}"
            )));
        }
        log::debug!("epoch {epoch}: weighted loss {total_loss:.6}");
    }
    Ok((model, dynamics))
}

/// Fraction of argmax predictions equal to the gold labels.
pub fn evaluate(model: &StmModel, testset: &TestSet) -> Result<f64> {
    if let Some(diff) = model.schema.difference(&testset.schema) {
        return Err(Error::SchemaMismatch(format!("test set differs in {diff}")));
    }
    if testset.examples.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let correct = testset
        .examples
        .iter()
        .filter(|ex| model.predict(&ex.text) == ex.label)
        .count();
    Ok(correct as f64 / testset.examples.len() as f64)
}
