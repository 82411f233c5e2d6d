//! Self-boosting weight adjustment.
//!
//! Every sample starts at weight 0.5. Each of the `E₁` iterations trains a fresh
//! model under the current weights, rescales the weights of wrongly predicted
//! samples by a power of `β` and renormalizes so the weights sum to `0.5·|D|`.
//!
//! The printed update is `w ← w · β^(−error·(1−correct))`. With `β < 1` that
//! multiplier is above one, so wrong samples gain raw weight, while the method
//! description says they are down-weighted. [`SignMode::ProseIntent`] (default)
//! applies `β^(+error)` to wrong samples; [`SignMode::PaperLiteral`] applies the
//! formula exactly as printed.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{SyntheticDataset, INITIAL_WEIGHT};
use crate::error::{Error, Result};
use crate::stm::{self, Featurizer, SparseVector, StmModel, TrainingConfig, TrainingDynamics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    #[default]
    ProseIntent,
    PaperLiteral,
}

impl SignMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SignMode::ProseIntent => "prose_intent",
            SignMode::PaperLiteral => "paper_literal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwaConfig {
    pub epochs: usize,
    pub sign_mode: SignMode,
    pub beta: Option<f64>,
}

impl Default for SwaConfig {
    fn default() -> Self {
        SwaConfig {
            epochs: 30,
            sign_mode: SignMode::ProseIntent,
            beta: None,
        }
    }
}

impl SwaConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("swa epochs (e1_weight_epochs) must be at least 1".into());
        }
        if let Some(beta) = self.beta {
            if !(beta > 0.0 && beta < 1.0) {
                problems.push(format!("swa beta override must be in (0, 1), got {beta}"));
            }
        }
        problems
    }
}

/// `β = 1 / (1 + sqrt(2·ln(N·K) / E₁))`.
pub fn compute_beta(n: usize, k: usize, e1: usize) -> Result<f64> {
    let total = n
        .checked_mul(k)
        .ok_or_else(|| Error::InvalidInput("N·K overflows".into()))?;
    if total < 2 {
        return Err(Error::InvalidInput(format!("β needs N·K ≥ 2, got {total}")));
    }
    if e1 == 0 {
        return Err(Error::InvalidInput("β needs E₁ ≥ 1".into()));
    }
    Ok(1.0 / (1.0 + (2.0 * (total as f64).ln() / e1 as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub weights: Vec<f64>,
    pub epoch: usize,
    pub target_sum: f64,
}

impl WeightState {
    pub fn uniform(num_samples: usize) -> Self {
        WeightState {
            weights: vec![INITIAL_WEIGHT; num_samples],
            epoch: 0,
            target_sum: INITIAL_WEIGHT * num_samples as f64,
        }
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Rescales by one positive factor so the weights sum to `target`.
pub fn normalize(weights: &mut [f64], target: f64) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Numerical(format!("cannot normalize weights summing to {sum}")));
    }
    let factor = target / sum;
    weights.iter_mut().for_each(|w| *w *= factor);
    Ok(())
}

/// One boosting update from the model's label probabilities and correctness.
pub fn adjust_weights(
    state: &WeightState,
    beta: f64,
    label_probability: &[f64],
    correct: &[bool],
    mode: SignMode,
) -> Result<WeightState> {
    let n = state.weights.len();
    if label_probability.len() != n || correct.len() != n {
        return Err(Error::InvalidInput(format!(
            "predictions cover {} / {} samples, weights {n}",
            label_probability.len(),
            correct.len()
        )));
    }
    let sign = match mode {
        SignMode::ProseIntent => 1.0,
        SignMode::PaperLiteral => -1.0,
    };
    let mut weights: Vec<f64> = state
        .weights
        .iter()
        .zip(label_probability.iter().zip(correct))
        .map(|(&w, (&p, &ok))| {
            if ok {
                w
            } else {
                w * beta.powf(sign * (1.0 - p))
            }
        })
        .collect();
    normalize(&mut weights, state.target_sum)?;
    if let Some((i, w)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w >= 0.0) || !w.is_finite())
    {
        return Err(Error::Numerical(format!("weight {i} became {w}")));
    }
    Ok(WeightState {
        weights,
        epoch: state.epoch + 1,
        target_sum: state.target_sum,
    })
}

#[derive(Debug, Clone)]
pub struct SwaOutcome {
    /// Model trained in the last iteration, under `weight_trace[E₁ − 1]`.
    pub model: StmModel,
    pub final_state: WeightState,
    pub beta: f64,
    /// `weight_trace[e]` holds `w^(e)` for `e = 0..=E₁`.
    pub weight_trace: Vec<Vec<f64>>,
    /// Training-set accuracy of each iteration's model.
    pub accuracy_trace: Vec<f64>,
    pub epoch_durations: Vec<Duration>,
    /// Training dynamics of the last iteration's model.
    pub dynamics: TrainingDynamics,
}

pub fn swa_train(
    dataset: &SyntheticDataset,
    training: &TrainingConfig,
    config: &SwaConfig,
    featurizer: &Featurizer,
) -> Result<SwaOutcome> {
    let features = stm::featurize_all(featurizer, &dataset.texts());
    swa_train_featurized(dataset, &features, training, config, featurizer)
}

pub fn swa_train_featurized(
    dataset: &SyntheticDataset,
    features: &[SparseVector],
    training: &TrainingConfig,
    config: &SwaConfig,
    featurizer: &Featurizer,
) -> Result<SwaOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("weight adjustment on an empty dataset".into()));
    }
    if let Some(problem) = config.validate().into_iter().next() {
        return Err(Error::Config(problem));
    }
    let beta = match config.beta {
        Some(beta) => beta,
        None => compute_beta(dataset.len(), 1, config.epochs)?,
    };
    let labels = dataset.labels();
    let mut state = WeightState::uniform(dataset.len());
    let mut weight_trace = vec![state.weights.clone()];
    let mut accuracy_trace = Vec::with_capacity(config.epochs);
    let mut epoch_durations = Vec::with_capacity(config.epochs);
    let mut last = None;

    for e1 in 0..config.epochs {
        let started = Instant::now();
        let (model, dynamics) = stm::train_featurized(
            featurizer,
            dataset.schema(),
            features,
            &labels,
            &state.weights,
            training,
        )?;
        let final_p: Vec<f64> = dynamics
            .label_probability
            .iter()
            .map(|p| *p.last().expect("at least one epoch"))
            .collect();
        let final_ok: Vec<bool> = dynamics
            .correct
            .iter()
            .map(|c| *c.last().expect("at least one epoch"))
            .collect();
        state = adjust_weights(&state, beta, &final_p, &final_ok, config.sign_mode)?;
        epoch_durations.push(started.elapsed());

        let accuracy = final_ok.iter().filter(|&&c| c).count() as f64 / final_ok.len() as f64;
        log::debug!("swa iteration {e1}: training accuracy {accuracy:.4}");
        accuracy_trace.push(accuracy);
        weight_trace.push(state.weights.clone());
        last = Some((model, dynamics));
    }
    let (model, dynamics) = last.expect("at least one iteration");
    Ok(SwaOutcome {
        model,
        final_state: state,
        beta,
        weight_trace,
        accuracy_trace,
        epoch_durations,
        dynamics,
    })
}
