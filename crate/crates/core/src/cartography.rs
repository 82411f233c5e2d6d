//! Dataset cartography from per-epoch training dynamics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticDataset;
use crate::error::{Error, Result};
use crate::stm::TrainingDynamics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    EasyToLearn,
    Ambiguous,
    HardToLearn,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::EasyToLearn => "easy_to_learn",
            Category::Ambiguous => "ambiguous",
            Category::HardToLearn => "hard_to_learn",
        }
    }
}

/// Category thresholds. Not canonical; chosen so a well-separated task is mostly easy-to-learn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub variability: f64,
    pub confidence: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            variability: 0.15,
            confidence: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartographyRecord {
    pub sample_id: String,
    pub plm_id: String,
    pub confidence: f64,
    pub variability: f64,
    pub correctness: f64,
    pub category: Category,
}

/// Mean and population standard deviation of a sequence.
pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn categorize(confidence: f64, variability: f64, thresholds: &Thresholds) -> Category {
    if variability >= thresholds.variability {
        Category::Ambiguous
    } else if confidence >= thresholds.confidence {
        Category::EasyToLearn
    } else {
        Category::HardToLearn
    }
}

/// One record per sample, in dataset order.
pub fn compute_cartography(
    dataset: &SyntheticDataset,
    dynamics: &TrainingDynamics,
    thresholds: &Thresholds,
) -> Result<Vec<CartographyRecord>> {
    if dynamics.num_samples() != dataset.len() {
        return Err(Error::InvalidInput(format!(
            "dynamics cover {} samples, dataset has {}",
            dynamics.num_samples(),
            dataset.len()
        )));
    }
    if dynamics.num_epochs() < 2 {
        return Err(Error::InvalidInput(format!(
            "cartography needs at least 2 epochs of dynamics, got {}",
            dynamics.num_epochs()
        )));
    }
    dataset
        .samples()
        .iter()
        .zip(dynamics.label_probability.iter().zip(&dynamics.correct))
        .map(|(sample, (probs, correct))| {
            if probs.len() != dynamics.num_epochs() || correct.len() != probs.len() {
                return Err(Error::InvalidInput(format!(
                    "ragged dynamics for `{}`",
                    sample.sample_id
                )));
            }
            let (confidence, variability) = mean_and_std(probs);
            let correctness = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
            Ok(CartographyRecord {
                sample_id: sample.sample_id.clone(),
                plm_id: sample.plm_id.clone(),
                confidence,
                variability,
                correctness,
                category: categorize(confidence, variability, thresholds),
            })
        })
        .collect()
}

pub fn histogram(records: &[CartographyRecord]) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = [Category::EasyToLearn, Category::Ambiguous, Category::HardToLearn]
        .iter()
        .map(|c| (c.as_str().to_string(), 0))
        .collect();
    for r in records {
        *counts.get_mut(r.category.as_str()).unwrap() += 1;
    }
    counts
}

pub fn fraction(records: &[CartographyRecord], category: Category) -> f64 {
    records.iter().filter(|r| r.category == category).count() as f64 / records.len() as f64
}

/// Writes one CSV row per record and returns the category histogram.
pub fn export_plot_data(records: &[CartographyRecord], path: impl AsRef<Path>) -> Result<BTreeMap<String, usize>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no cartography records to export".into()));
    }
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["sample_id", "plm_id", "confidence", "variability", "correctness", "category"])?;
    for r in records {
        writer.write_record([
            r.sample_id.as_str(),
            r.plm_id.as_str(),
            &r.confidence.to_string(),
            &r.variability.to_string(),
            &r.correctness.to_string(),
            r.category.as_str(),
        ])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(histogram(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabelSchema, Sample};

    fn one_sample(probs: Vec<f64>) -> (SyntheticDataset, TrainingDynamics) {
        let schema = LabelSchema::from_keys("t", &["a", "b"]).unwrap();
        let d = SyntheticDataset::from_samples(schema, vec![Sample::new("p", 0, 0, "x", 0)]).unwrap();
        let correct = probs.iter().map(|&p| p > 0.5).collect();
        (
            d,
            TrainingDynamics {
                label_probability: vec![probs],
                correct: vec![correct],
            },
        )
    }

    #[test]
    fn worked_examples() {
        let (d, dy) = one_sample(vec![0.9, 0.95, 1.0]);
        let r = &compute_cartography(&d, &dy, &Thresholds::default()).unwrap()[0];
        assert!((r.confidence - 0.95).abs() < 1e-9);
        assert!((r.variability - 0.040825).abs() < 1e-6);
        assert_eq!(r.category, Category::EasyToLearn);
        assert_eq!(r.correctness, 1.0);

        let (d, dy) = one_sample(vec![0.5; 4]);
        let r = &compute_cartography(&d, &dy, &Thresholds::default()).unwrap()[0];
        assert_eq!(r.variability, 0.0);

        let (d, dy) = one_sample(vec![0.0, 1.0, 0.0, 1.0]);
        let r = &compute_cartography(&d, &dy, &Thresholds::default()).unwrap()[0];
        assert_eq!((r.confidence, r.variability), (0.5, 0.5));
        assert_eq!(r.category, Category::Ambiguous);
    }

    #[test]
    fn single_epoch_is_rejected() {
        let (d, dy) = one_sample(vec![0.7]);
        assert!(compute_cartography(&d, &dy, &Thresholds::default()).is_err());
    }

    #[test]
    fn low_confidence_low_variability_is_hard() {
        assert_eq!(categorize(0.2, 0.05, &Thresholds::default()), Category::HardToLearn);
    }

    #[test]
    fn empty_export_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_plot_data(&[], dir.path().join("c.csv")).is_err());
    }
}
