//! Label schema, samples and the synthetic dataset container.
//!
//! A [`SyntheticDataset`] keeps samples in insertion order together with a
//! provenance index (origin backend → sample positions). Per-backend datasets
//! are merged with [`merge`] and persisted one sample per JSONL line.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight assigned to every sample before any re-weighting.
pub const INITIAL_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub class_id: usize,
    pub class_key: String,
    /// Verbalization inserted into prompts, e.g. "positive".
    pub prompt_surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub task_name: String,
    pub classes: Vec<ClassLabel>,
}

impl LabelSchema {
    pub fn new(task_name: impl Into<String>, classes: Vec<ClassLabel>) -> Result<Self> {
        let schema = LabelSchema {
            task_name: task_name.into(),
            classes,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Builds a schema whose prompt surfaces equal the class keys.
    pub fn from_keys(task_name: impl Into<String>, keys: &[&str]) -> Result<Self> {
        let classes = keys
            .iter()
            .enumerate()
            .map(|(class_id, key)| ClassLabel {
                class_id,
                class_key: key.to_string(),
                prompt_surface: key.to_string(),
            })
            .collect();
        Self::new(task_name, classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config(format!(
                "task `{}` needs at least 2 classes, got {}",
                self.task_name,
                self.classes.len()
            )));
        }
        let mut seen = HashSet::new();
        for (expected, class) in self.classes.iter().enumerate() {
            if class.class_id != expected {
                return Err(Error::Config(format!(
                    "class ids must be contiguous from 0: position {expected} has id {}",
                    class.class_id
                )));
            }
            if !seen.insert(class.class_key.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate class key `{}`",
                    class.class_key
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_id(&self, key: &str) -> Option<usize> {
        self.classes
            .iter()
            .find(|c| c.class_key == key)
            .map(|c| c.class_id)
    }

    pub fn key(&self, class_id: usize) -> &str {
        &self.classes[class_id].class_key
    }

    pub fn surface(&self, class_id: usize) -> &str {
        &self.classes[class_id].prompt_surface
    }

    /// Describes the first difference between two schemas, if any.
    pub fn difference(&self, other: &LabelSchema) -> Option<String> {
        if self.task_name != other.task_name {
            return Some(format!(
                "task_name (`{}` vs `{}`)",
                self.task_name, other.task_name
            ));
        }
        if self.classes.len() != other.classes.len() {
            return Some(format!(
                "classes.len ({} vs {})",
                self.classes.len(),
                other.classes.len()
            ));
        }
        for (a, b) in self.classes.iter().zip(&other.classes) {
            if a.class_key != b.class_key {
                return Some(format!(
                    "classes[{}].class_key (`{}` vs `{}`)",
                    a.class_id, a.class_key, b.class_key
                ));
            }
            if a.prompt_surface != b.prompt_surface {
                return Some(format!(
                    "classes[{}].prompt_surface (`{}` vs `{}`)",
                    a.class_id, a.prompt_surface, b.prompt_surface
                ));
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub plm_id: String,
    pub round_index: usize,
    pub text: String,
    pub label: usize,
    pub weight: f64,
}

impl Sample {
    pub fn new(
        plm_id: &str,
        round_index: usize,
        ordinal: usize,
        text: impl Into<String>,
        label: usize,
    ) -> Self {
        Sample {
            sample_id: sample_id(plm_id, round_index, ordinal),
            plm_id: plm_id.to_string(),
            round_index,
            text: text.into(),
            label,
            weight: INITIAL_WEIGHT,
        }
    }
}

/// `{plm_id}:{round_index}:{ordinal}` with a zero-padded ordinal so that ids sort
/// in generation order.
pub fn sample_id(plm_id: &str, round_index: usize, ordinal: usize) -> String {
    format!("{plm_id}:{round_index}:{ordinal:06}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    schema: LabelSchema,
    samples: Vec<Sample>,
    ids: HashMap<String, usize>,
    provenance: Vec<(String, Vec<usize>)>,
}

impl SyntheticDataset {
    pub fn new(schema: LabelSchema) -> Self {
        SyntheticDataset {
            schema,
            samples: Vec::new(),
            ids: HashMap::new(),
            provenance: Vec::new(),
        }
    }

    pub fn from_samples(schema: LabelSchema, samples: Vec<Sample>) -> Result<Self> {
        let mut dataset = SyntheticDataset::new(schema);
        for sample in samples {
            dataset.push(sample)?;
        }
        Ok(dataset)
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.label >= self.schema.num_classes() {
            return Err(Error::InvalidInput(format!(
                "sample `{}` has label {} outside the {}-class schema",
                sample.sample_id,
                sample.label,
                self.schema.num_classes()
            )));
        }
        if !(sample.weight >= 0.0) || !sample.weight.is_finite() {
            return Err(Error::InvalidInput(format!(
                "sample `{}` has invalid weight {}",
                sample.sample_id, sample.weight
            )));
        }
        if self.ids.contains_key(&sample.sample_id) {
            return Err(Error::InvalidInput(format!(
                "duplicate sample_id `{}`",
                sample.sample_id
            )));
        }
        let position = self.samples.len();
        self.ids.insert(sample.sample_id.clone(), position);
        match self.provenance.iter_mut().find(|(id, _)| *id == sample.plm_id) {
            Some((_, positions)) => positions.push(position),
            None => self
                .provenance
                .push((sample.plm_id.clone(), vec![position])),
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Sample> {
        self.ids.get(sample_id).map(|&i| &self.samples[i])
    }

    pub fn position(&self, sample_id: &str) -> Option<usize> {
        self.ids.get(sample_id).copied()
    }

    /// Origin backends in order of first appearance, with their sample positions.
    pub fn provenance(&self) -> &[(String, Vec<usize>)] {
        &self.provenance
    }

    pub fn texts(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.weight).collect()
    }

    /// Copy of this dataset with weights replaced.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.samples.len() {
            return Err(Error::InvalidInput(format!(
                "{} weights for {} samples",
                weights.len(),
                self.samples.len()
            )));
        }
        let mut out = self.clone();
        for (sample, &w) in out.samples.iter_mut().zip(weights) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "invalid weight {w} for `{}`",
                    sample.sample_id
                )));
            }
            sample.weight = w;
        }
        Ok(out)
    }

    /// Splits the dataset into one dataset per origin backend, in provenance order.
    pub fn partition_by_plm(&self) -> Vec<SyntheticDataset> {
        self.provenance
            .iter()
            .map(|(_, positions)| {
                let samples = positions.iter().map(|&i| self.samples[i].clone()).collect();
                SyntheticDataset::from_samples(self.schema.clone(), samples)
                    .expect("partition of a valid dataset is valid")
            })
            .collect()
    }

    /// Number of texts that occur more than once.
    pub fn duplicate_text_count(&self) -> usize {
        let mut seen = HashSet::new();
        self.samples
            .iter()
            .filter(|s| !seen.insert(s.text.as_str()))
            .count()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for sample in &self.samples {
            let record = SampleRecord {
                sample_id: sample.sample_id.clone(),
                plm_id: sample.plm_id.clone(),
                round_index: sample.round_index,
                text: sample.text.clone(),
                label_key: self.schema.key(sample.label).to_string(),
                weight: Some(sample.weight),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dataset = SyntheticDataset::new(schema.clone());
        for (index, line) in BufReader::new(file).lines().enumerate() {
            let line_no = index + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_error = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: line_no,
                message,
            };
            let record: SampleRecord =
                serde_json::from_str(&line).map_err(|e| parse_error(e.to_string()))?;
            let label = schema.class_id(&record.label_key).ok_or_else(|| {
                parse_error(format!(
                    "unknown class_key `{}` for task `{}`",
                    record.label_key, schema.task_name
                ))
            })?;
            dataset
                .push(Sample {
                    sample_id: record.sample_id,
                    plm_id: record.plm_id,
                    round_index: record.round_index,
                    text: record.text,
                    label,
                    weight: record.weight.unwrap_or(INITIAL_WEIGHT),
                })
                .map_err(|e| parse_error(e.to_string()))?;
        }
        Ok(dataset)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    sample_id: String,
    plm_id: String,
    round_index: usize,
    text: String,
    label_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
}

/// Concatenates datasets in argument order. All inputs must share one schema.
pub fn merge(datasets: &[SyntheticDataset]) -> Result<SyntheticDataset> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::InvalidInput("merge of an empty dataset list".into()))?;
    for (i, other) in datasets.iter().enumerate().skip(1) {
        if let Some(diff) = first.schema.difference(&other.schema) {
            return Err(Error::SchemaMismatch(format!("dataset {i} differs in {diff}")));
        }
    }
    let mut merged = SyntheticDataset::new(first.schema.clone());
    for dataset in datasets {
        for sample in &dataset.samples {
            merged.push(sample.clone())?;
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> LabelSchema {
        LabelSchema::from_keys("movie", &["positive", "negative"]).unwrap()
    }

    fn dataset(plm: &str, n: usize) -> SyntheticDataset {
        let samples = (0..n)
            .map(|i| Sample::new(plm, 0, i, format!("text {plm} {i}"), i % 2))
            .collect();
        SyntheticDataset::from_samples(schema(), samples).unwrap()
    }

    #[test]
    fn merge_adds_cardinalities() {
        let merged = merge(&[dataset("a", 3), dataset("b", 2)]).unwrap();
        assert_eq!(merged.len(), 5);
        assert_eq!(merged.provenance().len(), 2);
        assert_eq!(merged.provenance()[1].1, vec![3, 4]);
        assert_eq!(merged.samples()[3].sample_id, "b:0:000000");
    }

    #[test]
    fn merge_of_nothing_is_rejected() {
        assert!(matches!(merge(&[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn merge_names_the_differing_schema_field() {
        let other = LabelSchema::from_keys("movie", &["positive", "neutral"]).unwrap();
        let b = SyntheticDataset::new(other);
        let err = merge(&[dataset("a", 1), b]).unwrap_err().to_string();
        assert!(err.contains("classes[1].class_key"), "{err}");
    }

    #[test]
    fn merge_of_six_backends_of_a_thousand() {
        let parts: Vec<_> = (0..6).map(|k| dataset(&format!("plm{k}"), 1000)).collect();
        let merged = merge(&parts).unwrap();
        assert_eq!(merged.len(), 6000);
        assert_eq!(merged.provenance().len(), 6);
        assert!(merged.provenance().iter().all(|(_, p)| p.len() == 1000));
        assert_eq!(merged.partition_by_plm(), parts);
    }

    #[test]
    fn schema_rules() {
        assert!(LabelSchema::from_keys("t", &["only"]).is_err());
        assert!(LabelSchema::from_keys("t", &["a", "a"]).is_err());
        let mut classes = schema().classes;
        classes[1].class_id = 2;
        assert!(LabelSchema::new("t", classes).is_err());
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = dataset("a", 100);
        let weights: Vec<f64> = (0..100).map(|i| 0.1 + i as f64 / 7.0).collect();
        d = d.with_weights(&weights).unwrap();
        let p1 = dir.path().join("one.jsonl");
        let p2 = dir.path().join("two.jsonl");
        d.save_jsonl(&p1).unwrap();
        let loaded = SyntheticDataset::load_jsonl(&p1, &schema()).unwrap();
        assert_eq!(loaded, d);
        loaded.save_jsonl(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn jsonl_rejections_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let line = |id: &str, key: &str| {
            format!(r#"{{"sample_id":"{id}","plm_id":"a","round_index":0,"text":"t","label_key":"{key}"}}"#)
        };

        std::fs::write(&path, format!("{}\n", line("x", "negative"))).unwrap();
        let d = SyntheticDataset::load_jsonl(&path, &schema()).unwrap();
        assert_eq!(d.samples()[0].weight, INITIAL_WEIGHT);

        std::fs::write(&path, format!("{}\n{}\n", line("x", "positive"), line("x", "negative"))).unwrap();
        let err = SyntheticDataset::load_jsonl(&path, &schema()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        std::fs::write(&path, format!("{}\n", line("x", "neutral"))).unwrap();
        let err = SyntheticDataset::load_jsonl(&path, &schema()).unwrap_err();
        assert!(err.to_string().contains("unknown class_key"));

        std::fs::write(&path, format!("{}\n{{not json\n", line("x", "positive"))).unwrap();
        let err = SyntheticDataset::load_jsonl(&path, &schema()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn duplicate_texts_are_counted_not_removed() {
        let samples = vec![
            Sample::new("a", 0, 0, "same", 0),
            Sample::new("a", 0, 1, "same", 1),
            Sample::new("a", 0, 2, "other", 0),
        ];
        let d = SyntheticDataset::from_samples(schema(), samples).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.duplicate_text_count(), 1);
    }
}
