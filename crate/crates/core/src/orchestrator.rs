//! The generation loop: per-round parallel generation, per-backend and fused
//! model training, feedback selection, and the final weighted training.
//!
//! Each run directory holds one seed:
//!
//! ```text
//! config.toml  manifest.json  testset.jsonl
//! rounds/round_{j}/{plm_id}.jsonl   rounds/round_{j}/selection.json
//! merged.jsonl  weights/epoch_{e:03}.csv  cartography.csv  model.json  dynamics.json
//! report.json  report.txt
//! ```
//!
//! A round is recorded in the manifest only after all of its files are written,
//! so a rerun over the same directory resumes at the first unrecorded round.
//! Backend checkpoints written inside an unfinished round are reused.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{build_generator, MockWorld, TextGenerator};
use crate::cartography::{self, compute_cartography, export_plot_data};
use crate::config::{Mode, RunConfig};
use crate::dataset::{merge, Sample, SyntheticDataset, INITIAL_WEIGHT};
use crate::error::{Error, Result};
use crate::evalharness::{load_testset, TestSet};
use crate::manifest::{RoundRecord, RunManifest};
use crate::prompts::{CorpusSource, PromptTemplate};
use crate::selection::{select_feedback, CandidateStrategy, ProbabilityMatrix, SelectionPool, SelectionReport};
use crate::stm::{self, featurize_all, StmModel, TrainingConfig};
use crate::swa;

/// Feedback group name when all backends share one in-context set.
pub const SHARED_GROUP: &str = "shared";

/// Samples generated per backend in round `round` of `j_steps + 1`. The first
/// `n mod (j_steps + 1)` rounds carry one extra sample.
pub fn round_quota(n_per_plm: usize, j_steps: usize, round: usize) -> usize {
    let rounds = j_steps + 1;
    n_per_plm / rounds + usize::from(round < n_per_plm % rounds)
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn round_dir(&self, round: usize) -> PathBuf {
        self.root.join("rounds").join(format!("round_{round}"))
    }

    pub fn checkpoint(&self, round: usize, plm_id: &str) -> PathBuf {
        self.round_dir(round).join(format!("{plm_id}.jsonl"))
    }

    pub fn selection(&self, round: usize) -> PathBuf {
        self.round_dir(round).join("selection.json")
    }

    pub fn weights_dir(&self) -> PathBuf {
        self.root.join("weights")
    }

    pub fn weight_epoch(&self, epoch: usize) -> PathBuf {
        self.weights_dir().join(format!("epoch_{epoch:03}.csv"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwaSummary {
    pub beta: f64,
    pub sign_mode: String,
    pub epochs: usize,
    pub accuracy_trace: Vec<f64>,
    pub min_weight: f64,
    pub max_weight: f64,
    /// Mean final weight of samples per category of the final training dynamics.
    pub mean_weight_by_category: BTreeMap<String, f64>,
}

/// Outcome of one seed. Contains no timings or absolute paths, so identical
/// inputs give byte-identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub task: String,
    pub mode: Mode,
    pub seed: u64,
    pub config_digest: String,
    pub backends: Vec<String>,
    pub dataset_size: usize,
    pub class_histogram: Vec<usize>,
    pub duplicate_texts: usize,
    pub testset_size: usize,
    pub final_accuracy: f64,
    /// Accuracy of each backend's model trained on its own final data.
    pub per_plm_accuracy: Vec<(String, f64)>,
    pub rounds: Vec<RoundRecord>,
    pub swa: Option<SwaSummary>,
    pub cartography: BTreeMap<String, usize>,
}

impl SeedReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task {}  mode {}  seed {}", self.task, self.mode.as_str(), self.seed);
        let _ = writeln!(
            out,
            "synthetic samples {}  duplicates {}  test examples {}",
            self.dataset_size, self.duplicate_texts, self.testset_size
        );
        let mut header = String::from("round");
        for b in &self.backends {
            let _ = write!(header, "  {b:>10}");
        }
        let _ = write!(header, "  {:>10}", "fused");
        out.push_str(&header);
        out.push('\n');
        for r in &self.rounds {
            let _ = write!(out, "{:>5}", r.round_index);
            for b in &self.backends {
                match r.per_plm_accuracy.get(b) {
                    Some(a) => {
                        let _ = write!(out, "  {:>10.2}", a * 100.0);
                    }
                    None => {
                        let _ = write!(out, "  {:>10}", "-");
                    }
                }
            }
            match r.fused_accuracy {
                Some(a) => {
                    let _ = writeln!(out, "  {:>10.2}", a * 100.0);
                }
                None => {
                    let _ = writeln!(out, "  {:>10}", "-");
                }
            }
        }
        let _ = write!(out, "{:>5}", "final");
        for (_, a) in &self.per_plm_accuracy {
            let _ = write!(out, "  {:>10.2}", a * 100.0);
        }
        let _ = writeln!(out, "  {:>10.2}", self.final_accuracy * 100.0);
        if let Some(s) = &self.swa {
            let _ = writeln!(
                out,
                "weight adjustment: beta {:.6} ({}), {} iterations, weights in [{:.4}, {:.4}]",
                s.beta, s.sign_mode, s.epochs, s.min_weight, s.max_weight
            );
        }
        let cats: Vec<String> = self.cartography.iter().map(|(k, v)| format!("{k} {v}")).collect();
        let _ = writeln!(out, "cartography: {}", cats.join(", "));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseGenReport {
    pub task: String,
    pub mode: Mode,
    pub per_seed: Vec<SeedReport>,
    pub mean_final_accuracy: f64,
    pub mean_per_plm_accuracy: Vec<(String, f64)>,
}

impl FuseGenReport {
    pub fn from_seeds(per_seed: Vec<SeedReport>) -> Result<Self> {
        let first = per_seed
            .first()
            .ok_or_else(|| Error::InvalidInput("no seed reports to aggregate".into()))?;
        let n = per_seed.len() as f64;
        let mean_final_accuracy = per_seed.iter().map(|r| r.final_accuracy).sum::<f64>() / n;
        let mean_per_plm_accuracy = first
            .per_plm_accuracy
            .iter()
            .enumerate()
            .map(|(i, (id, _))| (id.clone(), per_seed.iter().map(|r| r.per_plm_accuracy[i].1).sum::<f64>() / n))
            .collect();
        Ok(FuseGenReport {
            task: first.task.clone(),
            mode: first.mode,
            mean_final_accuracy,
            mean_per_plm_accuracy,
            per_seed,
        })
    }
}

/// One seed of one configuration, bound to a run directory.
pub struct Orchestrator {
    config: RunConfig,
    seed: u64,
    paths: RunPaths,
    template: PromptTemplate,
    corpus: Option<CorpusSource>,
    generators: Vec<Arc<dyn TextGenerator>>,
    testset: TestSet,
    training: TrainingConfig,
    manifest: RunManifest,
    datasets: Vec<SyntheticDataset>,
    /// In-context samples per feedback group, in rank order.
    feedback: BTreeMap<String, Vec<Sample>>,
}

/// Models trained at the end of a round.
struct RoundModels {
    per_plm: Vec<StmModel>,
    fused: StmModel,
}

impl Orchestrator {
    /// Validates the configuration before touching the filesystem, then opens
    /// or resumes the run directory.
    pub fn new(config: &RunConfig, seed: u64, run_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut config = config.clone();
        config.seeds = vec![seed];
        let config = config.validated()?;
        let template = config.template()?;
        let paths = RunPaths::new(run_dir);
        let digest = config.digest();

        let manifest_path = paths.file("manifest.json");
        let manifest = if manifest_path.exists() {
            let existing = RunManifest::load(&manifest_path)?;
            if existing.config_digest != digest || existing.seed != seed {
                return Err(Error::Config(format!(
                    "{} belongs to a different configuration or seed; refusing to resume",
                    paths.root.display()
                )));
            }
            log::info!("resuming {} after {} recorded rounds", paths.root.display(), existing.rounds.len());
            existing
        } else {
            let run_id = paths
                .root
                .file_name()
                .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
            RunManifest::new(run_id, digest, seed, config.mode.as_str())
        };
        std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
        let snapshot = paths.file("config.toml");
        std::fs::write(&snapshot, config.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;

        let world = match &config.mock_world {
            Some(cfg) => Some(Arc::new(MockWorld::new(template.schema.clone(), cfg.clone())?)),
            None => None,
        };
        let generators = config
            .backends
            .iter()
            .map(|b| build_generator(b, world.as_ref(), seed))
            .collect::<Result<Vec<_>>>()?;
        let corpus = match &config.corpus_path {
            Some(path) if template.requires_context() => Some(CorpusSource::load(path, seed)?),
            _ => None,
        };
        let testset = match (&config.testset_path, &world) {
            (Some(path), _) => load_testset(path, &template.schema)?,
            (None, Some(world)) => {
                let heldout_seed = world.config().seed.wrapping_add(0x7e57);
                world.write_heldout(paths.file("testset.jsonl"), config.heldout_size, heldout_seed)?
            }
            (None, None) => return Err(Error::Config("no test set configured".into())),
        };
        if let Some(diff) = template.schema.difference(&testset.schema) {
            return Err(Error::SchemaMismatch(format!("test set differs from template in {diff}")));
        }
        let datasets = config
            .backends
            .iter()
            .map(|_| SyntheticDataset::new(template.schema.clone()))
            .collect();
        Ok(Orchestrator {
            training: config.training_config(seed),
            config,
            seed,
            paths,
            template,
            corpus,
            generators,
            testset,
            manifest,
            datasets,
            feedback: BTreeMap::new(),
        })
    }

    pub fn paths(&self) -> &RunPaths {
        &self.paths
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn datasets(&self) -> &[SyntheticDataset] {
        &self.datasets
    }

    pub fn testset(&self) -> &TestSet {
        &self.testset
    }

    fn plm_ids(&self) -> Vec<String> {
        self.config.backends.iter().map(|b| b.plm_id.clone()).collect()
    }

    fn group_of(&self, k: usize) -> String {
        if self.config.mode.uses_cross_model() {
            SHARED_GROUP.to_string()
        } else {
            self.config.backends[k].plm_id.clone()
        }
    }

    /// Runs every remaining round and the final training.
    pub fn run(mut self) -> Result<SeedReport> {
        let report_path = self.paths.file("report.json");
        if self.manifest.completed && report_path.exists() {
            let text = std::fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
            return Ok(serde_json::from_str(&text)?);
        }
        for round in 0..=self.config.effective_j() {
            if self.manifest.rounds.iter().any(|r| r.round_index == round) {
                self.restore_round(round)?;
            } else {
                self.run_round(round)?;
            }
        }
        self.finish()
    }

    fn restore_round(&mut self, round: usize) -> Result<()> {
        for k in 0..self.datasets.len() {
            let id = self.config.backends[k].plm_id.clone();
            let loaded = SyntheticDataset::load_jsonl(self.paths.checkpoint(round, &id), &self.template.schema)?;
            for sample in loaded.samples() {
                self.datasets[k].push(sample.clone())?;
            }
        }
        let path = self.paths.selection(round);
        let reports: Vec<SelectionReport> = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text)?
        } else {
            Vec::new()
        };
        let merged = merge(&self.datasets)?;
        self.feedback.clear();
        for report in reports {
            let samples = report
                .selected
                .iter()
                .map(|s| {
                    merged.get(&s.sample_id).cloned().ok_or_else(|| {
                        Error::Invariant(format!("selection of round {round} names unknown sample `{}`", s.sample_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            self.feedback.insert(report.group, samples);
        }
        Ok(())
    }

    /// Generates one round for backend `k`, or reloads its checkpoint.
    fn generate_for(&self, k: usize, round: usize) -> Result<(Vec<Sample>, Vec<String>)> {
        let backend = &self.config.backends[k];
        let plm = backend.plm_id.as_str();
        let quota = round_quota(self.config.n_per_plm, self.config.effective_j(), round);
        let checkpoint = self.paths.checkpoint(round, plm);
        if checkpoint.exists() {
            let loaded = SyntheticDataset::load_jsonl(&checkpoint, &self.template.schema)?;
            if loaded.len() == quota {
                return Ok((loaded.samples().to_vec(), vec![format!("{plm}: reused checkpoint of round {round}")]));
            }
        }

        let schema = &self.template.schema;
        let classes = schema.num_classes();
        let base = self.datasets[k].len();
        let incontext: Vec<&Sample> = self
            .feedback
            .get(&self.group_of(k))
            .map(|v| v.iter().collect())
            .unwrap_or_default();
        let generator = &self.generators[k];
        let mut warnings = Vec::new();
        let mut render = |label: usize, context: Option<&str>| -> Result<String> {
            let prompt = if round == 0 {
                self.template.render_zero_shot(label, context)?
            } else {
                self.template.render_few_shot(&incontext, label, context)?
            };
            warnings.extend(prompt.warnings.into_iter().map(|w| format!("{plm} round {round}: {w}")));
            Ok(prompt.text)
        };

        // Cumulative round robin keeps every backend's classes balanced.
        let labels: Vec<usize> = (0..quota).map(|o| (base + o) % classes).collect();
        let mut texts: Vec<Option<String>> = vec![None; quota];
        if self.template.requires_context() {
            let corpus = self
                .corpus
                .as_ref()
                .ok_or_else(|| Error::Config("template needs a context corpus".into()))?;
            let contexts = corpus.draw(round, k as u64, quota);
            for o in 0..quota {
                let prompt = render(labels[o], Some(&contexts[o]))?;
                let mut out = generator.generate(&prompt, 1, (base + o) as u64)?;
                texts[o] = out.pop();
            }
        } else {
            for class in 0..classes {
                let ordinals: Vec<usize> = (0..quota).filter(|&o| labels[o] == class).collect();
                let Some(&first) = ordinals.first() else { continue };
                let prompt = render(class, None)?;
                let out = generator.generate(&prompt, ordinals.len(), (base + first) as u64 * classes as u64)?;
                if out.len() != ordinals.len() {
                    return Err(Error::backend(
                        plm,
                        format!("asked for {} texts, received {}", ordinals.len(), out.len()),
                    ));
                }
                for (o, text) in ordinals.into_iter().zip(out) {
                    texts[o] = Some(text);
                }
            }
        }
        let samples = texts
            .into_iter()
            .enumerate()
            .map(|(o, t)| {
                let text = t.ok_or_else(|| Error::backend(plm, format!("no text for ordinal {o}")))?;
                Ok(Sample::new(plm, round, o, text, labels[o]))
            })
            .collect::<Result<Vec<_>>>()?;

        let dir = self.paths.round_dir(round);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        SyntheticDataset::from_samples(schema.clone(), samples.clone())?.save_jsonl(&checkpoint)?;
        Ok((samples, warnings))
    }

    fn train_round_models(&self, merged: &SyntheticDataset) -> Result<RoundModels> {
        let featurizer = &self.config.featurizer;
        let per_plm = std::thread::scope(|scope| {
            let handles: Vec<_> = self
                .datasets
                .iter()
                .map(|d| scope.spawn(move || stm::train(d, &d.weights(), &self.training, featurizer).map(|(m, _)| m)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        let fused = if per_plm.len() == 1 {
            per_plm[0].clone()
        } else {
            stm::train(merged, &merged.weights(), &self.training, featurizer)?.0
        };
        Ok(RoundModels { per_plm, fused })
    }

    fn select(&self, round: usize, merged: &SyntheticDataset, models: &RoundModels) -> Result<Vec<(Vec<Sample>, SelectionReport)>> {
        let config = self.config.selection_config();
        let featurizer = &self.config.featurizer;
        let pick = |pool_data: &SyntheticDataset, positions: Vec<usize>| -> Vec<Sample> {
            positions.into_iter().map(|i| pool_data.samples()[i].clone()).collect()
        };
        if self.config.mode.uses_cross_model() {
            let features = featurize_all(featurizer, &merged.texts());
            let labels = merged.labels();
            let scorers: Vec<&StmModel> = models.per_plm.iter().collect();
            let matrix = ProbabilityMatrix::from_models(&scorers, &features, &labels)?;
            let pool = SelectionPool {
                ids: merged.samples().iter().map(|s| s.sample_id.as_str()).collect(),
                features: features.iter().collect(),
                labels,
                weights: merged.weights(),
            };
            let (positions, report) = select_feedback::<ChaCha8Rng>(
                SHARED_GROUP,
                &pool,
                CandidateStrategy::Variability(&matrix),
                &matrix,
                &models.fused,
                &config,
            )?;
            return Ok(vec![(pick(merged, positions), report)]);
        }
        // Self-guided: each backend draws random candidates from its own data and
        // ranks them with its own model.
        self.datasets
            .iter()
            .enumerate()
            .map(|(k, data)| {
                let features = featurize_all(featurizer, &data.texts());
                let labels = data.labels();
                let model = &models.per_plm[k];
                let matrix = ProbabilityMatrix::from_models(&[model], &features, &labels)?;
                let pool = SelectionPool {
                    ids: data.samples().iter().map(|s| s.sample_id.as_str()).collect(),
                    features: features.iter().collect(),
                    labels,
                    weights: data.weights(),
                };
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed ^ ((round as u64) << 32) ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
                );
                let (positions, report) = select_feedback(
                    &self.group_of(k),
                    &pool,
                    CandidateStrategy::Random(&mut rng),
                    &matrix,
                    model,
                    &config,
                )?;
                Ok((pick(data, positions), report))
            })
            .collect()
    }

    fn run_round(&mut self, round: usize) -> Result<()> {
        log::info!("seed {} round {round}: generating", self.seed);
        let results: Vec<Result<(Vec<Sample>, Vec<String>)>> = std::thread::scope(|scope| {
            let this = &*self;
            let handles: Vec<_> = (0..this.generators.len())
                .map(|k| scope.spawn(move || this.generate_for(k, round)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("generation thread panicked")).collect()
        });
        let mut generated = Vec::with_capacity(results.len());
        let mut failures = Vec::new();
        for (k, result) in results.into_iter().enumerate() {
            match result {
                Ok(ok) => generated.push(ok),
                Err(e) => failures.push((k, e)),
            }
        }
        if let Some((k, error)) = failures.into_iter().next() {
            self.manifest.push_event(format!(
                "round {round}: backend `{}` failed: {error}",
                self.config.backends[k].plm_id
            ));
            self.manifest.save(self.paths.file("manifest.json"))?;
            return Err(error);
        }

        let mut per_plm_counts = BTreeMap::new();
        for (k, (samples, warnings)) in generated.into_iter().enumerate() {
            per_plm_counts.insert(self.config.backends[k].plm_id.clone(), samples.len());
            for sample in samples {
                self.datasets[k].push(sample)?;
            }
            for w in warnings {
                self.manifest.push_event(w);
            }
        }
        let merged = merge(&self.datasets)?;
        let models = self.train_round_models(&merged)?;
        let per_plm_accuracy: BTreeMap<String, f64> = self
            .plm_ids()
            .into_iter()
            .zip(&models.per_plm)
            .map(|(id, m)| stm::evaluate(m, &self.testset).map(|a| (id, a)))
            .collect::<Result<_>>()?;
        let fused_accuracy = stm::evaluate(&models.fused, &self.testset)?;

        let mut selected = BTreeMap::new();
        if self.config.effective_j() > 0 {
            let chosen = self.select(round, &merged, &models)?;
            let reports: Vec<&SelectionReport> = chosen.iter().map(|(_, r)| r).collect();
            let path = self.paths.selection(round);
            std::fs::write(&path, serde_json::to_string_pretty(&reports)?).map_err(|e| Error::io(&path, e))?;
            self.feedback.clear();
            for (samples, report) in chosen {
                for w in &report.warnings {
                    self.manifest.push_event(format!("round {round}: {w}"));
                }
                selected.insert(report.group.clone(), report.selected_ids());
                self.feedback.insert(report.group, samples);
            }
        }
        log::info!(
            "seed {} round {round}: fused accuracy {:.4}, |D| = {}",
            self.seed,
            fused_accuracy,
            merged.len()
        );
        self.manifest.push_round(RoundRecord {
            round_index: round,
            per_plm_counts,
            selected,
            fused_accuracy: Some(fused_accuracy),
            per_plm_accuracy,
            duplicate_texts: merged.duplicate_text_count(),
        })?;
        self.manifest.save(self.paths.file("manifest.json"))
    }

    fn finish(mut self) -> Result<SeedReport> {
        let merged = merge(&self.datasets)?;
        let featurizer = &self.config.featurizer;
        let features = featurize_all(featurizer, &merged.texts());
        let (model, dynamics, final_weights, swa_summary) = if self.config.mode.uses_swa() {
            let outcome =
                swa::swa_train_featurized(&merged, &features, &self.training, &self.config.swa_config(), featurizer)?;
            let dir = self.paths.weights_dir();
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (epoch, weights) in outcome.weight_trace.iter().enumerate() {
                write_weight_csv(&self.paths.weight_epoch(epoch), &merged, weights)?;
            }
            let w = &outcome.final_state.weights;
            let summary = SwaSummary {
                beta: outcome.beta,
                sign_mode: self.config.swa.sign_mode.as_str().to_string(),
                epochs: self.config.e1_weight_epochs,
                accuracy_trace: outcome.accuracy_trace.clone(),
                min_weight: w.iter().copied().fold(f64::INFINITY, f64::min),
                max_weight: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_weight_by_category: BTreeMap::new(),
            };
            (outcome.model, outcome.dynamics, outcome.final_state.weights, Some(summary))
        } else {
            let weights = vec![INITIAL_WEIGHT; merged.len()];
            let labels = merged.labels();
            let (model, dynamics) =
                stm::train_featurized(featurizer, merged.schema(), &features, &labels, &weights, &self.training)?;
            (model, dynamics, weights, None)
        };
        let final_accuracy = stm::evaluate(&model, &self.testset)?;

        let records = compute_cartography(&merged, &dynamics, &self.config.cartography)?;
        let histogram = export_plot_data(&records, self.paths.file("cartography.csv"))?;
        let swa_summary = swa_summary.map(|mut s| {
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for (record, w) in records.iter().zip(&final_weights) {
                let entry = sums.entry(record.category.as_str().to_string()).or_default();
                entry.0 += w;
                entry.1 += 1;
            }
            s.mean_weight_by_category = sums.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect();
            s
        });

        merged.with_weights(&final_weights)?.save_jsonl(self.paths.file("merged.jsonl"))?;
        model.save(self.paths.file("model.json"))?;
        let dynamics_path = self.paths.file("dynamics.json");
        std::fs::write(&dynamics_path, serde_json::to_string(&dynamics)?).map_err(|e| Error::io(&dynamics_path, e))?;

        let last = self
            .manifest
            .rounds
            .last()
            .ok_or_else(|| Error::Invariant("run finished without rounds".into()))?;
        let per_plm_accuracy = self
            .plm_ids()
            .into_iter()
            .map(|id| {
                let acc = last.per_plm_accuracy.get(&id).copied().unwrap_or(f64::NAN);
                (id, acc)
            })
            .collect();
        let report = SeedReport {
            task: self.template.task_name.clone(),
            mode: self.config.mode,
            seed: self.seed,
            config_digest: self.manifest.config_digest.clone(),
            backends: self.plm_ids(),
            dataset_size: merged.len(),
            class_histogram: merged.class_histogram(),
            duplicate_texts: merged.duplicate_text_count(),
            testset_size: self.testset.len(),
            final_accuracy,
            per_plm_accuracy,
            rounds: self.manifest.rounds.clone(),
            swa: swa_summary,
            cartography: histogram.clone(),
        };
        let json_path = self.paths.file("report.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json_path, e))?;
        let text_path = self.paths.file("report.txt");
        std::fs::write(&text_path, report.to_text()).map_err(|e| Error::io(&text_path, e))?;

        for g in &self.generators {
            self.manifest.request_counts.insert(g.plm_id().to_string(), g.request_count());
        }
        self.manifest.cartography_histogram = histogram;
        self.manifest.completed = true;
        self.manifest.save(self.paths.file("manifest.json"))?;
        log::info!(
            "seed {}: final accuracy {:.4} ({})",
            self.seed,
            final_accuracy,
            cartography::histogram(&records)
                .iter()
                .map(|(k, v)| format!("{k} {v}"))
                .collect::<Vec<_>>()
                .join(", ")
        );
        Ok(report)
    }
}

/// `sample_id,weight` rows with full-precision weights.
pub fn write_weight_csv(path: &Path, dataset: &SyntheticDataset, weights: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_path(path).map_err(Error::Csv)?;
    out.write_record(["sample_id", "weight"])?;
    for (sample, w) in dataset.samples().iter().zip(weights) {
        out.write_record([sample.sample_id.as_str(), &format!("{w:.17e}")])?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Directory name for one seed: `{task}_{mode}_{seed}{suffix}`.
pub fn run_dir_name(config: &RunConfig, seed: u64, suffix: &str) -> String {
    format!("{}_{}_{seed}{suffix}", config.task, config.mode.as_str())
}

/// Runs every configured seed under `root`, one directory per seed.
pub fn run_fusegen(config: &RunConfig, root: &Path, suffix: &str) -> Result<FuseGenReport> {
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(Error::ConfigList(problems));
    }
    let reports = config
        .seeds
        .iter()
        .map(|&seed| Orchestrator::new(config, seed, root.join(run_dir_name(config, seed, suffix)))?.run())
        .collect::<Result<Vec<_>>>()?;
    FuseGenReport::from_seeds(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_sums_to_budget() {
        for n in [1usize, 5, 10, 999, 1000] {
            for j in 0..6 {
                if n < j + 1 {
                    continue;
                }
                let q: Vec<usize> = (0..=j).map(|r| round_quota(n, j, r)).collect();
                assert_eq!(q.iter().sum::<usize>(), n);
                assert!(q.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
            }
        }
        assert_eq!(round_quota(1000, 4, 0), 200);
        assert_eq!(round_quota(7, 2, 0), 3);
        assert_eq!(round_quota(7, 2, 2), 2);
    }
}
