//! Run configuration: TOML file, `key=value` overrides, validation and digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{resolve_credentials, BackendDescriptor, BackendKind, MockWorldConfig};
use crate::cartography::Thresholds;
use crate::error::{Error, Result};
use crate::orchestrator::round_quota;
use crate::prompts::PromptTemplate;
use crate::selection::{ScorerKind, SelectionConfig, StdMode};
use crate::stm::{Featurizer, TrainingConfig};
use crate::swa::{SignMode, SwaConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Cross-model selection, shared feedback, weight adjustment.
    Fusegen,
    /// Cross-model selection and feedback, uniform final weights.
    NoSwa,
    /// Zero-shot generation only, merged, uniform weights.
    ZerogenMixed,
    /// Each backend guided only by its own samples and model, merged, uniform weights.
    SdgMixed,
    /// One backend, self-guided, with weight adjustment.
    SinglePlm,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Fusegen, Mode::NoSwa, Mode::ZerogenMixed, Mode::SdgMixed, Mode::SinglePlm];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fusegen => "fusegen",
            Mode::NoSwa => "no_swa",
            Mode::ZerogenMixed => "zerogen_mixed",
            Mode::SdgMixed => "sdg_mixed",
            Mode::SinglePlm => "single_plm",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }

    pub fn uses_swa(self) -> bool {
        matches!(self, Mode::Fusegen | Mode::SinglePlm)
    }

    pub fn uses_cross_model(self) -> bool {
        matches!(self, Mode::Fusegen | Mode::NoSwa)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwaSection {
    pub sign_mode: SignMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

impl Default for SwaSection {
    fn default() -> Self {
        SwaSection {
            sign_mode: SignMode::ProseIntent,
            beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    pub scorer: ScorerKind,
    pub std_mode: StdMode,
    pub reference_threshold: f64,
    pub reference_cap: usize,
    pub reference_relaxed_quantile: f64,
}

impl Default for SelectionSection {
    fn default() -> Self {
        let d = SelectionConfig::default();
        SelectionSection {
            scorer: d.scorer,
            std_mode: d.std_mode,
            reference_threshold: d.reference_threshold,
            reference_cap: d.reference_cap,
            reference_relaxed_quantile: d.reference_relaxed_quantile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    /// `builtin:<task>` or a path to a template TOML file.
    pub template_path: String,
    pub backends: Vec<BackendDescriptor>,
    pub n_per_plm: usize,
    pub j_steps: usize,
    pub alpha: f64,
    pub r_candidates: usize,
    pub s_incontext: usize,
    pub e1_weight_epochs: usize,
    pub e2_train_epochs: usize,
    pub learning_rate: f64,
    pub bias_lr_scale: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub testset_path: Option<PathBuf>,
    /// Size of the synthesized held-out set when `testset_path` is absent.
    pub heldout_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub swa: SwaSection,
    pub selection: SelectionSection,
    pub featurizer: Featurizer,
    pub cartography: Thresholds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mock_world: Option<MockWorldConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: String::new(),
            template_path: String::new(),
            backends: Vec::new(),
            n_per_plm: 1000,
            j_steps: 4,
            alpha: 0.5,
            r_candidates: 40,
            s_incontext: 8,
            e1_weight_epochs: 30,
            e2_train_epochs: 3,
            learning_rate: 0.1,
            bias_lr_scale: 0.01,
            batch_size: 32,
            seeds: vec![0, 1, 2],
            testset_path: None,
            heldout_size: 2000,
            corpus_path: None,
            output_dir: PathBuf::from("runs"),
            mode: Mode::Fusegen,
            swa: SwaSection::default(),
            selection: SelectionSection::default(),
            featurizer: Featurizer::default(),
            cartography: Thresholds::default(),
            mock_world: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(source: &str) -> Result<Self> {
        toml::from_str(source).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads a config file, applies overrides, and resolves relative paths against
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        apply_overrides(&mut table, overrides)?;
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.testset_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.corpus_path.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
        if !self.template_path.starts_with("builtin:") && Path::new(&self.template_path).is_relative() {
            self.template_path = base.join(&self.template_path).display().to_string();
        }
    }

    pub fn template(&self) -> Result<PromptTemplate> {
        PromptTemplate::resolve(&self.template_path)
    }

    /// Rounds actually run: zero-shot-only runs have a single round.
    pub fn effective_j(&self) -> usize {
        if self.mode == Mode::ZerogenMixed {
            0
        } else {
            self.j_steps
        }
    }

    pub fn selection_config(&self) -> SelectionConfig {
        SelectionConfig {
            alpha: self.alpha,
            r_candidates: self.r_candidates,
            s_incontext: self.s_incontext,
            scorer: self.selection.scorer,
            std_mode: self.selection.std_mode,
            reference_threshold: self.selection.reference_threshold,
            reference_cap: self.selection.reference_cap,
            reference_relaxed_quantile: self.selection.reference_relaxed_quantile,
        }
    }

    pub fn training_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            epochs: self.e2_train_epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            bias_lr_scale: self.bias_lr_scale,
        }
    }

    pub fn swa_config(&self) -> SwaConfig {
        SwaConfig {
            epochs: self.e1_weight_epochs,
            sign_mode: self.swa.sign_mode,
            beta: self.swa.beta,
        }
    }

    /// Every problem at once; empty when the config can be run.
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let k = self.backends.len();

        let template = match self.template() {
            Ok(t) => {
                if !self.task.is_empty() && t.task_name != self.task {
                    problems.push(format!(
                        "task `{}` does not match template task `{}`",
                        self.task, t.task_name
                    ));
                }
                Some(t)
            }
            Err(e) => {
                problems.push(format!("template `{}`: {e}", self.template_path));
                None
            }
        };
        if self.task.is_empty() {
            problems.push("`task` is required".into());
        }

        if k == 0 {
            problems.push("at least one backend is required".into());
        }
        let mut ids: Vec<&str> = self.backends.iter().map(|b| b.plm_id.as_str()).collect();
        ids.sort_unstable();
        for pair in ids.windows(2) {
            if pair[0] == pair[1] {
                problems.push(format!("duplicate backend id `{}`", pair[0]));
            }
        }
        for b in &self.backends {
            problems.extend(b.validate());
            if b.kind == BackendKind::Http {
                match resolve_credentials(b) {
                    Err(Error::Config(message)) => problems.push(message),
                    Err(other) => problems.push(other.to_string()),
                    Ok(_) => {}
                }
            }
        }
        let uses_mock = self.backends.iter().any(|b| b.kind == BackendKind::Mock);
        match &self.mock_world {
            Some(world) => problems.extend(world.validate().into_iter().map(|p| format!("mock_world: {p}"))),
            None if uses_mock => problems.push("mock backends need a [mock_world] section".into()),
            None => {}
        }
        if uses_mock {
            if let (Some(world), Some(_)) = (&self.mock_world, &template) {
                for b in &self.backends {
                    if let Some(profile) = &b.mock {
                        if profile.vocab_subspace >= world.subspaces {
                            problems.push(format!(
                                "backend `{}`: vocab_subspace {} outside 0..{}",
                                b.plm_id, profile.vocab_subspace, world.subspaces
                            ));
                        }
                    }
                }
            }
        }

        match self.mode {
            Mode::Fusegen | Mode::NoSwa if k < 2 => problems.push(format!(
                "mode {} needs at least 2 backends for cross-model variability, got {k}",
                self.mode.as_str()
            )),
            Mode::SinglePlm if k != 1 => {
                problems.push(format!("mode single_plm needs exactly 1 backend, got {k}"))
            }
            _ => {}
        }

        if self.n_per_plm == 0 {
            problems.push("n_per_plm must be positive".into());
        } else if self.n_per_plm < self.effective_j() + 1 {
            problems.push(format!(
                "n_per_plm ({}) must be at least j_steps + 1 ({})",
                self.n_per_plm,
                self.effective_j() + 1
            ));
        }
        let selection = self.selection_config();
        problems.extend(selection.validate());
        if self.n_per_plm > 0 && self.effective_j() > 0 {
            let first_round = round_quota(self.n_per_plm, self.effective_j(), 0);
            let pool = if self.mode.uses_cross_model() { first_round * k.max(1) } else { first_round };
            if self.r_candidates > pool {
                problems.push(format!(
                    "r_candidates ({}) exceeds the {pool} samples available after round 0",
                    self.r_candidates
                ));
            }
        }
        if self.e1_weight_epochs == 0 {
            problems.push("e1_weight_epochs must be positive".into());
        }
        if self.e2_train_epochs < 2 {
            problems.push("e2_train_epochs must be at least 2 (cartography needs two epochs)".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push("learning_rate must be positive".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(self.bias_lr_scale >= 0.0 && self.bias_lr_scale.is_finite()) {
            problems.push("bias_lr_scale must be nonnegative".into());
        }
        if let Some(beta) = self.swa.beta {
            if !(beta > 0.0 && beta < 1.0) {
                problems.push(format!("swa.beta must lie in (0, 1), got {beta}"));
            }
        }
        if self.seeds.is_empty() {
            problems.push("at least one seed is required".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            problems.push("seeds must be distinct".into());
        }
        match &self.testset_path {
            Some(p) if !p.exists() => problems.push(format!("test set {} does not exist", p.display())),
            Some(_) => {}
            None if self.mock_world.is_none() => {
                problems.push("`testset_path` is required unless a [mock_world] synthesizes one".into())
            }
            None if self.heldout_size == 0 => problems.push("heldout_size must be positive".into()),
            None => {}
        }
        if let Some(t) = &template {
            if t.requires_context() {
                match &self.corpus_path {
                    Some(p) if !p.exists() => {
                        problems.push(format!("context corpus {} does not exist", p.display()))
                    }
                    Some(_) => {}
                    None => problems.push(format!(
                        "template `{}` uses {{context_sentence}}; set `corpus_path`",
                        t.task_name
                    )),
                }
            }
        }
        if self.featurizer.dim == 0 || self.featurizer.min_order == 0 || self.featurizer.min_order > self.featurizer.max_order {
            problems.push("featurizer needs dim > 0 and 1 ≤ min_order ≤ max_order".into());
        }
        problems
    }

    pub fn validated(self) -> Result<Self> {
        let problems = self.validate();
        if problems.is_empty() {
            Ok(self)
        } else {
            Err(Error::ConfigList(problems))
        }
    }

    /// SHA-256 over the canonical JSON form, excluding the seed list and output location.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.seeds.clear();
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies `a.b.c=value` overrides. Values are parsed as TOML and fall back to bare strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override `{item}` has an empty key segment")));
        }
        let value = parse_value(raw.trim());
        let mut cursor = &mut *table;
        for segment in &path[..path.len() - 1] {
            let entry = cursor
                .entry(segment.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cursor = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{item}`: `{segment}` is not a table")))?;
        }
        cursor.insert(path[path.len() - 1].to_string(), value);
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
