use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-run record persisted as `manifest.json` in the run directory. Only ever appended to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub seed: u64,
    pub mode: String,
    pub rounds: Vec<RoundRecord>,
    #[serde(default)]
    pub events: Vec<String>,
    #[serde(default)]
    pub request_counts: BTreeMap<String, u64>,
    #[serde(default)]
    pub cartography_histogram: BTreeMap<String, usize>,
    #[serde(default)]
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_index: usize,
    /// Samples generated in this round, per backend.
    pub per_plm_counts: BTreeMap<String, usize>,
    /// Selected in-context ids, per feedback group (one group unless self-guided).
    pub selected: BTreeMap<String, Vec<String>>,
    pub fused_accuracy: Option<f64>,
    pub per_plm_accuracy: BTreeMap<String, f64>,
    pub duplicate_texts: usize,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, config_digest: impl Into<String>, seed: u64, mode: &str) -> Self {
        RunManifest {
            run_id: run_id.into(),
            config_digest: config_digest.into(),
            seed,
            mode: mode.to_string(),
            ..Default::default()
        }
    }

    pub fn push_round(&mut self, record: RoundRecord) -> Result<()> {
        if let Some(last) = self.rounds.last() {
            if record.round_index <= last.round_index {
                return Err(Error::Invariant(format!(
                    "manifest is append-only: round {} after round {}",
                    record.round_index, last.round_index
                )));
            }
        }
        self.rounds.push(record);
        Ok(())
    }

    pub fn push_event(&mut self, event: impl Into<String>) {
        let event = event.into();
        log::warn!("{event}");
        self.events.push(event);
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
