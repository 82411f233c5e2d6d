//! Test sets and the ablation matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::dataset::LabelSchema;
use crate::error::{Error, Result};
use crate::orchestrator::{run_fusegen, FuseGenReport};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub schema: LabelSchema,
    pub source: String,
    pub examples: Vec<LabeledExample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    text: String,
    label_key: String,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.schema.num_classes()];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for ex in &self.examples {
            let record = ExampleRecord {
                text: ex.text.clone(),
                label_key: self.schema.key(ex.label).to_string(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Loads a labelled test set. `.tsv` files hold `text<TAB>label_key` rows (an
/// optional `text\tlabel_key` header is skipped); anything else is read as JSONL.
pub fn load_testset(path: impl AsRef<Path>, schema: &LabelSchema) -> Result<TestSet> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let is_tsv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("tsv"));
    let mut examples = Vec::new();
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
        let (text, key) = if is_tsv {
            if line_no == 1 && line.trim() == "text\tlabel_key" {
                continue;
            }
            let (text, key) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_error("expected `text<TAB>label_key`".into()))?;
            (text.to_string(), key.trim().to_string())
        } else {
            let record: ExampleRecord =
                serde_json::from_str(&line).map_err(|e| parse_error(e.to_string()))?;
            (record.text, record.label_key)
        };
        let label = schema
            .class_id(&key)
            .ok_or_else(|| parse_error(format!("unknown label `{key}` for task `{}`", schema.task_name)))?;
        examples.push(LabeledExample { text, label });
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput(format!("test set {} is empty", path.display())));
    }
    Ok(TestSet {
        schema: schema.clone(),
        source: path.display().to_string(),
        examples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub per_seed_final: Vec<f64>,
    pub mean_final: f64,
    /// Mean per-backend model accuracy, in backend order.
    pub mean_per_plm: Vec<(String, f64)>,
}

/// Rows are modes; columns are the per-backend models followed by the fused model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: String,
    pub backends: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationRow {
    fn from_report(mode: Mode, report: &FuseGenReport) -> Self {
        AblationRow {
            mode,
            seeds: report.per_seed.iter().map(|r| r.seed).collect(),
            per_seed_final: report.per_seed.iter().map(|r| r.final_accuracy).collect(),
            mean_final: report.mean_final_accuracy,
            mean_per_plm: report.mean_per_plm_accuracy.clone(),
        }
    }
}

impl AblationTable {
    pub fn row(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode");
        for b in &self.backends {
            let _ = write!(out, ",{b}");
        }
        out.push_str(",fused\n");
        for row in &self.rows {
            out.push_str(row.mode.as_str());
            let lookup: BTreeMap<&str, f64> = row.mean_per_plm.iter().map(|(k, v)| (k.as_str(), *v)).collect();
            for b in &self.backends {
                match lookup.get(b.as_str()) {
                    Some(v) => {
                        let _ = write!(out, ",{:.4}", v * 100.0);
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{:.4}", row.mean_final * 100.0);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["mode".to_string()];
        header.extend(self.backends.iter().cloned());
        header.push("fused".into());
        let mut cells: Vec<Vec<String>> = vec![header];
        for row in &self.rows {
            let lookup: BTreeMap<&str, f64> = row.mean_per_plm.iter().map(|(k, v)| (k.as_str(), *v)).collect();
            let mut line = vec![row.mode.as_str().to_string()];
            for b in &self.backends {
                line.push(lookup.get(b.as_str()).map_or("-".into(), |v| format!("{:.2}", v * 100.0)));
            }
            line.push(format!("{:.2}", row.mean_final * 100.0));
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, w))| if c == 0 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

/// The configuration a mode actually runs with. `single_plm` keeps the first backend only.
pub fn config_for_mode(base: &RunConfig, mode: Mode) -> RunConfig {
    let mut config = base.clone();
    config.mode = mode;
    if mode == Mode::SinglePlm {
        config.backends.truncate(1);
    }
    config
}

/// Runs every mode over the shared seed set under `root/<mode>/`.
pub fn run_ablation_matrix(base: &RunConfig, modes: &[Mode], root: &Path, concurrent: bool) -> Result<AblationTable> {
    let run_mode = |mode: Mode| -> Result<AblationRow> {
        let config = config_for_mode(base, mode);
        let report = run_fusegen(&config, &root.join(mode.as_str()), "")?;
        Ok(AblationRow::from_report(mode, &report))
    };
    let rows: Vec<AblationRow> = if concurrent {
        std::thread::scope(|scope| {
            let handles: Vec<_> = modes.iter().map(|&m| scope.spawn(move || run_mode(m))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("mode worker panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        modes.iter().map(|&m| run_mode(m)).collect::<Result<_>>()?
    };
    Ok(AblationTable {
        task: base.task.clone(),
        backends: base.backends.iter().map(|b| b.plm_id.clone()).collect(),
        rows,
    })
}
