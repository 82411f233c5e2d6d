//! Zero-shot and few-shot generation prompts.
//!
//! Templates are data: one TOML document per task, either shipped with the
//! crate (`builtin:<task>`) or loaded from a path. In-context samples contribute
//! only their text; the renderer never inserts their labels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, LabelSchema, Sample};
use crate::error::{Error, Result};

pub const LABEL: &str = "{label_surface}";
pub const CONTEXT: &str = "{context_sentence}";
pub const TEXT: &str = "{text}";

pub const DEFAULT_MAX_PROMPT_CHARS: usize = 6000;

const BUILTIN: &[(&str, &str)] = &[
    ("imdb", include_str!("../templates/imdb.toml")),
    ("sst2", include_str!("../templates/sst2.toml")),
    ("yelp", include_str!("../templates/yelp.toml")),
    ("agnews", include_str!("../templates/agnews.toml")),
    ("qnli", include_str!("../templates/qnli.toml")),
    ("mnli", include_str!("../templates/mnli.toml")),
    ("markednews", include_str!("../templates/markednews.toml")),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotTemplate {
    pub example_line: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    pub instruction_line: String,
}

fn default_separator() -> String {
    "\n".into()
}

fn default_max_chars() -> usize {
    DEFAULT_MAX_PROMPT_CHARS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassEntry {
    class_key: String,
    prompt_surface: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    task_name: String,
    zero_shot: String,
    few_shot: FewShotTemplate,
    #[serde(default = "default_max_chars")]
    max_prompt_chars: usize,
    classes: Vec<ClassEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task_name: String,
    pub zero_shot: String,
    pub few_shot: FewShotTemplate,
    pub max_prompt_chars: usize,
    pub schema: LabelSchema,
}

/// A rendered prompt plus what the renderer had to do to produce it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub text: String,
    pub included: usize,
    pub dropped: usize,
    /// The few-shot request fell back to the zero-shot prompt.
    pub downgraded: bool,
    pub warnings: Vec<String>,
}

impl PromptTemplate {
    pub fn from_toml(source: &str) -> Result<Self> {
        let file: TemplateFile =
            toml::from_str(source).map_err(|e| Error::Config(format!("template: {e}")))?;
        let classes = file
            .classes
            .into_iter()
            .enumerate()
            .map(|(class_id, c)| ClassLabel {
                class_id,
                class_key: c.class_key,
                prompt_surface: c.prompt_surface,
            })
            .collect();
        let template = PromptTemplate {
            schema: LabelSchema::new(file.task_name.clone(), classes)?,
            task_name: file.task_name,
            zero_shot: file.zero_shot,
            few_shot: file.few_shot,
            max_prompt_chars: file.max_prompt_chars,
        };
        template.validate()?;
        Ok(template)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn builtin(task: &str) -> Result<Self> {
        BUILTIN
            .iter()
            .find(|(name, _)| *name == task)
            .map(|(_, src)| Self::from_toml(src))
            .unwrap_or_else(|| Err(Error::Config(format!("no built-in template `{task}`"))))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(name, _)| *name)
    }

    /// `builtin:<task>` or a filesystem path.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec.strip_prefix("builtin:") {
            Some(task) => Self::builtin(task),
            None => Self::load(spec),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.zero_shot.matches(LABEL).count() != 1 {
            return Err(Error::Config(format!(
                "zero_shot of `{}` must contain {LABEL} exactly once",
                self.task_name
            )));
        }
        if self.few_shot.instruction_line.matches(LABEL).count() != 1 {
            return Err(Error::Config(format!(
                "few_shot.instruction_line of `{}` must contain {LABEL} exactly once",
                self.task_name
            )));
        }
        if self.few_shot.example_line.matches(TEXT).count() != 1 {
            return Err(Error::Config(format!(
                "few_shot.example_line of `{}` must contain {TEXT} exactly once",
                self.task_name
            )));
        }
        if self.few_shot.example_line.contains(LABEL) {
            return Err(Error::Config(format!(
                "few_shot.example_line of `{}` must not carry a label placeholder",
                self.task_name
            )));
        }
        if self.max_prompt_chars == 0 {
            return Err(Error::Config("max_prompt_chars must be positive".into()));
        }
        Ok(())
    }

    /// Whether rendering needs a context sentence.
    pub fn requires_context(&self) -> bool {
        self.zero_shot.contains(CONTEXT)
            || self.few_shot.instruction_line.contains(CONTEXT)
            || self
                .schema
                .classes
                .iter()
                .any(|c| c.prompt_surface.contains(CONTEXT))
    }

    fn fill(&self, pattern: &str, label: usize, context: Option<&str>, warnings: &mut Vec<String>) -> Result<String> {
        if label >= self.schema.num_classes() {
            return Err(Error::InvalidInput(format!(
                "label {label} outside the {}-class schema of `{}`",
                self.schema.num_classes(),
                self.task_name
            )));
        }
        let with_label = pattern.replacen(LABEL, self.schema.surface(label), 1);
        match (with_label.contains(CONTEXT), context) {
            (true, Some(ctx)) => Ok(with_label.replace(CONTEXT, ctx)),
            (true, None) => Err(Error::InvalidInput(format!(
                "template `{}` requires {CONTEXT} but no context was supplied",
                self.task_name
            ))),
            (false, Some(_)) => {
                warnings.push(format!(
                    "template `{}` has no {CONTEXT}; supplied context ignored",
                    self.task_name
                ));
                Ok(with_label)
            }
            (false, None) => Ok(with_label),
        }
    }

    pub fn render_zero_shot(&self, label: usize, context: Option<&str>) -> Result<RenderedPrompt> {
        let mut warnings = Vec::new();
        let text = self.fill(&self.zero_shot, label, context, &mut warnings)?;
        Ok(RenderedPrompt {
            text,
            included: 0,
            dropped: 0,
            downgraded: false,
            warnings,
        })
    }

    /// Few-shot prompt with the in-context texts in the given (rank) order.
    /// Lowest-ranked samples are dropped until the prompt fits `max_prompt_chars`.
    pub fn render_few_shot(&self, incontext: &[&Sample], label: usize, context: Option<&str>) -> Result<RenderedPrompt> {
        let mut warnings = Vec::new();
        let instruction = self.fill(&self.few_shot.instruction_line, label, context, &mut warnings)?;
        let sep = &self.few_shot.separator;
        let lines: Vec<String> = incontext
            .iter()
            .map(|s| self.few_shot.example_line.replacen(TEXT, &s.text, 1))
            .collect();

        // Length of the prompt when the first `n` lines are kept.
        let sep_chars = sep.chars().count();
        let instruction_chars = instruction.chars().count();
        let mut prefix_chars = Vec::with_capacity(lines.len() + 1);
        prefix_chars.push(0usize);
        for line in &lines {
            let prev = *prefix_chars.last().unwrap();
            prefix_chars.push(prev + line.chars().count() + sep_chars);
        }
        let total = |n: usize| prefix_chars[n] + sep_chars + instruction_chars;
        let mut keep = lines.len();
        while keep > 0 && total(keep) > self.max_prompt_chars {
            keep -= 1;
        }

        if keep == 0 {
            let mut zero = self.render_zero_shot(label, context)?;
            let reason = if incontext.is_empty() {
                "no in-context samples".to_string()
            } else {
                format!("none of {} in-context samples fit {} chars", incontext.len(), self.max_prompt_chars)
            };
            zero.warnings.push(format!("few-shot prompt downgraded to zero-shot: {reason}"));
            zero.dropped = incontext.len();
            zero.downgraded = true;
            return Ok(zero);
        }
        if keep < lines.len() {
            warnings.push(format!(
                "dropped {} lowest-ranked in-context samples to fit {} chars",
                lines.len() - keep,
                self.max_prompt_chars
            ));
        }
        let mut text = String::with_capacity(total(keep));
        for line in &lines[..keep] {
            text.push_str(line);
            text.push_str(sep);
        }
        text.push_str(sep);
        text.push_str(&instruction);
        Ok(RenderedPrompt {
            text,
            included: keep,
            dropped: lines.len() - keep,
            downgraded: false,
            warnings,
        })
    }
}

/// Newline-delimited context sentences, sampled without replacement.
#[derive(Debug, Clone)]
pub struct CorpusSource {
    sentences: Vec<String>,
    seed: u64,
}

impl CorpusSource {
    pub fn new(sentences: Vec<String>, seed: u64) -> Result<Self> {
        let sentences: Vec<String> = sentences
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if sentences.is_empty() {
            return Err(Error::Config("context corpus is empty".into()));
        }
        Ok(CorpusSource { sentences, seed })
    }

    pub fn load(path: impl AsRef<Path>, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(str::to_string).collect(), seed)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// `count` sentences for one (round, stream) pair, without replacement while
    /// the corpus lasts; larger requests cycle through fresh permutations.
    pub fn draw(&self, round: usize, stream: u64, count: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ (round as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.rotate_left(32),
        );
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut order: Vec<usize> = (0..self.sentences.len()).collect();
            order.shuffle(&mut rng);
            out.extend(order.into_iter().take(count - out.len()).map(|i| self.sentences[i].clone()));
        }
        out
    }
}
