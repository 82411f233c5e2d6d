//! Deterministic mock generator.
//!
//! A [`MockWorld`] owns a synthetic lexicon: for every vocabulary subspace and
//! class, a pool of pseudo-words that signal that class, plus a shared pool of
//! class-neutral filler words. Each mock backend writes from its own subspace,
//! which gives it a distribution bias, and flips the requested label or emits
//! filler-only junk at configured rates. When a prompt carries in-context
//! examples, the backend recognizes their subspaces and mixes them into its
//! own output.
//!
//! Output depends only on `(seed, plm_id, prompt, ordinal)`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TextGenerator;
use crate::dataset::LabelSchema;
use crate::error::{Error, Result};
use crate::evalharness::{LabeledExample, TestSet};

const SUBSPACE_SYLLABLES: &[&str] = &[
    "ka", "lo", "mi", "ne", "pu", "ri", "so", "tu", "ve", "zo", "ba", "de",
];
const CLASS_SYLLABLES: &[&str] = &["ra", "te", "gu", "fo", "hi", "ja", "ku", "me"];
const TAIL_SYLLABLES: &[&str] = &[
    "ba", "be", "bo", "da", "di", "fa", "ga", "la", "li", "ma", "na", "no", "pa", "pe", "sa", "si",
    "ta", "to", "va", "xi",
];
const FILLER_PREFIX: &str = "wu";
pub const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "this", "was", "and", "it", "very", "with", "of", "so", "but", "really", "is", "that",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockWorldConfig {
    pub subspaces: usize,
    pub words_per_class: usize,
    pub filler_words: usize,
    /// Probability that a content slot holds a class-neutral filler word.
    pub filler_rate: f64,
    pub min_slots: usize,
    pub max_slots: usize,
    pub seed: u64,
}

impl Default for MockWorldConfig {
    fn default() -> Self {
        MockWorldConfig {
            subspaces: 3,
            words_per_class: 32,
            filler_words: 60,
            filler_rate: 0.35,
            min_slots: 3,
            max_slots: 7,
            seed: 0,
        }
    }
}

impl MockWorldConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.subspaces == 0 {
            problems.push("mock_world.subspaces must be positive".into());
        }
        if self.words_per_class == 0 || self.words_per_class > TAIL_SYLLABLES.len().pow(2) {
            problems.push(format!(
                "mock_world.words_per_class must be in 1..={}",
                TAIL_SYLLABLES.len().pow(2)
            ));
        }
        if self.filler_words == 0 || self.filler_words > TAIL_SYLLABLES.len().pow(2) {
            problems.push("mock_world.filler_words out of range".into());
        }
        if !(0.0..1.0).contains(&self.filler_rate) {
            problems.push("mock_world.filler_rate must be in [0, 1)".into());
        }
        if self.min_slots == 0 || self.min_slots > self.max_slots {
            problems.push("mock_world slots must satisfy 1 ≤ min_slots ≤ max_slots".into());
        }
        problems
    }
}

#[derive(Debug, Clone)]
pub struct MockWorld {
    schema: LabelSchema,
    config: MockWorldConfig,
    /// `pools[subspace][class]`
    pools: Vec<Vec<Vec<String>>>,
    filler: Vec<String>,
    filler_set: HashSet<String>,
    lexicon: HashMap<String, (usize, usize)>,
}

fn syllable(list: &[&str], index: usize) -> String {
    let base = list[index % list.len()];
    let lap = index / list.len();
    if lap == 0 {
        base.to_string()
    } else {
        format!("{base}{lap}")
    }
}

fn tail(index: usize) -> String {
    let n = TAIL_SYLLABLES.len();
    format!("{}{}", TAIL_SYLLABLES[(index / n) % n], TAIL_SYLLABLES[index % n])
}

impl MockWorld {
    pub fn new(schema: LabelSchema, config: MockWorldConfig) -> Result<Self> {
        if let Some(problem) = config.validate().into_iter().next() {
            return Err(Error::Config(problem));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let offset = rng.gen_range(0..TAIL_SYLLABLES.len().pow(2));
        let span = TAIL_SYLLABLES.len().pow(2);
        let mut pools = Vec::with_capacity(config.subspaces);
        let mut lexicon = HashMap::new();
        for s in 0..config.subspaces {
            let mut per_class = Vec::with_capacity(schema.num_classes());
            for c in 0..schema.num_classes() {
                let prefix = format!(
                    "{}{}",
                    syllable(SUBSPACE_SYLLABLES, s),
                    syllable(CLASS_SYLLABLES, c)
                );
                let words: Vec<String> = (0..config.words_per_class)
                    .map(|i| format!("{prefix}{}", tail((i + offset) % span)))
                    .collect();
                for w in &words {
                    lexicon.insert(w.clone(), (s, c));
                }
                per_class.push(words);
            }
            pools.push(per_class);
        }
        let filler: Vec<String> = (0..config.filler_words)
            .map(|i| format!("{FILLER_PREFIX}{}", tail((i + offset) % span)))
            .collect();
        Ok(MockWorld {
            schema,
            config,
            pools,
            filler_set: filler.iter().cloned().collect(),
            filler,
            lexicon,
        })
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn config(&self) -> &MockWorldConfig {
        &self.config
    }

    pub fn pool(&self, subspace: usize, class: usize) -> &[String] {
        &self.pools[subspace][class]
    }

    pub fn filler(&self) -> &[String] {
        &self.filler
    }

    /// `(subspace, class)` of a content word.
    pub fn lookup(&self, word: &str) -> Option<(usize, usize)> {
        self.lexicon.get(word).copied()
    }

    /// Share of a text's content words that carry its dominant class. Filler
    /// counts as content; text without content words scores zero.
    pub fn clarity(&self, text: &str) -> f64 {
        let mut per_class = vec![0usize; self.schema.num_classes()];
        let mut content = 0usize;
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let word = word.to_lowercase();
            if let Some((_, class)) = self.lookup(&word) {
                per_class[class] += 1;
                content += 1;
            } else if self.filler_set.contains(&word) {
                content += 1;
            }
        }
        if content == 0 {
            return 0.0;
        }
        *per_class.iter().max().unwrap_or(&0) as f64 / content as f64
    }

    /// Subspaces whose words appear in `text`.
    pub fn subspaces_in(&self, text: &str) -> BTreeSet<usize> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter_map(|w| self.lookup(&w.to_lowercase()))
            .map(|(s, _)| s)
            .collect()
    }

    /// Builds one text signalling `class` from the given subspaces.
    fn compose<R: Rng>(&self, rng: &mut R, class: Option<usize>, subspace_for_slot: &mut dyn FnMut(&mut R) -> usize) -> String {
        let slots = rng.gen_range(self.config.min_slots..=self.config.max_slots);
        let mut words: Vec<&str> = Vec::with_capacity(slots * 2);
        for _ in 0..slots {
            if rng.gen_bool(0.5) {
                words.push(FUNCTION_WORDS[rng.gen_range(0..FUNCTION_WORDS.len())]);
            }
            let content = match class {
                Some(c) if !rng.gen_bool(self.config.filler_rate) => {
                    let pool = &self.pools[subspace_for_slot(rng)][c];
                    pool[rng.gen_range(0..pool.len())].as_str()
                }
                _ => self.filler[rng.gen_range(0..self.filler.len())].as_str(),
            };
            words.push(content);
        }
        let mut text = words.join(" ");
        if let Some(first) = text.get(0..1) {
            let upper = first.to_uppercase();
            text.replace_range(0..1, &upper);
        }
        text.push('.');
        text
    }

    /// Clean, gold-labelled examples drawn from every subspace, classes balanced.
    pub fn heldout(&self, count: usize, seed: u64) -> TestSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x07e5_75e7_u64);
        let subspaces = self.config.subspaces;
        let examples = (0..count)
            .map(|i| {
                let label = i % self.schema.num_classes();
                let text = self.compose(&mut rng, Some(label), &mut |r: &mut ChaCha8Rng| r.gen_range(0..subspaces));
                LabeledExample { text, label }
            })
            .collect();
        TestSet {
            schema: self.schema.clone(),
            source: format!("mock-heldout-{seed}"),
            examples,
        }
    }

    /// Writes a held-out set as JSONL (`text`, `label_key`).
    pub fn write_heldout(&self, path: impl AsRef<Path>, count: usize, seed: u64) -> Result<TestSet> {
        let set = self.heldout(count, seed);
        set.save_jsonl(path)?;
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockProfileConfig {
    pub vocab_subspace: usize,
    pub label_noise_rate: f64,
    pub junk_rate: f64,
    pub seed_offset: u64,
    /// Probability that a content slot follows the style of the in-context examples.
    pub feedback_adoption: f64,
    /// Largest fractional cut of the noise and junk rates that perfectly clear
    /// in-context examples produce. Murky or junk examples cut less.
    pub feedback_fidelity: f64,
}

impl Default for MockProfileConfig {
    fn default() -> Self {
        MockProfileConfig {
            vocab_subspace: 0,
            label_noise_rate: 0.0,
            junk_rate: 0.0,
            seed_offset: 0,
            feedback_adoption: 0.5,
            feedback_fidelity: 0.5,
        }
    }
}

impl MockProfileConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(0.0..1.0).contains(&self.label_noise_rate) {
            problems.push(format!("label_noise_rate must be in [0, 1), got {}", self.label_noise_rate));
        }
        if !(0.0..1.0).contains(&self.junk_rate) {
            problems.push(format!("junk_rate must be in [0, 1), got {}", self.junk_rate));
        }
        if self.label_noise_rate + self.junk_rate >= 1.0 {
            problems.push("label_noise_rate + junk_rate must stay below 1".into());
        }
        if !(0.0..=1.0).contains(&self.feedback_adoption) {
            problems.push("feedback_adoption must be in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.feedback_fidelity) {
            problems.push("feedback_fidelity must be in [0, 1]".into());
        }
        problems
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockProfile {
    pub plm_id: String,
    pub config: MockProfileConfig,
}

impl MockProfile {
    pub fn new(plm_id: &str, config: MockProfileConfig, world: &MockWorld) -> Result<Self> {
        if let Some(problem) = config.validate().into_iter().next() {
            return Err(Error::Config(format!("mock `{plm_id}`: {problem}")));
        }
        if config.vocab_subspace >= world.config.subspaces {
            return Err(Error::Config(format!(
                "mock `{plm_id}`: vocab_subspace {} but the world has {} subspaces",
                config.vocab_subspace, world.config.subspaces
            )));
        }
        Ok(MockProfile {
            plm_id: plm_id.to_string(),
            config,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextKind {
    Clean,
    /// Reads as a different class than requested.
    Flipped,
    /// Filler only; relevant to no class.
    Junk,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockGeneration {
    pub text: String,
    pub requested_class: usize,
    /// Class the text actually signals; `None` for junk.
    pub emitted_class: Option<usize>,
    pub kind: TextKind,
}

pub struct MockBackend {
    profile: MockProfile,
    world: Arc<MockWorld>,
    seed: u64,
    requests: AtomicU64,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Whole-word occurrence of `needle` in `haystack`.
fn contains_word(haystack: &str, needle: &str) -> bool {
    let needle = needle.trim();
    if needle.is_empty() {
        return true;
    }
    haystack.match_indices(needle).any(|(at, _)| {
        let before = haystack[..at].chars().next_back();
        let after = haystack[at + needle.len()..].chars().next();
        before.is_none_or(|c| !is_word_char(c)) && after.is_none_or(|c| !is_word_char(c))
    })
}

impl MockBackend {
    pub fn new(profile: MockProfile, world: Arc<MockWorld>, seed: u64) -> Self {
        MockBackend {
            profile,
            world,
            seed,
            requests: AtomicU64::new(0),
        }
    }

    pub fn profile(&self) -> &MockProfile {
        &self.profile
    }

    /// Requested class, read from the prompt's final paragraph.
    pub fn requested_class(&self, prompt: &str) -> Result<usize> {
        let instruction = prompt.rsplit("\n\n").next().unwrap_or(prompt);
        let schema = self.world.schema();
        let mut best: Option<(usize, usize)> = None;
        for class in &schema.classes {
            let fragments: Vec<&str> = class
                .prompt_surface
                .split(crate::prompts::CONTEXT)
                .map(str::trim)
                .filter(|f| !f.is_empty())
                .collect();
            if fragments.is_empty() || !fragments.iter().all(|f| contains_word(instruction, f)) {
                continue;
            }
            let strength: usize = fragments.iter().map(|f| f.len()).sum();
            if best.is_none_or(|(_, s)| strength > s) {
                best = Some((class.class_id, strength));
            }
        }
        best.map(|(c, _)| c).ok_or_else(|| {
            Error::backend(&self.profile.plm_id, "prompt names none of the task's class surfaces")
        })
    }

    fn rng_for(&self, prompt_digest: u64, ordinal: u64) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.profile.config.seed_offset.to_le_bytes());
        hasher.update(self.profile.plm_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(prompt_digest.to_le_bytes());
        hasher.update(ordinal.to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Generation with provenance of each text, for audits.
    pub fn generate_traced(&self, prompt: &str, count: usize, first_ordinal: u64) -> Result<Vec<MockGeneration>> {
        if count == 0 {
            return Err(Error::InvalidInput("generation count must be at least 1".into()));
        }
        self.requests.fetch_add(count as u64, Ordering::Relaxed);
        let requested = self.requested_class(prompt)?;
        let prompt_digest = {
            let d = Sha256::digest(prompt.as_bytes());
            u64::from_le_bytes(d[..8].try_into().unwrap())
        };
        // In-context examples are everything before the instruction, one per line.
        let examples: Vec<&str> = match prompt.rsplit_once("\n\n") {
            Some((block, _)) => block.lines().filter(|l| !l.trim().is_empty()).collect(),
            None => Vec::new(),
        };
        let shown: Vec<usize> = examples
            .iter()
            .flat_map(|e| self.world.subspaces_in(e))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let cfg = &self.profile.config;
        let clarity = if examples.is_empty() {
            0.0
        } else {
            examples.iter().map(|e| self.world.clarity(e)).sum::<f64>() / examples.len() as f64
        };
        let damping = 1.0 - cfg.feedback_fidelity * clarity;
        let noise_rate = cfg.label_noise_rate * damping;
        let junk_rate = cfg.junk_rate * damping;
        let own = cfg.vocab_subspace;
        let classes = self.world.schema().num_classes();

        Ok((0..count as u64)
            .map(|i| {
                let mut rng = self.rng_for(prompt_digest, first_ordinal + i);
                let u: f64 = rng.gen();
                let (kind, emitted) = if u < noise_rate {
                    let shift = rng.gen_range(1..classes);
                    (TextKind::Flipped, Some((requested + shift) % classes))
                } else if u < noise_rate + junk_rate {
                    (TextKind::Junk, None)
                } else {
                    (TextKind::Clean, Some(requested))
                };
                let mut pick_subspace = |r: &mut ChaCha8Rng| {
                    if !shown.is_empty() && r.gen_bool(cfg.feedback_adoption) {
                        shown[r.gen_range(0..shown.len())]
                    } else {
                        own
                    }
                };
                let text = self.world.compose(&mut rng, emitted, &mut pick_subspace);
                MockGeneration {
                    text,
                    requested_class: requested,
                    emitted_class: emitted,
                    kind,
                }
            })
            .collect())
    }
}

impl TextGenerator for MockBackend {
    fn plm_id(&self) -> &str {
        &self.profile.plm_id
    }

    fn generate(&self, prompt: &str, count: usize, first_ordinal: u64) -> Result<Vec<String>> {
        Ok(self
            .generate_traced(prompt, count, first_ordinal)?
            .into_iter()
            .map(|g| g.text)
            .collect())
    }

    fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}
