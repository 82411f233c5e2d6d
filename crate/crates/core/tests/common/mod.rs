#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use fusegen::backends::{BackendDescriptor, MockBackend, MockProfile, MockProfileConfig, MockWorld, MockWorldConfig, TextKind};
use fusegen::prompts::PromptTemplate;
use fusegen::{RunConfig, Sample, SyntheticDataset};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The shipped three-backend mock configuration, writing under `output_dir`.
pub fn mock_imdb_config(output_dir: &Path) -> RunConfig {
    let mut config = RunConfig::load(repo_root().join("configs/mock_imdb.toml"), &[]).expect("mock_imdb.toml loads");
    config.output_dir = output_dir.to_path_buf();
    config
}

/// Two noisy mock backends and a budget small enough for per-test runs.
pub fn small_config(output_dir: &Path) -> RunConfig {
    RunConfig {
        task: "imdb".into(),
        template_path: "builtin:imdb".into(),
        backends: (0..2)
            .map(|i| {
                BackendDescriptor::mock(
                    format!("mock-{i}"),
                    MockProfileConfig {
                        vocab_subspace: i,
                        label_noise_rate: 0.1 + 0.1 * i as f64,
                        seed_offset: i as u64 + 1,
                        ..Default::default()
                    },
                )
            })
            .collect(),
        n_per_plm: 60,
        j_steps: 2,
        r_candidates: 10,
        s_incontext: 4,
        e1_weight_epochs: 5,
        e2_train_epochs: 3,
        learning_rate: 0.5,
        seeds: vec![0],
        heldout_size: 300,
        output_dir: output_dir.to_path_buf(),
        mock_world: Some(MockWorldConfig {
            seed: 7,
            ..Default::default()
        }),
        ..Default::default()
    }
}

pub fn imdb_template() -> PromptTemplate {
    PromptTemplate::builtin("imdb").unwrap()
}

pub fn mock_world(subspaces: usize, seed: u64) -> Arc<MockWorld> {
    let config = MockWorldConfig {
        subspaces,
        seed,
        ..Default::default()
    };
    Arc::new(MockWorld::new(imdb_template().schema, config).unwrap())
}

pub fn mock_backend(world: &Arc<MockWorld>, plm_id: &str, profile: MockProfileConfig, seed: u64) -> MockBackend {
    let profile = MockProfile::new(plm_id, profile, world).unwrap();
    MockBackend::new(profile, Arc::clone(world), seed)
}

/// Zero-shot dataset of `n` samples with round-robin labels, plus which ones were flipped.
pub fn traced_dataset(backend: &MockBackend, n: usize) -> (SyntheticDataset, Vec<TextKind>) {
    let template = imdb_template();
    let classes = template.schema.num_classes();
    let mut samples = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    let per_class = n.div_ceil(classes);
    for label in 0..classes {
        let prompt = template.render_zero_shot(label, None).unwrap().text;
        let generated = backend
            .generate_traced(&prompt, per_class, (label * per_class) as u64)
            .unwrap();
        for (o, g) in generated.into_iter().enumerate() {
            let ordinal = o * classes + label;
            if ordinal < n {
                samples.push((ordinal, Sample::new(&backend.profile().plm_id, 0, ordinal, g.text, label)));
                kinds.push((ordinal, g.kind));
            }
        }
    }
    samples.sort_by_key(|(o, _)| *o);
    kinds.sort_by_key(|(o, _)| *o);
    let dataset = SyntheticDataset::from_samples(
        template.schema,
        samples.into_iter().map(|(_, s)| s).collect(),
    )
    .unwrap();
    (dataset, kinds.into_iter().map(|(_, k)| k).collect())
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}
