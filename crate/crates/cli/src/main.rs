use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fusegen::cartography::{compute_cartography, export_plot_data, Thresholds};
use fusegen::config::{Mode, RunConfig};
use fusegen::dataset::SyntheticDataset;
use fusegen::evalharness::{load_testset, run_ablation_matrix};
use fusegen::manifest::RunManifest;
use fusegen::orchestrator::{run_dir_name, write_weight_csv, FuseGenReport, Orchestrator, RunPaths};
use fusegen::stm::TrainingDynamics;
use fusegen::swa::{swa_train, SignMode};
use fusegen::{stm, Error};

#[derive(Parser, Debug)]
#[command(name = "fusegen", version, about = "Multi-backend synthetic data generation with cross-model selection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override; dotted keys reach nested tables. Repeatable.
    #[arg(long = "override", global = true, num_args = 1.., action = clap::ArgAction::Append)]
    overrides: Vec<String>,
    /// Run a single seed instead of the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Only warnings and errors on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate, select, reweight and train for every seed.
    Run {
        /// Overrides the configured mode.
        #[arg(long)]
        mode: Option<String>,
        /// Start new run directories even when a matching one exists.
        #[arg(long)]
        fresh: bool,
    },
    /// Re-run weight adjustment on a finished run's merged dataset.
    Swa {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        sign_mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Recompute and export cartography from a run's stored training dynamics.
    Cartography {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        variability_threshold: Option<f64>,
        #[arg(long)]
        confidence_threshold: Option<f64>,
    },
    /// Run several modes over the shared seed set and print the comparison table.
    Ablate {
        /// Comma-separated modes; defaults to all.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
        #[arg(long)]
        concurrent: bool,
    },
    /// Check a configuration without running it.
    Validate,
}

fn exit_code(error: &anyhow::Error) -> u8 {
    match error.downcast_ref::<Error>() {
        Some(e) if e.is_config() => 2,
        Some(Error::MissingFile(_) | Error::Parse { .. } | Error::SchemaMismatch(_)) => 2,
        Some(Error::Backend { .. }) => 3,
        Some(Error::Invariant(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::from(exit_code(&error))
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let global = &cli.global;
    match cli.command {
        Command::Run { mode, fresh } => cmd_run(global, mode.as_deref(), fresh),
        Command::Swa { run_dir, sign_mode, epochs } => cmd_swa(&run_dir, sign_mode.as_deref(), epochs),
        Command::Cartography {
            run_dir,
            out,
            variability_threshold,
            confidence_threshold,
        } => cmd_cartography(&run_dir, out, variability_threshold, confidence_threshold),
        Command::Ablate { modes, concurrent } => cmd_ablate(global, &modes, concurrent),
        Command::Validate => cmd_validate(global),
    }
}

fn load_config(global: &Global) -> anyhow::Result<RunConfig> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut config = RunConfig::load(path, &global.overrides)?;
    if let Some(seed) = global.seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn fail_on_problems(config: &RunConfig) -> anyhow::Result<()> {
    let problems = config.validate();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigList(problems).into())
    }
}

/// An existing directory for this config and seed, unfinished ones first.
fn resumable_dir(config: &RunConfig, seed: u64) -> Option<PathBuf> {
    let prefix = run_dir_name(config, seed, "_");
    let digest = config.digest();
    let mut candidates: Vec<(bool, PathBuf)> = std::fs::read_dir(&config.output_dir)
        .ok()?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(&prefix)))
        .filter_map(|p| {
            let manifest = RunManifest::load(p.join("manifest.json")).ok()?;
            (manifest.config_digest == digest && manifest.seed == seed).then_some((manifest.completed, p))
        })
        .collect();
    candidates.sort();
    candidates.into_iter().next().map(|(_, p)| p)
}

fn cmd_run(global: &Global, mode: Option<&str>, fresh: bool) -> anyhow::Result<()> {
    let mut config = load_config(global)?;
    if let Some(mode) = mode {
        config.mode = Mode::parse(mode)?;
    }
    fail_on_problems(&config)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    let mut reports = Vec::new();
    for &seed in &config.seeds {
        let dir = match resumable_dir(&config, seed).filter(|_| !fresh) {
            Some(existing) => {
                log::info!("resuming {}", existing.display());
                existing
            }
            None => config.output_dir.join(run_dir_name(&config, seed, &format!("_{stamp}"))),
        };
        let report = Orchestrator::new(&config, seed, &dir)?.run()?;
        println!("{}", report.to_text());
        println!("report: {}", dir.join("report.json").display());
        reports.push(report);
    }
    let summary = FuseGenReport::from_seeds(reports)?;
    if summary.per_seed.len() > 1 {
        println!(
            "mean fused accuracy over {} seeds: {:.2}",
            summary.per_seed.len(),
            summary.mean_final_accuracy * 100.0
        );
    }
    Ok(())
}

fn run_dir_config(run_dir: &Path) -> anyhow::Result<RunConfig> {
    let path = run_dir.join("config.toml");
    if !path.exists() {
        bail!(Error::MissingFile(path));
    }
    Ok(RunConfig::load(&path, &[])?)
}

fn cmd_swa(run_dir: &Path, sign_mode: Option<&str>, epochs: Option<usize>) -> anyhow::Result<()> {
    let config = run_dir_config(run_dir)?;
    let mut swa = config.swa_config();
    if let Some(mode) = sign_mode {
        swa.sign_mode = match mode {
            "prose_intent" => SignMode::ProseIntent,
            "paper_literal" => SignMode::PaperLiteral,
            other => bail!(Error::Config(format!("unknown sign mode `{other}`"))),
        };
    }
    if let Some(e) = epochs {
        swa.epochs = e;
    }
    let template = config.template()?;
    let merged = SyntheticDataset::load_jsonl(run_dir.join("merged.jsonl"), &template.schema)?;
    let seed = config.seeds.first().copied().unwrap_or_default();
    let outcome = swa_train(&merged, &config.training_config(seed), &swa, &config.featurizer)?;

    let out = run_dir.join(format!("swa_{}_{}", swa.sign_mode.as_str(), swa.epochs));
    let paths = RunPaths::new(&out);
    std::fs::create_dir_all(paths.weights_dir()).with_context(|| format!("creating {}", out.display()))?;
    for (epoch, weights) in outcome.weight_trace.iter().enumerate() {
        write_weight_csv(&paths.weight_epoch(epoch), &merged, weights)?;
    }
    merged
        .with_weights(&outcome.final_state.weights)?
        .save_jsonl(out.join("merged.jsonl"))?;

    let testset_path = config.testset_path.clone().unwrap_or_else(|| run_dir.join("testset.jsonl"));
    let testset = load_testset(&testset_path, &template.schema)?;
    let accuracy = stm::evaluate(&outcome.model, &testset)?;
    println!(
        "beta {:.6} ({}), {} iterations, test accuracy {:.2}",
        outcome.beta,
        swa.sign_mode.as_str(),
        swa.epochs,
        accuracy * 100.0
    );
    println!("output: {}", out.display());
    Ok(())
}

fn cmd_cartography(
    run_dir: &Path,
    out: Option<PathBuf>,
    variability: Option<f64>,
    confidence: Option<f64>,
) -> anyhow::Result<()> {
    let config = run_dir_config(run_dir)?;
    let template = config.template()?;
    let merged = SyntheticDataset::load_jsonl(run_dir.join("merged.jsonl"), &template.schema)?;
    let dynamics_path = run_dir.join("dynamics.json");
    if !dynamics_path.exists() {
        bail!(Error::MissingFile(dynamics_path));
    }
    let dynamics: TrainingDynamics = serde_json::from_str(
        &std::fs::read_to_string(&dynamics_path).with_context(|| format!("reading {}", dynamics_path.display()))?,
    )?;
    let mut thresholds: Thresholds = config.cartography;
    if let Some(v) = variability {
        thresholds.variability = v;
    }
    if let Some(c) = confidence {
        thresholds.confidence = c;
    }
    let records = compute_cartography(&merged, &dynamics, &thresholds)?;
    let out = out.unwrap_or_else(|| run_dir.join("cartography.csv"));
    let histogram = export_plot_data(&records, &out)?;
    for (category, count) in histogram {
        println!("{category:<16} {count}");
    }
    println!("output: {}", out.display());
    Ok(())
}

fn cmd_ablate(global: &Global, modes: &[String], concurrent: bool) -> anyhow::Result<()> {
    let config = load_config(global)?;
    let modes: Vec<Mode> = if modes.is_empty() {
        Mode::ALL.to_vec()
    } else {
        modes.iter().map(|m| Mode::parse(m.trim())).collect::<Result<_, _>>()?
    };
    for &mode in &modes {
        fail_on_problems(&fusegen::evalharness::config_for_mode(&config, mode))?;
    }
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    let root = config.output_dir.join(format!("{}_ablation_{stamp}", config.task));
    let table = run_ablation_matrix(&config, &modes, &root, concurrent)?;
    std::fs::write(root.join("ablation.csv"), table.to_csv())?;
    std::fs::write(root.join("ablation.txt"), table.to_text())?;
    std::fs::write(root.join("ablation.json"), serde_json::to_string_pretty(&table)?)?;
    print!("{}", table.to_text());
    println!("output: {}", root.display());
    Ok(())
}

fn cmd_validate(global: &Global) -> anyhow::Result<()> {
    let config = load_config(global)?;
    fail_on_problems(&config)?;
    println!("ok: {} ({} backends, mode {})", config.task, config.backends.len(), config.mode.as_str());
    Ok(())
}
