//! Command-line front end: every experiment is a config file plus a
//! subcommand, and every run writes its artifacts (curve CSVs, ablation
//! table, JSON summary with the resolved config) under `--out`.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpt::analysis::{
    attention_csv, depth_sweep, emit_report, extract_attention, reservoir_run,
};
use fpt::checkpoint;
use fpt::config::{ConfigError, ExperimentConfig, InitKindName};
use fpt::harness::{self, DataSource, HarnessError, PretrainKind, TrainReport};
use fpt::models::{build_lstm, build_transformer, Model, ModelFamily};
use fpt::policy::{count_params, layer_statistics, layer_statistics_csv, FreezePolicy, InitKind, InitScheme};
use fpt::tasks::{
    load_image_flat_lra, load_image_patches, load_labeled_sequences, sample, Split,
    TaskConfig, TaskInstance,
};

#[derive(Parser)]
#[command(name = "fpt", about = "Frozen-trunk transformer experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (.json or .toml).
    #[arg(long)]
    config: PathBuf,
    /// Dotted overrides, e.g. --set train.max_steps=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = ExperimentConfig::load(&self.config, &self.set)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train under the configured freeze policy and write report + checkpoint.
    Train(Common),
    /// Pretrain all parameter groups on a surrogate objective.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Byte corpus for next-symbol pretraining; without it the config's
        /// task is trained in full as the surrogate.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Window length for corpus pretraining.
        #[arg(long, default_value_t = 32)]
        window: usize,
    },
    /// Train one fresh model per freeze policy and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated policy names.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "output_only,output_layernorm,output_layernorm_input,fpt,full"
        )]
        policies: Vec<String>,
        /// Run up to this many policies concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train truncated copies of the model at several depths.
    DepthSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated layer counts.
        #[arg(long, value_delimiter = ',')]
        depths: Vec<usize>,
        /// Redraw the input layer orthogonally at each depth.
        #[arg(long)]
        reinit_input: bool,
    },
    /// Head-only training over cached frozen-trunk features.
    Reservoir {
        #[command(flatten)]
        common: Common,
        /// Training examples to materialize for synthetic tasks.
        #[arg(long, default_value_t = 2000)]
        train_size: usize,
        /// Test examples to materialize for synthetic tasks.
        #[arg(long, default_value_t = 500)]
        test_size: usize,
    },
    /// Extract eval-mode attention weights on one instance.
    Attn {
        #[command(flatten)]
        common: Common,
        /// Which test instance to inspect.
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Read the model from a checkpoint instead of a fresh init.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-layer mean/std tables for a checkpoint's frozen tensors.
    Stats {
        /// Checkpoint to summarize.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Where to write the CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter accounting for the configured model and policy.
    Count(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let diverged = err
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(HarnessError::Diverged { .. })));
            ExitCode::from(if diverged { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(common) => cmd_train(&common.load()?),
        Command::Pretrain {
            common,
            corpus,
            window,
        } => cmd_pretrain(&common.load()?, corpus.as_deref(), window),
        Command::Ablate {
            common,
            policies,
            jobs,
        } => cmd_ablate(&common.load()?, &policies, jobs),
        Command::DepthSweep {
            common,
            depths,
            reinit_input,
        } => cmd_depth_sweep(&common.load()?, &depths, reinit_input),
        Command::Reservoir {
            common,
            train_size,
            test_size,
        } => cmd_reservoir(&common.load()?, train_size, test_size),
        Command::Attn {
            common,
            index,
            checkpoint,
        } => cmd_attn(&common.load()?, index, checkpoint.as_deref()),
        Command::Stats { checkpoint, out } => cmd_stats(&checkpoint, out.as_deref()),
        Command::Count(common) => cmd_count(&common.load()?),
    }
}

/// Builds the model described by the config, seeded by the config seed.
fn build_model(cfg: &ExperimentConfig) -> anyhow::Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scheme = init_scheme(cfg)?;
    let model = match cfg.model.family {
        ModelFamily::Transformer => build_transformer(&cfg.model, &scheme, &mut rng)?,
        ModelFamily::Lstm => build_lstm(&cfg.model, &scheme, &mut rng)?,
    };
    Ok(model)
}

fn init_scheme(cfg: &ExperimentConfig) -> anyhow::Result<InitScheme> {
    let source = match &cfg.init.source {
        Some(path) => Some(checkpoint::load(path)?),
        None => None,
    };
    Ok(InitScheme {
        kind: match cfg.init.kind {
            InitKindName::DefaultGaussian => InitKind::DefaultGaussian,
            InitKindName::OrthogonalInput => InitKind::OrthogonalInput,
            InitKindName::StatisticsOnly => InitKind::StatisticsOnly,
            InitKindName::FromCheckpoint => InitKind::FromCheckpoint,
        },
        sigma: cfg.init.sigma,
        source,
    })
}

/// Synthetic tasks stream from their seed; file-backed tasks are loaded once
/// and split deterministically (one in six held out, at least one each).
fn data_source(cfg: &ExperimentConfig) -> anyhow::Result<DataSource> {
    cfg.validate_task_model()?;
    let instances = match &cfg.task {
        TaskConfig::BitMemory { .. } | TaskConfig::BitXor { .. } | TaskConfig::ListOps { .. } => {
            return Ok(DataSource::Synthetic {
                cfg: cfg.task.clone(),
                base_seed: cfg.seed,
            });
        }
        TaskConfig::ImagePatches { images, labels } => {
            load_image_patches(images, labels.as_deref())?
        }
        TaskConfig::ImageFlatLra { images, labels } => {
            load_image_flat_lra(images, labels.as_deref())?
        }
        TaskConfig::LabeledSequences {
            path,
            alphabet,
            max_len,
            ..
        } => {
            let loaded = load_labeled_sequences(path, alphabet, *max_len)?;
            if loaded.skipped_too_long > 0 {
                eprintln!(
                    "note: skipped {} sequences longer than {max_len} tokens",
                    loaded.skipped_too_long
                );
            }
            loaded.instances
        }
    };
    let (train, test) = holdout_split(instances, cfg.seed)?;
    Ok(DataSource::Fixed { train, test })
}

fn holdout_split(
    mut instances: Vec<TaskInstance>,
    seed: u64,
) -> anyhow::Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    if instances.len() < 2 {
        anyhow::bail!("dataset has {} examples; need at least 2", instances.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5b11_7000);
    // Fisher-Yates so the holdout is unbiased regardless of file ordering.
    for i in (1..instances.len()).rev() {
        let j = rand::Rng::gen_range(&mut rng, 0..=i);
        instances.swap(i, j);
    }
    let n_test = (instances.len() / 6).max(1);
    let test = instances.split_off(instances.len() - n_test);
    Ok((instances, test))
}

fn write_summary(
    cfg: &ExperimentConfig,
    runs: &[(String, TrainReport)],
) -> anyhow::Result<()> {
    emit_report(&cfg.out, &cfg.resolved(), runs)?;
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let model = build_model(cfg)?;
    let policy = FreezePolicy::by_name(&cfg.policy)?;
    let source = data_source(cfg)?;
    let report = harness::train(&model, &policy, &source, &cfg.train)?;
    println!(
        "final test accuracy {:.4} after {} steps (convergence: {})",
        report.final_test_accuracy,
        report.steps_run,
        report
            .steps_to_convergence
            .map(|s| s.to_string())
            .unwrap_or_else(|| "not reached".into())
    );
    write_summary(cfg, &[(cfg.policy.clone(), report)])?;
    checkpoint::save(&model, &cfg.out.join("model.fptc"))?;
    Ok(())
}

fn cmd_pretrain(
    cfg: &ExperimentConfig,
    corpus: Option<&Path>,
    window: usize,
) -> anyhow::Result<()> {
    let model = build_model(cfg)?;
    let kind = match corpus {
        Some(path) => PretrainKind::CharLm {
            corpus: std::fs::read(path)?,
            window,
        },
        None => {
            cfg.validate_task_model()?;
            PretrainKind::BitMemory {
                cfg: cfg.task.clone(),
            }
        }
    };
    let (ckpt, report) = harness::pretrain_surrogate(&kind, &model, &cfg.train)?;
    println!(
        "pretraining reached test accuracy {:.4} in {} steps",
        report.final_test_accuracy, report.steps_run
    );
    write_summary(cfg, &[("pretrain".into(), report)])?;
    checkpoint::save_checkpoint(&ckpt, &cfg.out.join("pretrained.fptc"))?;
    Ok(())
}

fn cmd_ablate(cfg: &ExperimentConfig, policies: &[String], jobs: usize) -> anyhow::Result<()> {
    for name in policies {
        FreezePolicy::by_name(name)?;
    }
    let jobs = jobs.max(1);
    let mut runs: Vec<(String, TrainReport)> = Vec::with_capacity(policies.len());
    for chunk in policies.chunks(jobs) {
        let chunk_runs = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|name| {
                    scope.spawn(move || -> anyhow::Result<(String, TrainReport)> {
                        let model = build_model(cfg)?;
                        let policy = FreezePolicy::by_name(name)?;
                        let source = data_source(cfg)?;
                        let report = harness::train(&model, &policy, &source, &cfg.train)?;
                        Ok((name.clone(), report))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation worker panicked"))
                .collect::<anyhow::Result<Vec<_>>>()
        })?;
        runs.extend(chunk_runs);
    }
    for (name, report) in &runs {
        println!(
            "{name}: test accuracy {:.4} ({} trainable / {} frozen)",
            report.final_test_accuracy, report.trainable_params, report.frozen_params
        );
    }
    write_summary(cfg, &runs)
}

fn cmd_depth_sweep(
    cfg: &ExperimentConfig,
    depths: &[usize],
    reinit_input: bool,
) -> anyhow::Result<()> {
    if depths.is_empty() {
        anyhow::bail!("--depths needs at least one layer count");
    }
    let model = build_model(cfg)?;
    let policy = FreezePolicy::by_name(&cfg.policy)?;
    let source = data_source(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd3e7);
    let points = depth_sweep(
        &model,
        depths,
        &policy,
        &source,
        &cfg.train,
        reinit_input,
        &mut rng,
    )?;
    let runs: Vec<(String, TrainReport)> = points
        .into_iter()
        .map(|p| {
            println!(
                "depth {}: test accuracy {:.4}",
                p.depth, p.report.final_test_accuracy
            );
            (format!("depth{}", p.depth), p.report)
        })
        .collect();
    write_summary(cfg, &runs)
}

fn cmd_reservoir(
    cfg: &ExperimentConfig,
    train_size: usize,
    test_size: usize,
) -> anyhow::Result<()> {
    let model = build_model(cfg)?;
    let (train, test) = match data_source(cfg)? {
        DataSource::Fixed { train, test } => (train, test),
        DataSource::Synthetic { cfg: task, base_seed } => {
            let gen = |split, n: usize| -> anyhow::Result<Vec<TaskInstance>> {
                (0..n as u64)
                    .map(|i| Ok(sample(&task, base_seed, split, i)?))
                    .collect()
            };
            (gen(Split::Train, train_size)?, gen(Split::Test, test_size)?)
        }
    };
    let out = reservoir_run(&model, &train, &test, &cfg.train)?;
    println!(
        "reservoir test accuracy {:.4}; cache {:.2}s, epochs {:?}",
        out.report.final_test_accuracy, out.cache_build_secs, out.epoch_secs
    );
    std::fs::create_dir_all(&cfg.out)?;
    let summary = serde_json::json!({
        "config": cfg.resolved(),
        "cache_build_secs": out.cache_build_secs,
        "epoch_secs": out.epoch_secs,
        "report": out.report,
    });
    std::fs::write(
        cfg.out.join("reservoir.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn cmd_attn(
    cfg: &ExperimentConfig,
    index: u64,
    ckpt_path: Option<&Path>,
) -> anyhow::Result<()> {
    let model = match ckpt_path {
        Some(path) => checkpoint::load_model(path)?,
        None => build_model(cfg)?,
    };
    let instance = match data_source(cfg)? {
        DataSource::Synthetic { cfg: task, base_seed } => {
            sample(&task, base_seed, Split::Test, index)?
        }
        DataSource::Fixed { test, .. } => {
            let i = index as usize;
            test.into_iter().nth(i).ok_or_else(|| {
                anyhow::anyhow!("test split has no instance {i}")
            })?
        }
    };
    let records = extract_attention(&model, &instance)?;
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("attention.csv");
    std::fs::write(&path, attention_csv(&records))?;
    println!("wrote {} attention records to {}", records.len(), path.display());
    Ok(())
}

fn cmd_stats(ckpt_path: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let ckpt = checkpoint::load(ckpt_path)?;
    let csv = layer_statistics_csv(&layer_statistics(&ckpt));
    match out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_count(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let model = build_model(cfg)?;
    let policy = FreezePolicy::by_name(&cfg.policy)?;
    let counts = count_params(&model, &policy);
    for (group, n) in &counts.by_group {
        let status = if policy.trains(*group) { "trainable" } else { "frozen" };
        println!("{group:?}: {n} ({status})");
    }
    println!(
        "total {} = {} trainable + {} frozen ({:.4}% trainable)",
        counts.total,
        counts.trainable,
        counts.frozen,
        100.0 * counts.trainable as f64 / counts.total.max(1) as f64
    );
    Ok(())
}
