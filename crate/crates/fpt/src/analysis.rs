//! Attention extraction, reservoir (cached-feature) training, depth sweeps,
//! and report emission.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::harness::{
    adam_step, count_correct, to_batch, AdamState, DataSource, EvalPoint,
    HarnessError, TrainConfig, TrainReport,
};
use crate::models::{Model, ModelError, ParamGroup, Targets};
use crate::policy::{apply_policy, count_params, orthogonalize, FreezePolicy, PolicyError};
use crate::tasks::{TaskInstance, TaskTarget};
use crate::tensor::tape::Tape;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("feature cache is stale: built for trunk {cached}, model has {current}")]
    StaleCache { cached: String, current: String },
    #[error("reservoir training requires classification targets")]
    NotClassification,
    #[error("analysis configuration error: {0}")]
    Config(String),
    #[error("writing {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One post-softmax attention matrix; `head` is None for the mean over
/// heads of a layer.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: Option<usize>,
    pub weights: Tensor,
}

/// Eval-mode attention weights of every layer and head on one instance,
/// plus a mean-over-heads record per layer.
pub fn extract_attention(
    model: &Model,
    instance: &TaskInstance,
) -> Result<Vec<AttentionRecord>, AnalysisError> {
    let batch = to_batch(std::slice::from_ref(instance))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = model.forward_pass(&batch, false, &mut rng, true)?;
    let n_layers = model.spec().n_layers;
    let mut records = Vec::new();
    for layer in 0..n_layers {
        let heads: Vec<&Tensor> = pass
            .attention
            .iter()
            .filter(|c| c.layer == layer)
            .map(|c| &c.weights)
            .collect();
        if heads.is_empty() {
            continue;
        }
        let mut mean = Tensor::zeros(heads[0].shape());
        for (h, w) in heads.iter().enumerate() {
            records.push(AttentionRecord {
                layer,
                head: Some(h),
                weights: (*w).clone(),
            });
            for (m, v) in mean.data_mut().iter_mut().zip(w.data()) {
                *m += v / heads.len() as f32;
            }
        }
        records.push(AttentionRecord {
            layer,
            head: None,
            weights: mean,
        });
    }
    Ok(records)
}

/// Final-position hidden states of a frozen trunk over a dataset, plus the
/// labels; fingerprinted against the trunk that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureCache {
    pub trunk_fingerprint: String,
    pub n_dim: usize,
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl FeatureCache {
    pub fn save(&self, path: &Path) -> Result<(), AnalysisError> {
        let body = serde_json::to_vec(self).expect("serializable");
        fs::write(path, body).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let body = fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&body)
            .map_err(|e| AnalysisError::Config(format!("{}: {e}", path.display())))
    }
}

/// Hash of every non-output tensor: the part of the model a feature cache
/// depends on.
pub fn trunk_fingerprint(model: &Model) -> String {
    let mut h = Sha256::new();
    for p in model.registry().iter() {
        let b = p.borrow();
        if b.group == ParamGroup::Output {
            continue;
        }
        h.update(b.name.as_bytes());
        for v in b.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

/// One eval-mode pass over the dataset, caching readout features.
pub fn build_feature_cache(
    model: &Model,
    instances: &[TaskInstance],
    batch_size: usize,
) -> Result<FeatureCache, AnalysisError> {
    let n_dim = model.spec().n_dim;
    let mut features = Vec::with_capacity(instances.len());
    let mut labels = Vec::with_capacity(instances.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in instances.chunks(batch_size.max(1)) {
        for inst in chunk {
            let TaskTarget::Class(label) = inst.target else {
                return Err(AnalysisError::NotClassification);
            };
            labels.push(label);
        }
        let batch = to_batch(chunk)?;
        let pass = model.forward_pass(&batch, false, &mut rng, false)?;
        let feats = pass.tape.to_tensor(pass.features);
        for row in feats.data().chunks(n_dim) {
            features.push(row.to_vec());
        }
    }
    Ok(FeatureCache {
        trunk_fingerprint: trunk_fingerprint(model),
        n_dim,
        features,
        labels,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReservoirReport {
    pub report: TrainReport,
    /// Wall-clock seconds of the cache-building pass (part of epoch 1).
    pub cache_build_secs: f64,
    /// Wall-clock seconds per training epoch over the cache; epoch 1
    /// excludes cache building (reported separately above).
    pub epoch_secs: Vec<f64>,
}

/// Output-only training against cached trunk features. Batch selection
/// matches [`crate::harness::train`] on a fixed dataset step for step, so
/// with the same seed the two produce identical head updates.
pub fn reservoir_train(
    model: &Model,
    train_cache: &FeatureCache,
    test_cache: &FeatureCache,
    cfg: &TrainConfig,
) -> Result<ReservoirReport, AnalysisError> {
    cfg.validate()?;
    let current = trunk_fingerprint(model);
    for cache in [train_cache, test_cache] {
        if cache.trunk_fingerprint != current {
            return Err(AnalysisError::StaleCache {
                cached: cache.trunk_fingerprint.clone(),
                current,
            });
        }
    }
    if train_cache.features.is_empty() {
        return Err(AnalysisError::Config("empty feature cache".into()));
    }
    let output_only = FreezePolicy::by_name("output_only")?;
    let part = apply_policy(model, &output_only)?;
    let counts = count_params(model, &output_only);
    let n = train_cache.features.len();
    let steps_per_epoch = (n as u64).div_ceil(cfg.batch_size as u64).max(1);

    let head_logits = |cache: &FeatureCache, idx: &[usize]| -> (Tape, crate::tensor::tape::Var, Vec<usize>) {
        let mut tape = Tape::new(true);
        let mut data = Vec::with_capacity(idx.len() * cache.n_dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&cache.features[i]);
            labels.push(cache.labels[i]);
        }
        let feats = tape.constant(idx.len(), cache.n_dim, data);
        let w = tape.param(&part.trainable[0]);
        let logits = tape.matmul(feats, w).expect("head shapes fixed");
        (tape, logits, labels)
    };

    let eval_cache = |cache: &FeatureCache| -> (f32, f32) {
        let take = cache.features.len().min(cfg.eval_set_size);
        let idx: Vec<usize> = (0..take).collect();
        let (mut tape, logits, labels) = head_logits(cache, &idx);
        let loss = tape
            .cross_entropy_logits(logits, &labels)
            .expect("matching rows");
        let loss_val = tape.value(loss)[0];
        let t = tape.to_tensor(logits);
        let (c, total) = count_correct(&t, &Targets::Classes(labels));
        (loss_val, c as f32 / total.max(1) as f32)
    };

    let start = Instant::now();
    let mut state = AdamState::default();
    let mut curve = Vec::new();
    let mut epoch_secs = Vec::new();
    let mut steps_run = 0u64;

    let push_eval = |curve: &mut Vec<EvalPoint>, step: u64| {
        let (train_loss, train_accuracy) = eval_cache(train_cache);
        let (test_loss, test_accuracy) = eval_cache(test_cache);
        curve.push(EvalPoint {
            step,
            train_loss,
            train_accuracy,
            test_loss,
            test_accuracy,
        });
    };

    push_eval(&mut curve, 0);
    let mut epoch_start = Instant::now();
    for step in 0..cfg.max_steps {
        // same index draw as harness::train on DataSource::Fixed
        let mut pick = ChaCha8Rng::seed_from_u64(0x5eed ^ step);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| pick.gen_range(0..n)).collect();
        let (mut tape, logits, labels) = head_logits(train_cache, &idx);
        let loss = tape.cross_entropy_logits(logits, &labels)?;
        let loss_val = tape.value(loss)[0];
        if !loss_val.is_finite() {
            return Err(HarnessError::Diverged { step }.into());
        }
        model.registry().zero_grads();
        tape.backward(loss)?;
        adam_step(&part.trainable, &mut state, cfg)?;
        steps_run = step + 1;
        if steps_run % cfg.eval_interval == 0 || steps_run == cfg.max_steps {
            push_eval(&mut curve, steps_run);
        }
        if steps_run % steps_per_epoch == 0 {
            epoch_secs.push(epoch_start.elapsed().as_secs_f64());
            epoch_start = Instant::now();
        }
    }
    if cfg.max_steps % steps_per_epoch != 0 {
        epoch_secs.push(epoch_start.elapsed().as_secs_f64());
    }

    let acc: Vec<f32> = curve.iter().map(|p| p.test_accuracy).collect();
    let steps: Vec<u64> = curve.iter().map(|p| p.step).collect();
    let s2c = crate::harness::steps_to_convergence(
        &acc,
        &steps,
        cfg.convergence_window,
        cfg.convergence_tol,
    );
    let last = curve.last().expect("initial eval");
    let fingerprint = {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&curve).expect("serializable"));
        format!("{:x}", h.finalize())
    };
    Ok(ReservoirReport {
        report: TrainReport {
            final_train_accuracy: last.train_accuracy,
            final_test_accuracy: last.test_accuracy,
            curve,
            steps_to_convergence: s2c,
            steps_run,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            trainable_params: counts.trainable,
            frozen_params: counts.frozen,
            fingerprint,
        },
        cache_build_secs: 0.0,
        epoch_secs,
    })
}

/// Builds caches for both splits and runs reservoir training, timing the
/// cache pass.
pub fn reservoir_run(
    model: &Model,
    train: &[TaskInstance],
    test: &[TaskInstance],
    cfg: &TrainConfig,
) -> Result<ReservoirReport, AnalysisError> {
    let t0 = Instant::now();
    let train_cache = build_feature_cache(model, train, cfg.batch_size)?;
    let test_cache = build_feature_cache(model, test, cfg.batch_size)?;
    let cache_build_secs = t0.elapsed().as_secs_f64();
    let mut out = reservoir_train(model, &train_cache, &test_cache, cfg)?;
    out.cache_build_secs = cache_build_secs;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct DepthPoint {
    pub depth: usize,
    pub report: TrainReport,
}

/// Trains truncated copies of `model` at each depth under `policy`.
/// When `reinit_input` is set the (shared) input layer is redrawn
/// orthogonally before each depth's run and should not be in the trainable
/// set, mirroring the truncation protocol.
pub fn depth_sweep(
    model: &Model,
    depths: &[usize],
    policy: &FreezePolicy,
    source: &DataSource,
    cfg: &TrainConfig,
    reinit_input: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DepthPoint>, AnalysisError> {
    let mut out = Vec::new();
    for &depth in depths {
        let truncated = model.truncate_layers(depth, 0.02, rng)?;
        if reinit_input {
            let reg = truncated.registry();
            let w = reg
                .get("input.w")
                .ok_or_else(|| AnalysisError::Config("no input.w parameter".into()))?;
            {
                let mut b = w.borrow_mut();
                let shape = b.value.shape().to_vec();
                b.value = Tensor::randn(&shape, 0.0, 0.02, rng);
                orthogonalize(&mut b.value)?;
            }
            if let Some(bias) = reg.get("input.b") {
                let mut b = bias.borrow_mut();
                let shape = b.value.shape().to_vec();
                b.value = Tensor::zeros(&shape);
            }
        }
        let report = crate::harness::train(&truncated, policy, source, cfg)?;
        out.push(DepthPoint { depth, report });
    }
    Ok(out)
}

// ----- report emission -----

/// Curves CSV: `step,split,metric,value`.
pub fn curves_csv(report: &TrainReport) -> String {
    let mut out = String::from("step,split,metric,value\n");
    for p in &report.curve {
        out.push_str(&format!("{},train,loss,{}\n", p.step, p.train_loss));
        out.push_str(&format!("{},train,accuracy,{}\n", p.step, p.train_accuracy));
        out.push_str(&format!("{},test,loss,{}\n", p.step, p.test_loss));
        out.push_str(&format!("{},test,accuracy,{}\n", p.step, p.test_accuracy));
    }
    out
}

/// Attention CSV: `layer,head,row,col,value`; the mean-over-heads record
/// uses `mean` in the head column.
pub fn attention_csv(records: &[AttentionRecord]) -> String {
    let mut out = String::from("layer,head,row,col,value\n");
    for r in records {
        let head = r
            .head
            .map(|h| h.to_string())
            .unwrap_or_else(|| "mean".into());
        let cols = r.weights.cols();
        for (i, v) in r.weights.data().iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.layer,
                head,
                i / cols,
                i % cols,
                v
            ));
        }
    }
    out
}

/// Ablation CSV, one row per named run, in input order.
pub fn ablation_csv(rows: &[(String, &TrainReport)]) -> String {
    let mut out = String::from(
        "name,trainable_params,frozen_params,final_train_accuracy,final_test_accuracy,steps_to_convergence\n",
    );
    for (name, r) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            name,
            r.trainable_params,
            r.frozen_params,
            r.final_train_accuracy,
            r.final_test_accuracy,
            r.steps_to_convergence
                .map(|s| s.to_string())
                .unwrap_or_else(|| "not_converged".into()),
        ));
    }
    out
}

/// Writes the standard artifact set for a batch of named runs: per-run
/// curve CSVs, one ablation table, and a JSON summary embedding the
/// resolved config.
pub fn emit_report(
    dir: &Path,
    resolved_config: &serde_json::Value,
    runs: &[(String, TrainReport)],
) -> Result<(), AnalysisError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, report) in runs {
        let path = dir.join(format!("curves_{name}.csv"));
        fs::write(&path, curves_csv(report)).map_err(io_err(&path))?;
    }
    let rows: Vec<(String, &TrainReport)> =
        runs.iter().map(|(n, r)| (n.clone(), r)).collect();
    let path = dir.join("ablation.csv");
    fs::write(&path, ablation_csv(&rows)).map_err(io_err(&path))?;
    let summary = serde_json::json!({
        "config": resolved_config,
        "runs": runs.iter().map(|(n, r)| {
            serde_json::json!({
                "name": n,
                "fingerprint": r.fingerprint,
                "final_train_accuracy": r.final_train_accuracy,
                "final_test_accuracy": r.final_test_accuracy,
                "steps_to_convergence": r.steps_to_convergence,
                "steps_run": r.steps_run,
                "trainable_params": r.trainable_params,
                "frozen_params": r.frozen_params,
                "wall_clock_secs": r.wall_clock_secs,
            })
        }).collect::<Vec<_>>(),
    });
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary).expect("serializable"))
        .map_err(io_err(&path))?;
    Ok(())
}
