// scratch tuning harness; not part of the test suite
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fpt::harness::{train, DataSource, TrainConfig};
use fpt::models::{build_transformer, ModelSpec, ReadoutMode};
use fpt::policy::{FreezePolicy, InitScheme};
use fpt::tasks::{sample, Split, TaskConfig, TaskTarget};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "xor-step" => xor_step_time(),
        "listops-dist" => listops_dist(),
        "prof" => prof(),
        "lstm" => lstm_tune(),
        "bitmem" => bitmem_tune(),
        "pre-xor" => pre_xor_tune(),
        "listops1" => listops1_tune(),
        other => eprintln!("unknown: {other}"),
    }
}

fn xor_step_time() {
    let mut spec = ModelSpec::transformer(4, 128, 4);
    spec.max_len = 10;
    spec.d_in = 1;
    spec.d_out = 1;
    spec.readout_mode = ReadoutMode::PerToken;
    spec.dropout_rate = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = build_transformer(&spec, &InitScheme::default(), &mut rng).unwrap();
    let source = DataSource::Synthetic {
        cfg: TaskConfig::BitXor { bits: 5 },
        base_seed: 0,
    };
    let mut cfg = TrainConfig::new(50);
    cfg.batch_size = 16;
    cfg.eval_interval = 50;
    cfg.eval_set_size = 32;
    let t0 = Instant::now();
    let report = train(&model, &FreezePolicy::by_name("fpt").unwrap(), &source, &cfg).unwrap();
    println!(
        "50 steps in {:.2}s ({:.0} ms/step), test acc {:.3}",
        t0.elapsed().as_secs_f64(),
        t0.elapsed().as_millis() as f64 / 50.0,
        report.final_test_accuracy
    );
}

fn listops_dist() {
    for (depth, args, len) in [(2usize, 3usize, 24usize), (2, 4, 32), (3, 3, 32), (3, 4, 40)] {
        let cfg = TaskConfig::ListOps { max_depth: depth, max_args: args, max_len: len };
        let mut counts = [0usize; 10];
        for i in 0..5000u64 {
            let inst = sample(&cfg, 7, Split::Train, i).unwrap();
            if let TaskTarget::Class(c) = inst.target {
                counts[c] += 1;
            }
        }
        let maxc = counts.iter().max().unwrap();
        println!(
            "depth {depth} args {args} len {len}: majority {:.1}% dist {:?}",
            100.0 * *maxc as f64 / 5000.0,
            counts
        );
    }
}

// appended: micro-profile of forward/backward
#[allow(dead_code)]
fn prof() {
    use fpt::harness::{batch_loss, to_batch};
    let mut spec = ModelSpec::transformer(4, 128, 4);
    spec.max_len = 10;
    spec.d_in = 1;
    spec.d_out = 1;
    spec.readout_mode = ReadoutMode::PerToken;
    spec.dropout_rate = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = build_transformer(&spec, &InitScheme::default(), &mut rng).unwrap();
    let cfg = TaskConfig::BitXor { bits: 5 };
    let insts: Vec<_> = (0..16).map(|i| sample(&cfg, 0, Split::Train, i).unwrap()).collect();
    let batch = to_batch(&insts).unwrap();

    let t0 = Instant::now();
    for _ in 0..10 {
        let _ = model.forward_pass(&batch, false, &mut rng, false).unwrap();
    }
    println!("forward only: {:.1} ms", t0.elapsed().as_millis() as f64 / 10.0);

    let t0 = Instant::now();
    for _ in 0..10 {
        let mut pass = model.forward_pass(&batch, true, &mut rng, false).unwrap();
        let loss = batch_loss(&mut pass.tape, pass.logits, &batch.targets).unwrap();
        pass.tape.backward(loss).unwrap();
    }
    println!("forward+backward: {:.1} ms", t0.elapsed().as_millis() as f64 / 10.0);
}

// appended: synthetic glyph IDX generation + frozen-LSTM variant tuning

fn write_idx(dir: &std::path::Path, name: &str, images: &[Vec<u8>], labels: &[u8], side: usize) -> (std::path::PathBuf, std::path::PathBuf) {
    let ipath = dir.join(format!("{name}-images.idx"));
    let lpath = dir.join(format!("{name}-labels.idx"));
    let mut ib: Vec<u8> = Vec::new();
    ib.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    ib.extend_from_slice(&(images.len() as u32).to_be_bytes());
    ib.extend_from_slice(&(side as u32).to_be_bytes());
    ib.extend_from_slice(&(side as u32).to_be_bytes());
    for img in images {
        ib.extend_from_slice(img);
    }
    std::fs::write(&ipath, ib).unwrap();
    let mut lb: Vec<u8> = Vec::new();
    lb.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    std::fs::write(&lpath, lb).unwrap();
    (ipath, lpath)
}

/// label d -> 6x6 blob near a class-specific location on a 28x28 canvas,
/// with +-2 pixel jitter and light noise
fn glyph(d: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    use rand::Rng;
    let side = 28usize;
    let mut img = vec![0u8; side * side];
    for p in img.iter_mut() {
        *p = rng.gen_range(0..30);
    }
    let (gr, gc) = (d / 5, d % 5); // 2 x 5 grid of locations
    let base_r = 3 + gr * 12 + rng.gen_range(0..5) as usize;
    let base_c = 2 + gc * 5 + rng.gen_range(0..3) as usize;
    for r in 0..6 {
        for c in 0..6 {
            img[(base_r + r) * side + (base_c + c)] = 220 + rng.gen_range(0..35);
        }
    }
    img
}

fn make_glyph_sets(dir: &std::path::Path, n_train: usize, n_test: usize) -> (Vec<fpt::tasks::TaskInstance>, Vec<fpt::tasks::TaskInstance>) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut gen = |n: usize, tag: &str| {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let d = rng.gen_range(0..10usize);
            images.push(glyph(d, &mut rng));
            labels.push(d as u8);
        }
        let (ip, lp) = write_idx(dir, tag, &images, &labels, 28);
        fpt::tasks::load_image_patches(&ip, Some(&lp)).unwrap()
    };
    (gen(n_train, "train"), gen(n_test, "test"))
}

fn lstm_tune() {
    let dir = std::env::temp_dir().join("fpt-lstm-tune");
    std::fs::create_dir_all(&dir).unwrap();
    let (train_set, test_set) = make_glyph_sets(&dir, 2000, 1000);
    let source = DataSource::Fixed { train: train_set, test: test_set };

    let steps: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(600);
    let n_dim: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let layers: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(12);
    for (name, residual, positional) in [
        ("standard", false, false),
        ("residual", true, false),
        ("res+pos", true, true),
    ] {
        let mut spec = ModelSpec::lstm(layers, n_dim);
        spec.d_in = 16;
        spec.d_out = 10;
        spec.max_len = 64;
        spec.dropout_rate = 0.0;
        spec.lstm_residual = residual;
        spec.lstm_positional = positional;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = fpt::models::build_lstm(&spec, &InitScheme::default(), &mut rng).unwrap();
        let mut cfg = TrainConfig::new(steps);
        cfg.batch_size = 8;
        cfg.eval_interval = steps;
        cfg.eval_set_size = 500;
        let t0 = Instant::now();
        let report = train(&model, &FreezePolicy::by_name("fpt").unwrap(), &source, &cfg).unwrap();
        println!(
            "{name}: test acc {:.3} ({:.0}s)",
            report.final_test_accuracy,
            t0.elapsed().as_secs_f64()
        );
    }
}

// appended: bit-memory desk-scale tuning (criterion: trained >=99%, frozen fpt >=75%)
fn bitmem_tune() {
    let task = TaskConfig::BitMemory { n_strings: 5, string_len: 20, chunk: 20, mask_prob: 0.5 };
    let steps: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    for (name, policy, layers, dim, heads) in [
        ("full 2L/64", "full", 2usize, 64usize, 4usize),
        ("fpt 2L/64", "fpt", 2, 64, 4),
        ("fpt 3L/128", "fpt", 3, 128, 4),
    ] {
        let mut spec = ModelSpec::transformer(layers, dim, heads);
        spec.d_in = 20;
        spec.d_out = 20;
        spec.max_len = 8;
        spec.readout_mode = ReadoutMode::PerToken;
        spec.dropout_rate = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = build_transformer(&spec, &InitScheme::default(), &mut rng).unwrap();
        let source = DataSource::Synthetic { cfg: task.clone(), base_seed: 17 };
        let mut cfg = TrainConfig::new(steps);
        cfg.batch_size = 16;
        cfg.eval_interval = 250;
        cfg.eval_set_size = 128;
        cfg.early_stop_accuracy = Some(0.995);
        let t0 = Instant::now();
        let report = train(&model, &FreezePolicy::by_name(policy).unwrap(), &source, &cfg).unwrap();
        println!(
            "{name}: bit acc {:.3} after {} steps ({:.0}s)",
            report.final_test_accuracy, report.steps_run, t0.elapsed().as_secs_f64()
        );
    }
}

// appended: pretraining-transfer and shallow listops probes
fn pre_xor_tune() {
    use fpt::checkpoint::Checkpoint;
    use fpt::harness::{pretrain_surrogate, PretrainKind};
    use fpt::policy::InitKind;

    let steps: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(6000);
    let mut spec = ModelSpec::transformer(2, 64, 4);
    spec.d_in = 1;
    spec.d_out = 1;
    spec.max_len = 16;
    spec.readout_mode = ReadoutMode::PerToken;
    spec.dropout_rate = 0.0;

    let xor = TaskConfig::BitXor { bits: 4 };
    let memory = TaskConfig::BitMemory { n_strings: 3, string_len: 4, chunk: 1, mask_prob: 0.5 };

    for seed in [1u64, 2, 3] {
        // surrogate pretraining at the same interface
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let pre_model = build_transformer(&spec, &InitScheme::default(), &mut rng).unwrap();
        let mut pre_cfg = TrainConfig::new(1500);
        pre_cfg.batch_size = 16;
        pre_cfg.eval_interval = 250;
        pre_cfg.eval_set_size = 64;
        pre_cfg.seed = seed;
        pre_cfg.early_stop_accuracy = Some(0.99);
        let (ckpt, pre_report) =
            pretrain_surrogate(&PretrainKind::BitMemory { cfg: memory.clone() }, &pre_model, &pre_cfg).unwrap();
        println!("seed {seed}: pretrain acc {:.3} in {} steps", pre_report.final_test_accuracy, pre_report.steps_run);

        let mut xor_cfg = TrainConfig::new(steps);
        xor_cfg.batch_size = 16;
        xor_cfg.eval_interval = 100;
        xor_cfg.eval_set_size = 128;
        xor_cfg.seed = seed;
        xor_cfg.early_stop_accuracy = Some(0.99);

        for (name, init) in [
            ("random", InitScheme::default()),
            ("pretrained", InitScheme { kind: InitKind::FromCheckpoint, sigma: 0.02, source: Some(Checkpoint { spec: ckpt.spec.clone(), tensors: ckpt.tensors.clone() }) }),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = build_transformer(&spec, &init, &mut rng).unwrap();
            let source = DataSource::Synthetic { cfg: xor.clone(), base_seed: 7 * seed };
            let report = train(&model, &FreezePolicy::by_name("fpt").unwrap(), &source, &xor_cfg).unwrap();
            println!(
                "  {name}: acc {:.3}, steps_run {}, convergence {:?}",
                report.final_test_accuracy, report.steps_run, report.steps_to_convergence
            );
        }
    }
}

fn listops1_tune() {
    let steps: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(800);
    let mut spec = ModelSpec::transformer(4, 64, 4);
    spec.d_in = 15;
    spec.d_out = 10;
    spec.max_len = 24;
    spec.dropout_rate = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = build_transformer(&spec, &InitScheme::default(), &mut rng).unwrap();
    let source = DataSource::Synthetic {
        cfg: TaskConfig::ListOps { max_depth: 2, max_args: 3, max_len: 24 },
        base_seed: 23,
    };
    let mut cfg = TrainConfig::new(steps);
    cfg.batch_size = 16;
    cfg.eval_interval = steps;
    cfg.eval_set_size = 500;
    let mut sweep_rng = ChaCha8Rng::seed_from_u64(99);
    let points = fpt::analysis::depth_sweep(
        &model, &[1, 4], &FreezePolicy::by_name("fpt").unwrap(), &source, &cfg, false, &mut sweep_rng,
    ).unwrap();
    for p in points {
        println!("depth {}: acc {:.3}", p.depth, p.report.final_test_accuracy);
    }
}
