//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]`/`[FAIL]` line (run with `--nocapture` to see them on success).
//!
//! The tests share a mutex so timing-sensitive checks are not distorted by
//! parallel test threads.

use cafcn_core::data::{
    generate_dataset, load_dataset, pair_seed, save_map, PairSample, SyntheticSpec,
};
use cafcn_core::metrics::{evaluate_dataset, GroundTruthMask, SaliencyMap};
use cafcn_core::network::{
    checkpoint_bytes, forward_pair, infer_group_traced, NetworkConfig, NetworkParams,
};
use cafcn_core::selftest::{
    adjointness, attention_algebra, coattention_gradients, loss_closed_form, metric_oracles,
    network_gradients, primitive_gradients, SelfTestOptions,
};
use cafcn_core::tensor::Tensor;
use cafcn_core::training::{train, LossConfig, OptimizerState, TrainOptions};
use std::fs;
use std::path::Path;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn report(criterion: &str, passed: bool, detail: &str) {
    let tag = if passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {criterion}: {detail}");
    assert!(passed, "{criterion}: {detail}");
}

#[test]
fn criterion_gradient_correctness() {
    let _guard = serial();
    let start = Instant::now();
    let prim = primitive_gradients(&SelfTestOptions::default()).unwrap();
    let cam = coattention_gradients().unwrap();
    let net = network_gradients().unwrap();
    let elapsed = start.elapsed();
    let ok = prim.passed && cam.passed && net.passed && elapsed.as_secs_f64() < 30.0;
    report(
        "gradient-correctness",
        ok,
        &format!(
            "primitives ({}), co-attention ({}), network ({}) in {:.1}s",
            prim.detail, cam.detail, net.detail, elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_attention_algebra() {
    let _guard = serial();
    let result = attention_algebra().unwrap();
    report("attention-algebra", result.passed, &result.detail);
}

#[test]
fn criterion_adjointness() {
    let _guard = serial();
    let result = adjointness().unwrap();
    report("adjointness", result.passed, &format!("50 instances, {}", result.detail));
}

#[test]
fn criterion_metric_oracle_equivalence() {
    let _guard = serial();
    let result = metric_oracles().unwrap();
    report(
        "metric-oracle-equivalence",
        result.passed,
        &format!("100 random 8x8 pairs, {}", result.detail),
    );
}

#[test]
fn criterion_loss_closed_form() {
    let _guard = serial();
    let result = loss_closed_form().unwrap();
    report("loss-closed-form", result.passed, &result.detail);
}

fn acceptance_spec() -> SyntheticSpec {
    SyntheticSpec { seed: 20260810, ..SyntheticSpec::default() }
}

fn acceptance_dataset() -> Vec<PairSample> {
    let spec = acceptance_spec();
    (0..240)
        .map(|i| {
            let mut s = spec.clone();
            s.seed = pair_seed(spec.seed, i);
            cafcn_core::data::generate_pair(&s).unwrap()
        })
        .collect()
}

fn train_acceptance_model(dataset: &[PairSample]) -> (NetworkParams, f64, f64) {
    let config = NetworkConfig::default();
    let mut params = NetworkParams::init(&config, 12345).unwrap();
    let mut state = OptimizerState::new(&params);
    state.learning_rate = 0.5;
    state.weight_decay = 5e-4;
    state.decay_every_epochs = 10_000;
    let opts = TrainOptions { epochs: 15, batch_size: 4, seed: 99, ..Default::default() };
    let log = train(&mut params, &dataset[..200], &LossConfig::default(), &mut state, &opts, None)
        .unwrap();
    (params, log.first().unwrap().mean_loss, log.last().unwrap().mean_loss)
}

/// Synthetic training and the merging property share one trained model.
#[test]
fn criterion_synthetic_training_and_merging() {
    let _guard = serial();
    let start = Instant::now();
    let dataset = acceptance_dataset();
    let (params, first_loss, last_loss) = train_acceptance_model(&dataset);

    let eval_set = &dataset[200..240];
    let mut pairs: Vec<(SaliencyMap, GroundTruthMask)> = Vec::new();
    let mut maps = Vec::new();
    for sample in eval_set {
        let (p1, p2) = forward_pair(&sample.image1, &sample.image2, &params).unwrap();
        pairs.push((p1.clone(), sample.mask1.clone()));
        pairs.push((p2.clone(), sample.mask2.clone()));
        maps.push((p1, p2));
    }
    let report_metrics = evaluate_dataset(&pairs).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let loss_halved = last_loss < 0.5 * first_loss;
    let ok = loss_halved
        && report_metrics.f_beta >= 0.80
        && report_metrics.mae <= 0.10
        && elapsed <= 600.0;
    report(
        "synthetic-training",
        ok,
        &format!(
            "loss {first_loss:.4} -> {last_loss:.4}, held-out max-F_beta {:.4} (>= 0.80), MAE {:.4} (<= 0.10), {elapsed:.0}s (<= 600s)",
            report_metrics.f_beta, report_metrics.mae
        ),
    );

    // Merging property: distractors absent from the partner image must stay
    // dark relative to the common object.
    let size = acceptance_spec().image_size;
    let mut applicable = 0usize;
    let mut suppressed = 0usize;
    for (sample, (p1, p2)) in eval_set.iter().zip(&maps) {
        let mut pair_applicable = false;
        let mut pair_ok = true;
        for (own_placements, other_placements, map, mask) in [
            (&sample.placements1, &sample.placements2, p1, &sample.mask1),
            (&sample.placements2, &sample.placements1, p2, &sample.mask2),
        ] {
            let other_colors: Vec<[f64; 3]> = other_placements
                .iter()
                .filter(|p| !p.is_common)
                .map(|p| p.color)
                .collect();
            let common_mean = region_mean(map, mask.values().iter().map(|&v| v == 1));
            for distractor in own_placements.iter().filter(|p| !p.is_common) {
                if other_colors.contains(&distractor.color) {
                    continue;
                }
                let footprint = distractor.footprint(size);
                let region: Vec<bool> = footprint
                    .iter()
                    .zip(mask.values())
                    .map(|(&inside, &m)| inside && m == 0)
                    .collect();
                if region.iter().filter(|&&b| b).count() == 0 {
                    continue;
                }
                pair_applicable = true;
                let distractor_mean = region_mean(map, region.into_iter());
                if distractor_mean > 0.5 * common_mean {
                    pair_ok = false;
                }
            }
        }
        if pair_applicable {
            applicable += 1;
            if pair_ok {
                suppressed += 1;
            }
        }
    }
    let fraction = suppressed as f64 / applicable.max(1) as f64;
    let ok = applicable >= 20 && fraction >= 0.80;
    report(
        "merging-property",
        ok,
        &format!(
            "absent-distractor saliency <= 0.5x common in {suppressed}/{applicable} applicable test pairs ({:.0}%)",
            fraction * 100.0
        ),
    );
}

fn region_mean(map: &SaliencyMap, mask: impl Iterator<Item = bool>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, inside) in map.values().iter().zip(mask) {
        if inside {
            sum += v;
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

#[test]
fn criterion_group_inference_linearity() {
    let _guard = serial();
    let config = NetworkConfig::default();
    let mut params = NetworkParams::init(&config, 777).unwrap();
    params.attention.gamma.values_mut()[0] = 0.25;
    let spec = acceptance_spec();
    let images: Vec<Tensor> = (0..16)
        .map(|i| {
            let mut s = spec.clone();
            s.seed = pair_seed(31337, i);
            cafcn_core::data::generate_pair(&s).unwrap().image1
        })
        .collect();

    // Structural O(n): one encoder and one decoder pass per image.
    let (_, stats) = infer_group_traced(&images, &params).unwrap();
    let structural = stats.encoder_invocations == 16 && stats.decoder_invocations == 16;

    // Pairwise agreement at n = 2.
    let (maps, _) = infer_group_traced(&images[..2], &params).unwrap();
    let (p1, p2) = forward_pair(&images[0], &images[1], &params).unwrap();
    let agree = maps[0]
        .values()
        .iter()
        .zip(p1.values())
        .chain(maps[1].values().iter().zip(p2.values()))
        .all(|(a, b)| (a - b).abs() < 1e-9);

    // Wall clock: doubling the group size must stay well under quadratic.
    let time_group = |n: usize| -> f64 {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                infer_group_traced(&images[..n], &params).unwrap();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let t8 = time_group(8);
    let t16 = time_group(16);
    let ratio = t16 / t8;
    let ok = structural && agree && ratio <= 2.5;
    report(
        "group-inference-linearity",
        ok,
        &format!(
            "encoder passes = n, n=2 matches the pair path, t(16)/t(8) = {ratio:.2} (<= 2.5)"
        ),
    );
}

fn run_pipeline(root: &Path) {
    let spec = SyntheticSpec { seed: 4242, ..SyntheticSpec::default() };
    let data_dir = root.join("dataset");
    generate_dataset(&spec, 10, &data_dir).unwrap();
    let dataset = load_dataset(&data_dir).unwrap();

    let config = NetworkConfig::default();
    let mut params = NetworkParams::init(&config, 7).unwrap();
    let mut state = OptimizerState::new(&params);
    state.learning_rate = 0.3;
    let opts = TrainOptions {
        epochs: 2,
        batch_size: 4,
        seed: 5,
        checkpoint_dir: Some(root.join("run")),
        start_epoch: 0,
    };
    let mut log = Vec::new();
    train(&mut params, &dataset[..8], &LossConfig::default(), &mut state, &opts, Some(&mut log))
        .unwrap();
    fs::write(root.join("run/train.log"), log).unwrap();

    let pred_dir = root.join("preds");
    fs::create_dir_all(&pred_dir).unwrap();
    let mut pairs = Vec::new();
    for (i, sample) in dataset[8..].iter().enumerate() {
        let (p1, p2) = forward_pair(&sample.image1, &sample.image2, &params).unwrap();
        save_map(&p1, &pred_dir.join(format!("pair_{i:05}_1.pgm"))).unwrap();
        save_map(&p2, &pred_dir.join(format!("pair_{i:05}_2.pgm"))).unwrap();
        pairs.push((p1, sample.mask1.clone()));
        pairs.push((p2, sample.mask2.clone()));
    }
    let report = evaluate_dataset(&pairs).unwrap();
    fs::write(root.join("report.txt"), report.to_key_values()).unwrap();
    fs::write(root.join("curves.csv"), report.curves_csv()).unwrap();
    fs::write(root.join("final.cafcn"), checkpoint_bytes(&params)).unwrap();
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_determinism() {
    let _guard = serial();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&a);
    run_pipeline(&b);
    let ta = tree_bytes(&a);
    let tb = tree_bytes(&b);
    let same = ta == tb;
    report(
        "determinism",
        same && !ta.is_empty(),
        &format!(
            "generate/train/infer/eval reproduced {} artifacts byte-identically",
            ta.len()
        ),
    );
}
