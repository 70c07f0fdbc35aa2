//! Training contracts on small synthetic problems.

use dualprec_core::data::{DataSplits, Dataset, Split, Standardizer};
use dualprec_core::dual::{
    run_baseline, DualModel, EpochRecord, LayerMask, PhasePlan, Precision, Trainable, Trainer,
};
use dualprec_core::nn::{Architecture, Layer};
use dualprec_core::pack::pack;
use dualprec_core::quant::truncate_indices;
use dualprec_core::{QuantSpec, ScaleRule, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ten classes, each a fixed random prototype plus noise.
fn synthetic(n: usize, c: usize, side: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = c * side * side;
    let prototypes: Vec<f32> = {
        let mut p = ChaCha8Rng::seed_from_u64(999);
        (0..dim * 10).map(|_| if p.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
    };
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        let proto = &prototypes[label * dim..(label + 1) * dim];
        images.extend(proto.iter().map(|&v| v + rng.random_range(-0.8..0.8)));
        labels.push(label as u8);
    }
    Dataset::new(Tensor::new(vec![n, c, side, side], images).unwrap(), labels, 10, Split::Train).unwrap()
}

fn splits(c: usize, side: usize) -> DataSplits {
    DataSplits::prepare(synthetic(300, c, side, 1), synthetic(200, c, side, 2), 0, 0)
}

fn config(arch: &str, phase1: usize, total: usize) -> TrainConfig {
    TrainConfig {
        arch: arch.parse().unwrap(),
        batch_size: 50,
        plan: PhasePlan {
            phase1_epochs: phase1,
            total_epochs: total,
            lr_phase1_odd: 3e-3,
            lr_phase1_even: 1e-3,
            ..PhasePlan::default()
        },
        ..TrainConfig::default()
    }
}

fn trainer(cfg: &TrainConfig) -> Trainer {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Trainer::with_model(cfg, DualModel::from_config(cfg, &mut rng).unwrap())
}

fn latents(m: &DualModel) -> Vec<Vec<f32>> {
    m.duals.iter().flatten().map(|d| d.lambda_latent.clone()).collect()
}

fn masters(m: &DualModel) -> Vec<Vec<f32>> {
    m.duals.iter().flatten().map(|d| d.master.clone()).collect()
}

fn assert_shared_bits_coupled(m: &DualModel) {
    for d in m.derive_all().unwrap().into_iter().flatten() {
        let (low, bits) = truncate_indices(&d.high).unwrap();
        assert_eq!(low.indices(), d.low.indices());
        assert_eq!(bits, d.upscale);
    }
}

#[test]
fn epoch_parity_and_phase_two_freeze() {
    let cfg = config("miniconvbn:1x8-10", 2, 4);
    let data = splits(1, 8);
    let mut t = trainer(&cfg);
    assert_eq!(t.schedule(1).1, Trainable::Shared);
    assert_eq!(t.schedule(2).1, Trainable::SharedAndUpscale);
    assert_eq!(t.schedule(3).1, Trainable::Upscale);

    let before = t.model().clone();
    let r1 = t.run_epoch(&data).unwrap();
    assert_eq!(r1.trainable, Trainable::Shared);
    assert_eq!(latents(t.model()), latents(&before));
    assert_ne!(masters(t.model()), masters(&before));
    assert_ne!(t.model().net, before.net);
    assert_shared_bits_coupled(t.model());

    let before = t.model().clone();
    let r2 = t.run_epoch(&data).unwrap();
    assert_eq!(r2.trainable, Trainable::SharedAndUpscale);
    assert_ne!(latents(t.model()), latents(&before));
    assert_ne!(masters(t.model()), masters(&before));
    for d in t.model().duals.iter().flatten() {
        let m = d.lambda_latent.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((m - d.init_max_abs).abs() <= d.init_max_abs * 1e-6);
    }
    assert_shared_bits_coupled(t.model());

    let low_bytes = pack(&t.model().low_snapshot().unwrap()).unwrap();
    let low_acc = r2.low_accuracy;
    let before = t.model().clone();
    for _ in 0..2 {
        let r = t.run_epoch(&data).unwrap();
        assert_eq!(r.phase, 2);
        assert_eq!(r.low_accuracy, low_acc);
        assert_eq!(masters(t.model()), masters(&before));
        assert_eq!(t.model().net, before.net, "biases and batch-norm state are frozen");
        assert_shared_bits_coupled(t.model());
    }
    assert_ne!(latents(t.model()), latents(&before));
    assert_eq!(pack(&t.model().low_snapshot().unwrap()).unwrap(), low_bytes);
}

#[test]
fn phase_one_runs_update_batch_norm_statistics() {
    let cfg = config("miniconvbn:1x8-10", 1, 1);
    let mut t = trainer(&cfg);
    let before = t.model().net.clone();
    t.run_epoch(&splits(1, 8)).unwrap();
    let Layer::BatchNorm(a) = &before.layers()[1] else { panic!() };
    let Layer::BatchNorm(b) = &t.model().net.layers()[1] else { panic!() };
    assert_ne!(a.running_mean, b.running_mean);
}

#[test]
fn flipping_an_upscale_bit_changes_the_combined_loss() {
    let cfg = config("mlp:64-16-10", 2, 2);
    let data = splits(1, 8);
    let (x, y) = data.train.gather(&(0..50).collect::<Vec<_>>());
    let t = trainer(&cfg);
    let base = t.combined_loss(&x, &y).unwrap();
    let mut flipped = t.model().clone();
    let d = flipped.duals[3].as_mut().unwrap();
    d.lambda_latent[0] = -d.lambda_latent[0];
    let t2 = Trainer::with_model(&cfg, flipped);
    assert_ne!(t2.combined_loss(&x, &y).unwrap(), base);
}

#[test]
fn training_learns_and_history_round_trips() {
    let cfg = config("mlp:64-32-10", 4, 8);
    let data = splits(1, 8);
    let mut t = trainer(&cfg);
    let history: Vec<EpochRecord> = (0..8).map(|_| t.run_epoch(&data).unwrap()).collect();
    let last = history.last().unwrap();
    assert!(last.low_accuracy > 0.3, "{}", last.low_accuracy);
    assert!(last.high_accuracy > 0.3, "{}", last.high_accuracy);
    assert_eq!(history.iter().map(|r| r.epoch).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    let log: String = history.iter().map(|r| r.to_json_line() + "\n").collect();
    assert!(log.contains("\"trainable\":\"shared_and_upscale\""));
    assert_eq!(EpochRecord::parse_history(&log).unwrap(), history);
}

#[test]
fn identical_seeds_give_identical_models() {
    let cfg = config("mlp:64-16-10", 1, 2);
    let data = splits(1, 8);
    let run = || {
        let mut t = trainer(&cfg);
        let h: Vec<String> = (0..2).map(|_| t.run_epoch(&data).unwrap().to_json_line()).collect();
        (pack(&t.model().snapshot().unwrap()).unwrap(), h)
    };
    assert_eq!(run(), run());
    let mut other = cfg.clone();
    other.seed = 2;
    let mut t = trainer(&other);
    t.run_epoch(&data).unwrap();
    t.run_epoch(&data).unwrap();
    assert_ne!(pack(&t.model().snapshot().unwrap()).unwrap(), run().0);
}

#[test]
fn baseline_trains_low_mode_only() {
    let cfg = config("mlp:64-16-10", 1, 1);
    let data = splits(1, 8);
    let (model, history) = run_baseline(&cfg, 3, 3, 3e-3, &data, |_| Ok(())).unwrap();
    assert_eq!(history.len(), 3);
    assert!(history.iter().all(|r| r.bits == 3));
    assert!(history[2].accuracy > 0.3);
    let snap = model.low_snapshot().unwrap();
    assert_eq!(snap.spec, QuantSpec::new(3, ScaleRule::LevelCount).unwrap());
    let (x, _) = data.test.gather(&[0, 1]);
    assert!(snap.forward(&x, Precision::High).is_err());
}

#[test]
fn unquantized_layers_stay_full_precision() {
    let mut cfg = config("mlp:64-16-10", 1, 1);
    cfg.quantize = LayerMask::Only(vec![1]);
    let t = trainer(&cfg);
    let snap = t.model().snapshot().unwrap();
    assert_eq!(snap.quantized_count(), 1);
    assert!(snap.layers[3].is_some() && snap.layers[1].is_none());
    assert_eq!(Architecture::Mlp { dims: vec![64, 16, 10] }, snap.arch);
    let _ = Standardizer::fit(&synthetic(10, 1, 8, 3));
}

