use std::f64::consts::PI;

use seld_autodiff::{ParamStore, Tensor};
use seld_core::features::{FeatureConfig, FeatureExtractor};
use seld_core::model::{ModelConfig, Pooling, Variant};
use seld_core::synth::{make_dataset, DatasetConfig};
use seld_core::target::SegmentConfig;
use seld_core::train::{evaluate_model, lr_at, train, Adam, Checkpoint, Dataset, RunConfig, TrainConfig, METRICS_HEADER};

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig::default();
    let s = 2000;
    assert_eq!(lr_at(0, s, &cfg), 0.0);
    assert_eq!(lr_at(100, s, &cfg), 1e-3);
    assert_eq!(lr_at(1000, s, &cfg), 1e-3);
    assert!((lr_at(s, s, &cfg) - 1e-5).abs() < 1e-9);
    assert!((lr_at(s + 50, s, &cfg) - 1e-5).abs() < 1e-9);
}

#[test]
fn schedule_is_continuous_and_monotone_by_phase() {
    let cfg = TrainConfig::default();
    for s in [40, 333, 2000] {
        let lrs: Vec<f64> = (0..=s).map(|i| lr_at(i, s, &cfg)).collect();
        let ramp_steps = cfg.ramp_frac * s as f64;
        let decay_steps = cfg.decay_frac * s as f64;
        let slope = (cfg.lr_peak / ramp_steps).max(PI * (1.0 - cfg.final_lr_ratio) * cfg.lr_peak / (2.0 * decay_steps));
        for (i, w) in lrs.windows(2).enumerate() {
            assert!((w[1] - w[0]).abs() <= slope + 1e-15, "S={s} step {i}");
            let t = (i + 1) as f64;
            if t <= ramp_steps {
                assert!(w[1] >= w[0]);
            } else if t > (cfg.ramp_frac + cfg.hold_frac) * s as f64 {
                assert!(w[1] <= w[0]);
            }
        }
        assert!(lrs.iter().all(|&v| (0.0..=cfg.lr_peak).contains(&v)));
    }
}

fn single(value: Vec<f32>) -> (ParamStore<f32>, seld_autodiff::ParamId) {
    let mut store = ParamStore::new();
    let n = value.len();
    let id = store.add("x", Tensor::new(vec![n], value).unwrap(), true).unwrap();
    (store, id)
}

#[test]
fn adam_first_step_moves_by_lr() {
    let (mut store, id) = single(vec![1.0, -2.0, 0.5]);
    store.get_mut(id).grad = Some(Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).unwrap());
    let mut adam = Adam::default();
    adam.step(&mut store, 0.01);
    let v = store.value(id).data();
    assert!((v[0] - 0.99).abs() < 1e-6);
    assert!((v[1] + 1.99).abs() < 1e-6);
    assert!((v[2] - 0.49).abs() < 1e-5);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_ignores_zero_gradients_and_frozen_parameters() {
    let (mut store, id) = single(vec![1.0, 2.0]);
    let frozen = store.add("f", Tensor::full(vec![2], 3.0), false).unwrap();
    store.get_mut(id).grad = Some(Tensor::zeros(vec![2]));
    store.get_mut(frozen).grad = Some(Tensor::ones(vec![2]));
    let mut adam = Adam::default();
    adam.step(&mut store, 0.1);
    assert_eq!(store.value(id).data(), [1.0, 2.0]);
    assert_eq!(store.value(frozen).data(), [3.0, 3.0]);
}

#[test]
fn adam_decreases_a_quadratic() {
    let (mut store, id) = single(vec![0.8, -0.6, 0.3]);
    let mut adam = Adam::default();
    let f = |s: &ParamStore<f32>| s.value(id).data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
    let mut last = f(&store);
    for _ in 0..10 {
        let g = store.value(id).map(|v| 2.0 * v);
        store.get_mut(id).grad = Some(g);
        adam.step(&mut store, 0.05);
        let now = f(&store);
        assert!(now < last);
        last = now;
    }
}

fn fast_config() -> RunConfig {
    RunConfig {
        model: ModelConfig {
            conv_filters: 16,
            heads: 2,
            fc_hidden: 16,
            ..ModelConfig::with(Variant::Dst, false, Pooling::Front)
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 3,
            val_fraction: 0.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn fixture() -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), &DatasetConfig { n_clips: 3, seed: 5, duration_s: 3.0, ..Default::default() }).unwrap();
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let data = Dataset::load(dir.path(), &ex, 13, SegmentConfig::default()).unwrap();
    (dir, data)
}

#[test]
fn seeded_runs_are_identical_and_follow_the_schedule() {
    let (_dir, data) = fixture();
    let cfg = fast_config();
    let a = train(&cfg, &data, None, &mut |_| {}).unwrap();
    let b = train(&cfg, &data, None, &mut |_| {}).unwrap();
    assert_eq!(a.record.metrics_csv(), b.record.metrics_csv());
    let la: Vec<u64> = a.record.epochs.iter().map(|e| e.loss.to_bits()).collect();
    let lb: Vec<u64> = b.record.epochs.iter().map(|e| e.loss.to_bits()).collect();
    assert_eq!(la, lb);
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }

    let s = a.record.lr_trace.len();
    assert_eq!(s, cfg.train.epochs * data.n_segments().div_ceil(cfg.train.batch_size));
    for (i, &lr) in a.record.lr_trace.iter().enumerate() {
        assert_eq!(lr, lr_at(i + 1, s, &cfg.train));
    }
    assert!(a.record.initial_loss.is_finite() && a.record.initial_loss > 0.0);

    let other = RunConfig { train: TrainConfig { seed: 4, ..cfg.train.clone() }, ..cfg };
    let c = train(&other, &data, None, &mut |_| {}).unwrap();
    assert_ne!(c.record.epochs[0].loss, a.record.epochs[0].loss);
}

#[test]
fn run_directory_checkpoint_reloads_to_identical_metrics() {
    let (_dir, data) = fixture();
    let cfg = fast_config();
    let out = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let run = train(&cfg, &data, Some(out.path()), &mut |l| lines.push(l.to_string())).unwrap();
    assert!(lines[0].starts_with("model parameters: "));
    for f in ["config.toml", "log.txt", "metrics.csv", "checkpoints/last.ckpt", "checkpoints/best.ckpt"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(out.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, run.record.metrics_csv());
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), cfg.train.epochs + 1);
    assert_eq!(RunConfig::load(out.path().join("config.toml")).unwrap(), cfg);

    let (model, ck) = Checkpoint::load(out.path().join("checkpoints/last.ckpt")).unwrap();
    assert_eq!(ck.meta.epoch, cfg.train.epochs);
    assert_eq!(ck.meta.history.len(), cfg.train.epochs);
    let clips: Vec<_> = data.clips.iter().collect();
    let (before, pred_a) = evaluate_model(&run.model, &run.store, &clips, &cfg.metrics).unwrap();
    let (after, pred_b) = evaluate_model(&model, &ck.store, &clips, &cfg.metrics).unwrap();
    assert_eq!(before, after);
    assert_eq!(pred_a, pred_b);
    assert_eq!(Some(before.seld_score), run.record.epochs.last().unwrap().metrics.as_ref().map(|m| m.seld_score));
}

#[test]
fn run_config_round_trips_through_toml() {
    let cfg = fast_config();
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    assert!(RunConfig::from_toml("[train]\nramp_frac = 0.5\n").is_err());
    assert!(RunConfig::from_toml("[train]\nunknown = 1\n").is_err());
    assert!(RunConfig::from_toml("[model]\nn_mels = 32\n").is_err());
}

#[test]
fn missing_data_directory_is_a_config_error() {
    let ex = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let err = Dataset::load("/nonexistent/seld", &ex, 13, SegmentConfig::default()).unwrap_err();
    assert!(err.to_string().contains("does not exist"));
}
