use std::collections::BTreeMap;
use std::sync::Arc;

use avatar_core::model::{probe_radiance, ModelConfig, RenderMode};
use avatar_core::objectives::{stage2_loss, FeatureExtractor, LossWeights, Targets};
use avatar_core::params::ParamSet;
use avatar_core::skinning::PoseSequence;
use avatar_core::synth::{generate_sequence, SceneDataset, SceneSpec};
use avatar_core::trainer::{load_avatar, Adam, Checkpoint, Stage, TrainConfig, Trainer, CHECKPOINT_FILE};
use avatar_tensor::{Tape, Tensor};

fn scene() -> SceneDataset {
    let spec = SceneSpec { frames: 12, cameras: 2, samples: 120, image_size: 24, focal: 36.0, ..Default::default() };
    generate_sequence(&spec).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        stage1_iters: 60,
        stage2_iters: 30,
        seed: 3,
        loss: LossWeights { pairs: 8, ..Default::default() },
        model: ModelConfig {
            octaves: 3,
            encoder_width: 24,
            encoder_layers: 3,
            visibility_width: 12,
            skin_width: 12,
            window: 3,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn one(name: &str, v: Vec<f64>) -> (ParamSet, BTreeMap<String, Tensor>) {
    let mut p = ParamSet::new();
    p.insert(name, Tensor::matrix(1, v.len(), vec![0.0; v.len()]).unwrap());
    let mut g = BTreeMap::new();
    g.insert(name.to_string(), Tensor::matrix(1, v.len(), v).unwrap());
    (p, g)
}

#[test]
fn adam_first_step_is_lr() {
    // |Δ| = lr·|g|/(|g| + ε), within 1e-9 of lr once |g| > 0.01.
    for g in [3.0, -0.5, 0.02] {
        let (mut p, grads) = one("x", vec![g]);
        let mut adam = Adam::new(1e-3);
        assert!(adam.step(&mut p, &grads).unwrap());
        let dx = p.get("x").unwrap().data()[0];
        assert!((dx.abs() - 1e-3).abs() < 1e-9, "{g}: {dx}");
        assert_eq!(dx.signum(), -g.signum());
    }
}

#[test]
fn adam_zero_gradient_is_no_op() {
    let (mut p, grads) = one("x", vec![0.0, 0.0]);
    let mut adam = Adam::new(1e-3);
    adam.step(&mut p, &grads).unwrap();
    assert_eq!(p.get("x").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn adam_skips_non_finite() {
    let (mut p, grads) = one("x", vec![1.0, f64::NAN]);
    let mut adam = Adam::new(1e-3);
    assert!(!adam.step(&mut p, &grads).unwrap());
    assert_eq!(adam.t, 0);
    assert_eq!(p.get("x").unwrap().data(), &[0.0, 0.0]);
    let (_, bad) = one("x", vec![1.0]);
    assert!(adam.step(&mut p, &bad).is_err());
}

#[test]
fn adam_descends_a_bowl() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap());
    let mut adam = Adam::new(0.1);
    let f = |p: &ParamSet| p.get("x").unwrap().data().iter().map(|v| v * v).sum::<f64>();
    for _ in 0..2000 {
        let x = p.get("x").unwrap().clone();
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), x.map(|v| 2.0 * v));
        adam.step(&mut p, &g).unwrap();
    }
    assert!(f(&p) < 1e-3, "{}", f(&p));
}

#[test]
fn config_round_trip_and_validation() {
    let c = config();
    assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert!(TrainConfig::from_toml("learning_rate = 1.0").is_err());
    assert!(TrainConfig::from_toml("lr = -1.0").is_err());
    assert!(TrainConfig::from_toml("batch = 2").is_err());
    assert!(TrainConfig::from_toml("stage1_iters = 0").is_err());
    let d = TrainConfig::from_toml("").unwrap();
    assert_eq!(d.lr, 1e-3);
    assert_eq!(d.model.window, 10);
}

#[test]
fn stage2_needs_stage1() {
    let data = scene();
    let mut t = Trainer::new(&data, config()).unwrap();
    assert!(t.step_stage2(&data).is_err());
}

#[test]
fn stage1_freezes_appearance() {
    let data = scene();
    let mut t = Trainer::new(&data, config()).unwrap();
    let before = t.avatar.params.clone();
    for _ in 0..5 {
        t.step_stage1(&data).unwrap();
    }
    for (name, v) in before.iter() {
        let after = t.avatar.params.get(name).unwrap();
        let group = name.split('.').next().unwrap();
        let frozen = matches!(group, "material" | "visibility" | "probe");
        if frozen {
            assert_eq!(after, v, "{name} moved in stage 1");
        }
    }
    assert_ne!(before.get("geo.0.w"), t.avatar.params.get("geo.0.w"));
    assert_ne!(before.get("color.0.w"), t.avatar.params.get("color.0.w"));
}

#[test]
fn stage2_removes_color_and_trains_probe() {
    let data = scene();
    let mut t = Trainer::new(&data, config()).unwrap();
    t.step_stage1(&data).unwrap();
    let probe = t.avatar.params.get("probe").unwrap().clone();
    t.step_stage2(&data).unwrap();
    t.step_stage2(&data).unwrap();
    assert!(!t.avatar.has_color());
    assert_ne!(t.avatar.params.get("probe").unwrap(), &probe);

    let dir = tempfile::tempdir().unwrap();
    t.save(dir.path()).unwrap();
    let set = ParamSet::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert!(set.names().all(|n| !n.starts_with("color.") && !n.contains(".color.")));
    assert!(!load_avatar(&data, dir.path()).unwrap().has_color());
}

#[test]
fn probe_gradient_is_nonzero() {
    let data = scene();
    let cfg = config();
    let t = Trainer::new(&data, cfg.clone()).unwrap();
    let a = &t.avatar;
    let cam = data.training_camera();
    let r = data.record(4, cam);
    let gt = Targets::new(&r.rgb, &r.normal, &r.alpha).unwrap();
    let window = PoseSequence::window(&data.poses, 4, cfg.model.window).unwrap();
    let mut tape = Tape::new();
    let bound = a.params.bind(&mut tape, |n| n == "probe");
    let posed = a.pose(&mut tape, &bound, &window).unwrap();
    let radiance = probe_radiance(&mut tape, &bound).unwrap();
    let camera = Arc::new(data.cameras[cam].clone());
    let render = a.render(&mut tape, &posed, &camera, RenderMode::Pbr, Some(radiance)).unwrap();
    let terms = stage2_loss(&mut tape, render, &gt, &FeatureExtractor::new(0), None, &cfg.loss).unwrap();
    let grads = tape.backward(terms.total).unwrap();
    let g = bound.gradients(&tape, &grads);
    let norm: f64 = g["probe"].data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0 && norm.is_finite());
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let data = scene();
    let mut straight = Trainer::new(&data, config()).unwrap();
    for _ in 0..6 {
        straight.step_stage1(&data).unwrap();
    }
    let mut first = Trainer::new(&data, config()).unwrap();
    for _ in 0..3 {
        first.step_stage1(&data).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let ckpt = first.checkpoint();
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path, 1e-3).unwrap();
    assert_eq!(loaded, ckpt);

    let mut resumed = Trainer::resume(&data, config(), loaded).unwrap();
    for _ in 0..3 {
        resumed.step_stage1(&data).unwrap();
    }
    assert_eq!(resumed.avatar.params, straight.avatar.params);
    assert_eq!(resumed.curve[..], straight.curve[3..]);
}

#[test]
fn training_is_deterministic() {
    let data = scene();
    let run = || {
        let mut t = Trainer::new(&data, config()).unwrap();
        for _ in 0..5 {
            t.step_stage1(&data).unwrap();
        }
        for _ in 0..3 {
            t.step_stage2(&data).unwrap();
        }
        (t.curve.clone(), t.avatar.params.to_bytes())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.iter().filter(|r| r.stage == 2).all(|r| r.gc.is_some()));
}

#[test]
fn short_training_reduces_loss() {
    let data = scene();
    let cfg = config();
    let mut t = Trainer::new(&data, cfg.clone()).unwrap();
    t.run_stage(&data, Stage::One, None, |_| {}).unwrap();
    t.run_stage(&data, Stage::Two, None, |_| {}).unwrap();
    let mean = |stage: u8, range: std::ops::Range<usize>| {
        let v: Vec<f64> = t.curve.iter().filter(|r| r.stage == stage).skip(range.start).take(range.len()).map(|r| r.l1).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let n1 = cfg.stage1_iters;
    assert!(mean(1, n1 - 10..n1) < mean(1, 0..10), "stage 1 did not improve");
    let n2 = cfg.stage2_iters;
    assert!(mean(2, n2 - 10..n2) < mean(2, 0..10), "stage 2 did not improve");
    assert!(t.curve.iter().all(|r| !r.skipped && r.total.is_finite()));

    // Attributes stay inside their domains.
    let d = t.avatar.decode().unwrap();
    assert!(d.opacity.iter().all(|&o| o > 0.0 && o < 1.0));
    assert!(d.scale.iter().flatten().all(|&s| s > 0.0 && s <= t.avatar.scale_limit()));
    assert!(t.avatar.probe().unwrap().radiance().iter().flatten().all(|&v| v >= 0.0));
}
