use super::*;
use crate::models::{build_model, ArchitectureKind, ModelConfig};
use proptest::prelude::{prop_assert, proptest};
use rand::Rng;

fn tiny(kind: ArchitectureKind, seed: u64) -> Model {
    let c = ModelConfig {
        encoded_dim: 6,
        hidden_size: 6,
        right_hidden_size: 6,
        ..ModelConfig::new(kind, 3, 2).with_seed(seed)
    };
    build_model(&c).unwrap()
}

fn random_clips(n: usize, seed: u64, labels: impl Fn(usize) -> usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips = (0..n)
        .map(|i| {
            let t = rng.random_range(3..7);
            let mut m = |d: usize| Matrix::new(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let face = m(3);
            let context = m(2);
            ClipSample::new(format!("c{i}"), face, context, labels(i)).unwrap()
        })
        .collect();
    Dataset::new(clips).unwrap()
}

fn untimed(logs: &[EpochLog]) -> Vec<EpochLog> {
    logs.iter().map(|l| EpochLog { wall_ms: 0, ..l.clone() }).collect()
}

#[test]
fn cross_entropy_examples() {
    let (l, g) = cross_entropy(&[0.0; 8], 3).unwrap();
    assert!((l - 8f64.ln()).abs() < 1e-15);
    assert!((g[3] + 7.0 / 8.0).abs() < 1e-15 && (g[0] - 1.0 / 8.0).abs() < 1e-15);

    let mut peaked = [0.0; 8];
    peaked[5] = 50.0;
    assert!(cross_entropy(&peaked, 5).unwrap().0 < 1e-20);

    let (l, g) = cross_entropy(&[1.0, 0.0], 0).unwrap();
    assert!((l - 0.313_261_687_518_222_8).abs() < 1e-15);
    assert!((g[0] + 0.268_941_421_369_995_1).abs() < 1e-15);
    assert!((g[1] - 0.268_941_421_369_995_1).abs() < 1e-15);

    assert!(matches!(cross_entropy(&[1.0, 0.0], 2), Err(Error::Argument(_))));
    assert!(matches!(cross_entropy(&[f64::NAN, 0.0], 0), Err(Error::Numeric(_))));
    // large logits do not overflow
    let (l, _) = cross_entropy(&[1000.0, 0.0], 1).unwrap();
    assert!((l - 1000.0).abs() < 1e-9);
}

/// Five-point central difference, truncation O(h^4).
fn five_point(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let at = |d: f64| {
        let mut y = x.to_vec();
        y[i] += d;
        f(&y)
    };
    (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h)
}

proptest! {
    #[test]
    fn cross_entropy_gradient_matches_differences(seed in 0u64..1000, k in 2usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let label = rng.random_range(0..k);
        let (_, g) = cross_entropy(&logits, label).unwrap();
        for i in 0..k {
            let n = five_point(|x| cross_entropy(x, label).unwrap().0, &logits, i, 1e-3);
            let rel = crate::tensor::relative_error(g[i], n);
            prop_assert!(rel < 1e-8, "coordinate {i}: {} vs {n} ({rel})", g[i]);
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(seed in 0u64..1000, k in 1usize..9, scale in 0.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..k).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let (l, g) = cross_entropy(&logits, rng.random_range(0..k)).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut p = Vector::new(vec![0.5, -2.0, 3.0]).unwrap();
    let before = p.clone();
    let g = Vector::zeros(3);
    let mut a = AdamState::new(3, 0.1);
    for _ in 0..100 {
        a.apply(&mut p, &g).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(a.step, 100);
}

#[test]
fn adam_first_step_is_signed_lr() {
    let mut p = Vector::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let g = Vector::new(vec![3.0, -0.01, 1e-3, -250.0]).unwrap();
    let mut a = AdamState::new(4, 0.01);
    a.apply(&mut p, &g).unwrap();
    for (x, gi) in p.iter().zip(g.iter()) {
        assert!((x - (1.0 - 0.01 * gi.signum())).abs() < 1e-7, "{x}");
    }
    assert!(a.v.iter().all(|&v| v >= 0.0));
}

#[test]
fn adam_without_momentum_is_sign_descent() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = Vector::zeros(5);
    let mut a = AdamState::new(5, 0.5);
    a.beta1 = 0.0;
    a.beta2 = 0.0;
    for _ in 0..4 {
        let g = Vector::new((0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let before = p.clone();
        a.apply(&mut p, &g).unwrap();
        for i in 0..5 {
            assert!((before[i] - p[i] - 0.5 * g[i].signum()).abs() < 1e-7);
        }
    }
}

#[test]
fn adam_rejects_mismatched_shapes() {
    let mut p = Vector::zeros(3);
    let mut a = AdamState::new(3, 0.1);
    assert!(matches!(a.apply(&mut p, &Vector::zeros(4)), Err(Error::Contract(_))));
    let mut a = AdamState::new(2, 0.1);
    assert!(matches!(a.apply(&mut p, &Vector::zeros(3)), Err(Error::Contract(_))));
    assert_eq!(a.step, 0);
}

fn batch_loss(model: &Model, data: &Dataset) -> f64 {
    data.clips
        .iter()
        .map(|c| {
            let (p, _) = forward_clip(model, &c.face, &c.context).unwrap();
            cross_entropy(&p.logits, c.label).unwrap().0
        })
        .sum::<f64>()
        / data.len() as f64
}

#[test]
fn one_small_step_does_not_increase_the_batch_loss() {
    for (i, kind) in ArchitectureKind::ALL.into_iter().enumerate() {
        for seed in 0..3 {
            let mut model = tiny(kind, seed);
            let data = random_clips(4, 100 + seed + 10 * i as u64, |j| j % 8);
            let before = batch_loss(&model, &data);
            let config = TrainConfig {
                learning_rate: 1e-6,
                batch_size: 4,
                epochs: 1,
                ..TrainConfig::default()
            };
            train(&mut model, &data, &config, None).unwrap();
            let after = batch_loss(&model, &data);
            assert!(after <= before + 1e-12, "{kind} seed {seed}: {before} -> {after}");
        }
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut model = tiny(ArchitectureKind::CacaA, 1);
    let before = model.clone();
    let data = random_clips(1, 2, |_| 4);
    let config = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        ..TrainConfig::default()
    };
    let logs = train(&mut model, &data, &config, None).unwrap();
    assert_eq!(model, before);
    assert_eq!(logs.len(), 1);
    assert!(logs[0].train_loss > 0.0 && logs[0].valid_acc.is_none());
}

#[test]
fn same_seed_same_logs() {
    let data = random_clips(20, 3, |j| j % 8);
    let valid = random_clips(6, 4, |j| j % 8);
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 6,
        epochs: 3,
        subsample_stride: 2,
        seed: 9,
        clip_grad_norm: Some(1.0),
    };
    let run = || {
        let mut m = tiny(ArchitectureKind::CacaB, 5);
        let logs = train(&mut m, &data, &config, Some(&valid)).unwrap();
        (untimed(&logs), m)
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    assert_eq!(la, lb);
    assert_eq!(ma, mb);
    assert!(la[2].valid_map.is_some());
    let other = TrainConfig { seed: 10, ..config.clone() };
    let mut m = tiny(ArchitectureKind::CacaB, 5);
    assert_ne!(untimed(&train(&mut m, &data, &other, Some(&valid)).unwrap()), la);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let data = random_clips(10, 5, |j| j % 4);
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 3,
        epochs: 4,
        subsample_stride: 2,
        seed: 1,
        clip_grad_norm: None,
    };
    let mut straight = TrainState::new(tiny(ArchitectureKind::ParallelRnn, 2), &config);
    let full = train_epochs(&mut straight, &data, None, &config, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    let mut first = TrainState::new(tiny(ArchitectureKind::ParallelRnn, 2), &config);
    let half = TrainConfig { epochs: 2, ..config.clone() };
    let mut logs = train_epochs(&mut first, &data, None, &half, |_, s| save_train_state(s, half.seed, &path)).unwrap();
    let (mut resumed, seed) = load_train_state(&path).unwrap();
    assert_eq!(seed, 1);
    assert_eq!(resumed, first);
    logs.extend(train_epochs(&mut resumed, &data, None, &config, |_, _| Ok(())).unwrap());
    assert_eq!(untimed(&logs), untimed(&full));
    assert_eq!(resumed, straight);
}

#[test]
fn train_state_rejects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.bin");
    let state = TrainState::new(tiny(ArchitectureKind::FaceRnn, 0), &TrainConfig::default());
    save_train_state(&state, 3, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_train_state(&path), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_train_state(&path), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn training_rejects_bad_inputs() {
    let mut model = tiny(ArchitectureKind::CacaA, 0);
    let config = TrainConfig::default();
    let empty = Dataset { clips: vec![] };
    assert!(matches!(train(&mut model, &empty, &config, None), Err(Error::Data(_))));
    let wide = Dataset::new(vec![ClipSample::new("w", Matrix::zeros(3, 5), Matrix::zeros(3, 2), 0).unwrap()]).unwrap();
    assert!(matches!(train(&mut model, &wide, &config, None), Err(Error::Data(_))));
    let ok = random_clips(2, 0, |_| 0);
    let bad = TrainConfig { batch_size: 0, ..config };
    assert!(matches!(train(&mut model, &ok, &bad, None), Err(Error::Config(_))));
}

#[test]
fn tiny_fusion_model_memorizes_eight_clips() {
    let data = random_clips(8, 6, |j| j);
    let mut model = tiny(ArchitectureKind::CacaA, 3);
    let config = TrainConfig {
        learning_rate: 1e-2,
        batch_size: 8,
        epochs: 300,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &config, None).unwrap();
    assert_eq!(evaluate(&model, &data, 1).unwrap().accuracy, 1.0);
}

#[test]
fn evaluation_is_repeatable_and_starts_at_frame_zero() {
    let data = random_clips(12, 7, |j| j % 8);
    let model = tiny(ArchitectureKind::ConcatenatedRnn, 4);
    let a = evaluate(&model, &data, 3).unwrap();
    assert_eq!(a, evaluate(&model, &data, 3).unwrap());
    assert_eq!(a.confusion.total(), 12);
    let sub = Dataset::new(data.clips.iter().map(|c| subsample(c, 3, 0).unwrap()).collect()).unwrap();
    assert_eq!(evaluate(&model, &sub, 1).unwrap(), a);
}
