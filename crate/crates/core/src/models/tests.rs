use super::*;
use crate::attention::attend;
use crate::rnn::lstm_forward;
use crate::tensor::{dot, finite_difference_gradcheck};
use rand::Rng;

fn tiny(kind: ArchitectureKind) -> ModelConfig {
    ModelConfig {
        kind,
        face_feature_dim: 3,
        context_feature_dim: 3,
        encoded_dim: 4,
        hidden_size: 4,
        right_hidden_size: 4,
        left_layers: 2,
        right_layers: 1,
        num_classes: 5,
        seed: 11,
    }
}

fn randomized(config: &ModelConfig, seed: u64) -> Model {
    let mut m = build_model(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    m.params
        .visit_mut(&mut |b| b.iter_mut().for_each(|x| *x = rng.random_range(-0.8..0.8)));
    m
}

fn stream(rng: &mut ChaCha8Rng, steps: usize, dim: usize) -> Matrix {
    Matrix::new(steps, dim, (0..steps * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn lstm_count(input: usize, hidden: usize) -> usize {
    4 * (hidden * (input + hidden) + hidden)
}

#[test]
fn kind_names_round_trip() {
    for k in ArchitectureKind::ALL {
        assert_eq!(k.slug().parse::<ArchitectureKind>().unwrap(), k);
        assert_eq!(ArchitectureKind::from_code(k.code()), Some(k));
    }
    assert!("caca-c".parse::<ArchitectureKind>().is_err());
    assert_eq!("CACA_A".parse::<ArchitectureKind>().unwrap(), ArchitectureKind::CacaA);
}

#[test]
fn cascade_rejects_unequal_hidden_sizes() {
    let mut c = ModelConfig::new(ArchitectureKind::CacaA, 16, 16);
    c.right_hidden_size = 64;
    match build_model(&c) {
        Err(Error::Config(msg)) => assert!(msg.contains("dot"), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
    // Parallel fusion does not need equal sizes.
    c.kind = ArchitectureKind::ParallelRnn;
    assert!(build_model(&c).is_ok());
}

#[test]
fn zero_dimensions_are_rejected() {
    let mut c = tiny(ArchitectureKind::FaceRnn);
    c.encoded_dim = 0;
    assert!(matches!(build_model(&c), Err(Error::Config(_))));
    let mut c = tiny(ArchitectureKind::ParallelRnn);
    c.right_layers = 0;
    assert!(build_model(&c).is_err());
}

#[test]
fn same_seed_same_parameters() {
    for k in ArchitectureKind::ALL {
        let c = tiny(k);
        assert_eq!(build_model(&c).unwrap(), build_model(&c).unwrap());
        let other = build_model(&c.clone().with_seed(12)).unwrap();
        assert_ne!(build_model(&c).unwrap().params, other.params);
    }
}

#[test]
fn closed_form_parameter_counts() {
    assert_eq!(lstm_count(128, 256) + lstm_count(256, 256), 919_552);
    assert_eq!(lstm_count(128, 128), 131_584);

    let face = build_model(&ModelConfig::comparison(ArchitectureKind::FaceRnn, 64, 32)).unwrap();
    assert_eq!(face.params.left.num_params(), 919_552);
    assert_eq!(face.params.classifier.num_params(), 256 * 8 + 8);
    assert_eq!(count_params(&face), (64 * 128 + 128) + 919_552 + 256 * 8 + 8);

    let caca = build_model(&ModelConfig::new(ArchitectureKind::CacaA, 64, 32)).unwrap();
    assert_eq!(caca.params.classifier.num_params(), 1032);
    assert_eq!(caca.params.left.num_params(), 2 * 131_584);
    let expected = (64 * 128 + 128) + (32 * 128 + 128) + 2 * 131_584 + 131_584 + 128 * 256 + 1032;
    assert_eq!(count_params(&caca), expected);

    let par = build_model(&ModelConfig::comparison(ArchitectureKind::ParallelRnn, 64, 32)).unwrap();
    let expected = (64 * 128 + 128) + (32 * 128 + 128) + 4 * 131_584 + (256 * 128 + 128) + 1032;
    assert_eq!(count_params(&par), expected);

    let cat = build_model(&ModelConfig::comparison(ArchitectureKind::ConcatenatedRnn, 64, 32)).unwrap();
    let expected = (64 * 128 + 128) + (32 * 128 + 128) + lstm_count(256, 256) + lstm_count(256, 256) + 256 * 8 + 8;
    assert_eq!(count_params(&cat), expected);
}

#[test]
fn lstm_count_scales_quadratically() {
    let mut c = ModelConfig::new(ArchitectureKind::FaceRnn, 16, 16);
    c.encoded_dim = 512;
    let small = build_model(&c).unwrap().params.left.num_params() as f64;
    c.hidden_size = 256;
    let big = build_model(&c).unwrap().params.left.num_params() as f64;
    let ratio = big / small;
    assert!(ratio > 2.5 && ratio < 4.0, "{ratio}");
}

#[test]
fn cascade_variants_have_equal_counts() {
    for (f, c) in [(16, 16), (40, 9)] {
        let a = build_model(&ModelConfig::new(ArchitectureKind::CacaA, f, c)).unwrap();
        let b = build_model(&ModelConfig::new(ArchitectureKind::CacaB, f, c)).unwrap();
        assert_eq!(count_params(&a), count_params(&b));
    }
}

#[test]
fn forward_rejects_bad_streams() {
    let m = build_model(&tiny(ArchitectureKind::CacaA)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = forward_clip(&m, &stream(&mut rng, 3, 3), &stream(&mut rng, 4, 3));
    assert!(matches!(r, Err(Error::Data(_))));
    let r = forward_clip(&m, &stream(&mut rng, 3, 2), &stream(&mut rng, 3, 3));
    assert!(matches!(r, Err(Error::Dimension(_))));
}

#[test]
fn prediction_is_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in ArchitectureKind::ALL {
        let m = randomized(&tiny(k), 3);
        let (p, _) = forward_clip(&m, &stream(&mut rng, 4, 3), &stream(&mut rng, 4, 3)).unwrap();
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.predicted_class, argmax(&p.logits));
        // argmax is shift invariant
        let shifted: Vec<f64> = p.logits.iter().map(|x| x + 123.0).collect();
        assert_eq!(argmax(&shifted), p.predicted_class);
    }
}

#[test]
fn single_stream_kinds_ignore_the_other_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (k, face_used) in [(ArchitectureKind::FaceRnn, true), (ArchitectureKind::ContextRnn, false)] {
        let m = randomized(&tiny(k), 5);
        let face = stream(&mut rng, 5, 3);
        let ctx = stream(&mut rng, 5, 3);
        let other = stream(&mut rng, 5, 3);
        let (a, _) = forward_clip(&m, &face, &ctx).unwrap();
        let (b, _) = if face_used {
            forward_clip(&m, &face, &other).unwrap()
        } else {
            forward_clip(&m, &other, &ctx).unwrap()
        };
        assert_eq!(a, b);
        // The unused stream's width is not checked either.
        let wide = stream(&mut rng, 5, 7);
        let r = if face_used { forward_clip(&m, &face, &wide) } else { forward_clip(&m, &wide, &ctx) };
        assert_eq!(r.unwrap().0, a);
    }
}

#[test]
fn concatenated_with_a_zero_stream_is_not_the_single_stream_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let face = stream(&mut rng, 4, 3);
    let zeros = Matrix::zeros(4, 3);
    let cat = randomized(&tiny(ArchitectureKind::ConcatenatedRnn), 7);
    let single = randomized(&tiny(ArchitectureKind::FaceRnn), 7);
    let (a, _) = forward_clip(&cat, &face, &zeros).unwrap();
    let (b, _) = forward_clip(&single, &face, &zeros).unwrap();
    assert_ne!(a.logits, b.logits);
}

#[test]
fn zero_context_degeneracy() {
    let mut m = randomized(&tiny(ArchitectureKind::CacaA), 8);
    m.params.left.fill_zero();
    if let Some(e) = m.params.context_encoder.as_mut() {
        e.fill_zero();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let face = stream(&mut rng, 5, 3);
    let ctx = Matrix::zeros(5, 3);
    let (_, tape) = forward_clip(&m, &face, &ctx).unwrap();
    let att = tape.final_attention().unwrap();
    assert!(att.alignment.iter().all(|&a| (a - 0.2).abs() < 1e-15));
    assert!(att.context.iter().all(|&c| c == 0.0));
    let rows = attention_alignments(&m, &face, &ctx).unwrap().unwrap();
    assert!(rows.as_slice().iter().all(|&a| (a - 0.2).abs() < 1e-15));

    // The prediction depends on the face stream alone.
    let (p1, _) = forward_clip(&m, &face, &ctx).unwrap();
    let (p2, _) = forward_clip(&m, &face, &Matrix::zeros(5, 3)).unwrap();
    assert_eq!(p1, p2);
}

#[test]
fn single_step_attention_is_trivial() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for k in [ArchitectureKind::CacaA, ArchitectureKind::CacaB] {
        let m = randomized(&tiny(k), 11);
        let (_, tape) = forward_clip(&m, &stream(&mut rng, 1, 3), &stream(&mut rng, 1, 3)).unwrap();
        assert_eq!(tape.final_attention().unwrap().alignment.as_slice(), &[1.0]);
    }
}

/// CacaA written out by hand from the public building blocks.
fn caca_a_oracle(m: &Model, face: &Matrix, ctx: &Matrix) -> Vec<f64> {
    let p = &m.params;
    let enc = |e: &Linear, x: &Matrix| {
        let rows: Vec<Vec<f64>> = x.row_iter().map(|r| e.apply(r)).collect();
        Matrix::from_rows(&rows).unwrap()
    };
    let left = lstm_forward(&p.left, &enc(p.context_encoder.as_ref().unwrap(), ctx), &p.left.zero_states()).unwrap();
    let right_stack = p.right.as_ref().unwrap();
    let init = vec![left.final_states[0].clone()];
    let right = lstm_forward(right_stack, &enc(p.face_encoder.as_ref().unwrap(), face), &init).unwrap();
    let t = face.rows() - 1;
    let (att, _) = attend(right.top_hidden.row(t), &left.top_hidden, p.attention.as_ref().unwrap()).unwrap();
    p.classifier.apply(&att.combined)
}

#[test]
fn caca_a_matches_composition_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..20 {
        let m = randomized(&tiny(ArchitectureKind::CacaA), 100 + i);
        let steps = rng.random_range(1..6);
        let face = stream(&mut rng, steps, 3);
        let ctx = stream(&mut rng, steps, 3);
        let (p, _) = forward_clip(&m, &face, &ctx).unwrap();
        for (a, b) in p.logits.iter().zip(caca_a_oracle(&m, &face, &ctx)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_logit_gradient_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in ArchitectureKind::ALL {
        let m = randomized(&tiny(k), 14);
        let (_, tape) = forward_clip(&m, &stream(&mut rng, 3, 3), &stream(&mut rng, 3, 3)).unwrap();
        let g = backward_clip(&m, &tape, &[0.0; 5]).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0), "{k}");
    }
}

#[test]
fn backward_rejects_foreign_tapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = randomized(&tiny(ArchitectureKind::CacaA), 1);
    let b = randomized(&tiny(ArchitectureKind::CacaB), 1);
    let (_, tape) = forward_clip(&a, &stream(&mut rng, 3, 3), &stream(&mut rng, 3, 3)).unwrap();
    assert!(matches!(backward_clip(&b, &tape, &[0.0; 5]), Err(Error::Contract(_))));
    assert!(matches!(backward_clip(&a, &tape, &[0.0; 4]), Err(Error::Contract(_))));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for k in ArchitectureKind::ALL {
        let m = randomized(&tiny(k), 17);
        let face = stream(&mut rng, 3, 3);
        let ctx = stream(&mut rng, 3, 3);
        let probe: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, tape) = forward_clip(&m, &face, &ctx).unwrap();
        let g = backward_clip(&m, &tape, &probe).unwrap();
        let loss = |theta: &[f64]| {
            let mut m2 = m.clone();
            m2.params.assign_flat(theta).unwrap();
            dot(&forward_clip(&m2, &face, &ctx).unwrap().0.logits, &probe)
        };
        let r = finite_difference_gradcheck(loss, &g.flatten(), &m.params.flatten(), 1e-5, 1e-4).unwrap();
        assert!(r.passed, "{k}: {r:?}");
    }
}

#[test]
fn cascade_context_path_is_live() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let m = randomized(&tiny(ArchitectureKind::CacaA), 19);
    let face = stream(&mut rng, 3, 3);
    let ctx = stream(&mut rng, 3, 3);
    let probe: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, tape) = forward_clip(&m, &face, &ctx).unwrap();
    let mut g = m.params.zeros_like();
    let inputs = backward_clip_acc(&m, &tape, &probe, &mut g).unwrap();
    let d_ctx = inputs.context.unwrap();
    assert!(inputs.face.is_some());

    let loss = |v: &[f64]| {
        let c = Matrix::new(3, 3, v.to_vec()).unwrap();
        dot(&forward_clip(&m, &face, &c).unwrap().0.logits, &probe)
    };
    let r = finite_difference_gradcheck(loss, d_ctx.as_slice(), ctx.as_slice(), 1e-5, 1e-6).unwrap();
    assert!(r.passed, "{r:?}");
    assert!(d_ctx.row(0).iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn checkpoint_round_trip_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for k in ArchitectureKind::ALL {
        let m = randomized(&tiny(k), 21);
        let path = dir.path().join(format!("{}.ckpt", k.slug()));
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        let face = stream(&mut rng, 4, 3);
        let ctx = stream(&mut rng, 4, 3);
        assert_eq!(forward_clip(&m, &face, &ctx).unwrap().0, forward_clip(&back, &face, &ctx).unwrap().0);
        assert!(load_checkpoint_expecting(&path, k).is_ok());
    }
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let m = randomized(&tiny(ArchitectureKind::CacaA), 22);
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    assert!(matches!(
        load_checkpoint_expecting(&path, ArchitectureKind::FaceRnn),
        Err(Error::Config(_))
    ));

    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { offset: 0, .. })));

    let mut bad = good.clone();
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Format { message, .. }) => assert!(message.contains("truncated"), "{message}"),
        other => panic!("{other:?}"),
    }

    let mut long = good.clone();
    long.push(0);
    std::fs::write(&path, &long).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
}

#[test]
fn block_names_follow_visit_order() {
    for k in ArchitectureKind::ALL {
        let m = build_model(&tiny(k)).unwrap();
        let mut lens = Vec::new();
        m.params.visit(&mut |b| lens.push(b.len()));
        let names = m.params.block_names();
        assert_eq!(names.len(), lens.len(), "{k}");
        assert_eq!(names.last().unwrap(), "classifier.bias");
        let i = names.iter().position(|n| n == "left.0.w_hidden").unwrap();
        assert_eq!(lens[i], 16 * 4);
    }
}
