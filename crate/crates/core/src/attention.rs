//! Soft dot global attention.
//!
//! For a query `q` and encoder states `k_1..k_T` (all length `H`):
//!
//! ```text
//! a_t      = softmax_t(q . k_t)
//! context  = sum_t a_t k_t
//! combined = tanh(W_c [context; q])      W_c is H x 2H
//! ```

use crate::error::{dim_err, Error, Result};
use crate::tensor::{axpy, dot, softmax_in_place, Matrix, Vector};

/// Dot-product alignment score. Query and key must have equal length.
pub fn dot_score(h_query: &[f64], h_encoder: &[f64]) -> Result<f64> {
    if h_query.len() != h_encoder.len() {
        return Err(dim_err!(
            "dot score needs equal hidden sizes, got query {} and encoder {}",
            h_query.len(),
            h_encoder.len()
        ));
    }
    Ok(dot(h_query, h_encoder))
}

/// Result of one attention read. Also used as the container for its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub context: Vector,
    /// Weights over encoder time; positive and summing to one.
    pub alignment: Vector,
    pub combined: Vector,
}

/// Saved activations for [`attend_backward`].
#[derive(Clone, Debug)]
pub struct AttentionTape {
    query: Vector,
    keys: Matrix,
    output: AttentionOutput,
}

impl AttentionTape {
    pub fn output(&self) -> &AttentionOutput {
        &self.output
    }
}

fn check_inputs(h_query: &[f64], encoder_hiddens: &Matrix) -> Result<()> {
    if h_query.is_empty() {
        return Err(Error::Argument("empty attention query".into()));
    }
    if encoder_hiddens.cols() != h_query.len() {
        return Err(dim_err!(
            "attention query has size {} but encoder states have size {}",
            h_query.len(),
            encoder_hiddens.cols()
        ));
    }
    Ok(())
}

/// Alignment weights and context vector only (no learned combination).
pub fn align(h_query: &[f64], encoder_hiddens: &Matrix) -> Result<(Vector, Vector)> {
    check_inputs(h_query, encoder_hiddens)?;
    let mut weights: Vec<f64> = encoder_hiddens.row_iter().map(|k| dot(h_query, k)).collect();
    if weights.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite attention score".into()));
    }
    softmax_in_place(&mut weights);
    let mut context = vec![0.0; h_query.len()];
    for (&a, k) in weights.iter().zip(encoder_hiddens.row_iter()) {
        axpy(a, k, &mut context);
    }
    Ok((Vector::new(weights)?, Vector::new(context)?))
}

/// Attends over every row of `encoder_hiddens` (`T x H`) and combines the
/// context with the query through `w_c` (`H x 2H`).
pub fn attend(
    h_query: &[f64],
    encoder_hiddens: &Matrix,
    w_c: &Matrix,
) -> Result<(AttentionOutput, AttentionTape)> {
    let hs = h_query.len();
    check_inputs(h_query, encoder_hiddens)?;
    if w_c.shape() != (hs, 2 * hs) {
        return Err(dim_err!(
            "combination matrix is {}x{}, expected {hs}x{}",
            w_c.rows(),
            w_c.cols(),
            2 * hs
        ));
    }
    let (alignment, context) = align(h_query, encoder_hiddens)?;
    let mut combined = vec![0.0; hs];
    for (r, out) in combined.iter_mut().enumerate() {
        let row = w_c.row(r);
        *out = (dot(&row[..hs], &context) + dot(&row[hs..], h_query)).tanh();
    }
    let output = AttentionOutput {
        context,
        alignment,
        combined: Vector::new(combined)?,
    };
    let tape = AttentionTape {
        query: Vector::new(h_query.to_vec())?,
        keys: encoder_hiddens.clone(),
        output: output.clone(),
    };
    Ok((output, tape))
}

/// Gradients of [`attend`]'s inputs.
#[derive(Clone, Debug)]
pub struct AttentionGradients {
    pub query: Vector,
    /// `T x H`, one row per encoder state.
    pub encoders: Matrix,
    pub w_c: Matrix,
}

/// Backpropagates gradients on any of the three outputs.
pub fn attend_backward(
    tape: &AttentionTape,
    w_c: &Matrix,
    grad_output: &AttentionOutput,
) -> Result<AttentionGradients> {
    let hs = tape.query.len();
    let steps = tape.keys.rows();
    let out = &tape.output;
    if grad_output.context.len() != hs
        || grad_output.combined.len() != hs
        || grad_output.alignment.len() != steps
        || w_c.shape() != (hs, 2 * hs)
    {
        return Err(Error::Contract(format!(
            "attention gradient shapes (context {}, alignment {}, combined {}) do not match tape (H={hs}, T={steps})",
            grad_output.context.len(),
            grad_output.alignment.len(),
            grad_output.combined.len()
        )));
    }

    // combined = tanh(W_c u), u = [context; query]
    let du: Vec<f64> = out
        .combined
        .iter()
        .zip(grad_output.combined.iter())
        .map(|(y, g)| g * (1.0 - y * y))
        .collect();
    let mut grad_wc = Matrix::zeros(hs, 2 * hs);
    let mut grad_query = vec![0.0; hs];
    let mut grad_context = grad_output.context.to_vec();
    for (r, &d) in du.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let g_row = grad_wc.row_mut(r);
        axpy(d, &out.context, &mut g_row[..hs]);
        axpy(d, &tape.query, &mut g_row[hs..]);
        let w_row = w_c.row(r);
        axpy(d, &w_row[..hs], &mut grad_context);
        axpy(d, &w_row[hs..], &mut grad_query);
    }

    // context = sum_t a_t k_t, a = softmax(s), s_t = q . k_t
    let a = &out.alignment;
    let grad_a: Vec<f64> = tape
        .keys
        .row_iter()
        .zip(grad_output.alignment.iter())
        .map(|(k, ga)| dot(&grad_context, k) + ga)
        .collect();
    let mean = dot(a, &grad_a);
    let mut grad_keys = Matrix::zeros(steps, hs);
    for t in 0..steps {
        let ds = a[t] * (grad_a[t] - mean);
        let row = grad_keys.row_mut(t);
        axpy(a[t], &grad_context, row);
        axpy(ds, &tape.query, row);
        axpy(ds, tape.keys.row(t), &mut grad_query);
    }
    Ok(AttentionGradients {
        query: Vector::new(grad_query)?,
        encoders: grad_keys,
        w_c: grad_wc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_gradcheck;
    use proptest::prelude::{any, prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, rand_vec(rng, r * c)).unwrap()
    }

    #[test]
    fn dot_score_examples() {
        assert_eq!(dot_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot_score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let v = [0.3, -2.0, 1.5];
        let s = dot_score(&v, &v).unwrap();
        assert!(s >= 0.0 && (s - (0.09 + 4.0 + 2.25)).abs() < 1e-15);
        assert!(matches!(dot_score(&[1.0], &[1.0, 2.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_source_gets_all_weight() {
        let k = Matrix::from_rows(&[[0.2, -0.7]]).unwrap();
        let (a, c) = align(&[3.0, 1.0], &k).unwrap();
        assert_eq!(a.as_slice(), &[1.0]);
        assert_eq!(c.as_slice(), k.row(0));
    }

    #[test]
    fn identical_sources_give_uniform_weights() {
        let v = [0.4, -0.1, 0.9];
        let k = Matrix::from_rows(&[v, v, v, v]).unwrap();
        let (a, c) = align(&[1.0, 2.0, -3.0], &k).unwrap();
        for &w in a.iter() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        for (x, y) in c.iter().zip(&v) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn two_source_scalar_evaluation() {
        let k = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (a, c) = align(&[1.0, 0.0], &k).unwrap();
        let e = std::f64::consts::E;
        assert!((a[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((a[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((c[0] - 0.73106).abs() < 1e-5 && (c[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn argument_errors() {
        let k = Matrix::zeros(3, 2);
        assert!(matches!(align(&[], &k), Err(Error::Argument(_))));
        assert!(matches!(align(&[1.0, 2.0, 3.0], &k), Err(Error::Dimension(_))));
        assert!(attend(&[1.0, 2.0], &k, &Matrix::zeros(2, 2)).is_err());
    }

    fn zero_grad(hs: usize, steps: usize) -> AttentionOutput {
        AttentionOutput {
            context: Vector::zeros(hs),
            alignment: Vector::zeros(steps),
            combined: Vector::zeros(hs),
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = rand_mat(&mut rng, 3, 2);
        let w = rand_mat(&mut rng, 2, 4);
        let (_, tape) = attend(&rand_vec(&mut rng, 2), &k, &w).unwrap();
        let g = attend_backward(&tape, &w, &zero_grad(2, 3)).unwrap();
        assert!(g.query.iter().all(|&v| v == 0.0));
        assert!(g.encoders.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.w_c.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (hs, steps) = (2, 3);
        for _ in 0..5 {
            let q = rand_vec(&mut rng, hs);
            let k = rand_mat(&mut rng, steps, hs);
            let w = rand_mat(&mut rng, hs, 2 * hs);
            let probe = AttentionOutput {
                context: Vector::new(rand_vec(&mut rng, hs)).unwrap(),
                alignment: Vector::new(rand_vec(&mut rng, steps)).unwrap(),
                combined: Vector::new(rand_vec(&mut rng, hs)).unwrap(),
            };
            let loss = |q: &[f64], k: &Matrix, w: &Matrix| {
                let (o, _) = attend(q, k, w).unwrap();
                dot(&o.context, &probe.context)
                    + dot(&o.alignment, &probe.alignment)
                    + dot(&o.combined, &probe.combined)
            };
            let (_, tape) = attend(&q, &k, &w).unwrap();
            let g = attend_backward(&tape, &w, &probe).unwrap();

            let mut point = q.clone();
            point.extend_from_slice(k.as_slice());
            point.extend_from_slice(w.as_slice());
            let mut analytic = g.query.to_vec();
            analytic.extend_from_slice(g.encoders.as_slice());
            analytic.extend_from_slice(g.w_c.as_slice());
            let f = |v: &[f64]| {
                let k2 = Matrix::new(steps, hs, v[hs..hs + steps * hs].to_vec()).unwrap();
                let w2 = Matrix::new(hs, 2 * hs, v[hs + steps * hs..].to_vec()).unwrap();
                loss(&v[..hs], &k2, &w2)
            };
            let r = finite_difference_gradcheck(f, &analytic, &point, 1e-5, 1e-6).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn uniform_alignment_spreads_context_gradient_evenly() {
        let v = [0.5, -0.25];
        let k = Matrix::from_rows(&[v, v, v]).unwrap();
        let w = Matrix::zeros(2, 4);
        let (_, tape) = attend(&[0.3, 0.8], &k, &w).unwrap();
        let mut g = zero_grad(2, 3);
        g.context = Vector::new(vec![1.0, -2.0]).unwrap();
        let grads = attend_backward(&tape, &w, &g).unwrap();
        for t in 1..3 {
            for h in 0..2 {
                assert!((grads.encoders.get(t, h) - grads.encoders.get(0, h)).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn alignment_is_a_distribution_and_context_is_in_hull(
            seed in any::<u64>(), hs in 1usize..8, steps in 1usize..12, scale in 0.1f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q: Vec<f64> = rand_vec(&mut rng, hs).iter().map(|x| x * scale).collect();
            let k = rand_mat(&mut rng, steps, hs);
            let (a, c) = align(&q, &k).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|&w| w > 0.0));
            for h in 0..hs {
                let lo = k.row_iter().map(|r| r[h]).fold(f64::INFINITY, f64::min);
                let hi = k.row_iter().map(|r| r[h]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c[h] >= lo - 1e-12 && c[h] <= hi + 1e-12);
            }
        }

        #[test]
        fn permuting_sources_permutes_alignment(seed in any::<u64>(), hs in 1usize..6, steps in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_vec(&mut rng, hs);
            let k = rand_mat(&mut rng, steps, hs);
            let mut perm: Vec<usize> = (0..steps).collect();
            for i in (1..steps).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let kp = k.select_rows(&perm).unwrap();
            let (a, c) = align(&q, &k).unwrap();
            let (ap, cp) = align(&q, &kp).unwrap();
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((ap[i] - a[p]).abs() < 1e-12);
            }
            for (x, y) in c.iter().zip(cp.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn scaling_the_query_sharpens_alignment(seed in any::<u64>(), hs in 1usize..6, steps in 2usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_vec(&mut rng, hs);
            let k = rand_mat(&mut rng, steps, hs);
            let mut last = 0.0;
            for s in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
                let qs: Vec<f64> = q.iter().map(|x| x * s).collect();
                let (a, _) = align(&qs, &k).unwrap();
                let m = a.iter().copied().fold(0.0, f64::max);
                prop_assert!(m >= last - 1e-12);
                last = m;
            }
        }
    }
}
