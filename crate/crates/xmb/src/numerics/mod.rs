//! Tensor arithmetic with reverse-mode automatic differentiation, plus the
//! `.ten` portable tensor format and a finite-difference gradient oracle.

pub mod fd;
pub mod tape;
pub mod ten_io;
pub mod tensor;

pub use fd::{finite_difference_check, finite_difference_check_coords};
pub use tape::{Tape, Var};
pub use ten_io::{read_ten, write_ten};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// random coefficients with |c| in [1, 2]
    fn bypass_coeffs(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        use rand::Rng;
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let mag = 1.0 + rng.random::<f32>();
                if rng.random::<bool>() { mag } else { -mag }
            })
            .collect();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.5, -2.0, 0.25]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_axes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        // uniform model over V outcomes has NLL ln V at every position
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 4]));
        let loss = tape.cross_entropy_nll(logits, &[0, 1, 3]).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - 4.0f32.ln()).abs() < 1e-6, "{got}");

        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 97]));
        let loss = tape.cross_entropy_nll(logits, &[42]).unwrap();
        let got = tape.value(loss).item().unwrap();
        // ln 97 = 4.574711 (computed in f64)
        assert!((got as f64 - 4.574710978503383).abs() < 1e-5, "{got}");
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let mut tape = Tape::new();
        let mut logits = Tensor::zeros(&[2, 4]);
        logits.data_mut()[1] = 100.0;
        logits.data_mut()[4 + 2] = 100.0;
        let logits = tape.constant(logits);
        let loss = tape.cross_entropy_nll(logits, &[1, 2]).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4]));
        match tape.cross_entropy_nll(logits, &[0, 4]) {
            Err(Error::Index { .. }) => {}
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[3.0, -1.0, 0.5, 2.0]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.mul(x, x).unwrap();
        match tape.backward(y) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_accumulation_doubles_exactly() {
        // x used twice: d(sum(x + x)) = 2, exactly
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.1, 0.2, 0.3]), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();

        let mut tape = Tape::new();
        let x1 = tape.leaf(t(&[3], &[0.1, 0.2, 0.3]), true);
        let loss = tape.sum_all(x1);
        tape.backward(loss).unwrap();
        let once = tape.grad(x1).unwrap();

        for (a, b) in twice.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * *b);
        }
    }

    /// A small random two-layer net: sum of squares of gelu(x W1) W2.
    fn two_layer_loss(w1: Tensor, w2: Tensor) -> impl Fn(&mut Tape, Var) -> crate::error::Result<Var> {
        move |tape: &mut Tape, x: Var| {
            let w1 = tape.constant(w1.clone());
            let w2 = tape.constant(w2.clone());
            let h = tape.matmul(x, w1)?;
            let h = tape.gelu(h);
            let o = tape.matmul(h, w2)?;
            let sq = tape.mul(o, o)?;
            let s = tape.sum_all(sq);
            Ok(tape.scale(s, 1.0 / 9.0))
        }
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = Tensor::randn(&[4, 8], 0.5, &mut rng);
        let w2 = Tensor::randn(&[8, 3], 0.5, &mut rng);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let err = finite_difference_check(&two_layer_loss(w1, w2), &x, 5e-3).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn fd_check_on_sum_of_squares_and_constant() {
        let f = |tape: &mut Tape, x: Var| {
            let sq = tape.mul(x, x)?;
            Ok(tape.sum_all(sq))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[6], 2.0, &mut rng);
        let err = finite_difference_check(&f, &x, 1e-2).unwrap();
        assert!(err < 1e-3, "relative error {err}");

        // constant loss: analytic 0, numeric 0, error 0
        let g = |tape: &mut Tape, x: Var| {
            let zero = tape.scale(x, 0.0);
            Ok(tape.sum_all(zero))
        };
        let err = finite_difference_check(&g, &x, 1e-2).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_check_on_cross_entropy() {
        let f = |tape: &mut Tape, x: Var| tape.cross_entropy_nll(x, &[2, 0, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let err = finite_difference_check(&f, &logits, 5e-3).unwrap();
        assert!(err < 1e-2, "relative error {err}");
    }

    /// Composition of every differentiable primitive, exercised across seeds.
    fn everything_loss(seed: u64) -> impl Fn(&mut Tape, Var) -> crate::error::Result<Var> {
        move |tape: &mut Tape, x: Var| {
            // x: [4, 6]
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = tape.constant(Tensor::randn(&[6, 6], 0.4, &mut rng));
            let gamma = tape.constant(Tensor::full(&[6], 1.1));
            let beta = tape.constant(Tensor::full(&[6], -0.1));
            let bias = tape.constant(Tensor::randn(&[6], 0.3, &mut rng));

            let h = tape.matmul(x, w)?;
            let h = tape.add(h, bias)?;
            let h = tape.layer_norm(h, gamma, beta)?;
            let h = tape.gelu(h);
            let top = tape.slice(h, 0, 0, 2)?;
            let bottom = tape.slice(h, 0, 2, 2)?;
            let tt = tape.transpose(top)?;
            let scores = tape.matmul(bottom, tt)?;
            let scores = tape.scale(scores, 0.7);
            let attn = tape.causal_softmax(scores)?;
            let mixed = tape.matmul(attn, top)?;
            let re = tape.reshape(mixed, vec![3, 4])?;
            let sm = tape.softmax(re)?;
            let cat = tape.concat(&[re, sm], 1)?;
            let prod = tape.mul(cat, cat)?;
            let s = tape.sum_all(prod);
            let s = tape.scale(s, 1.0 / 24.0);
            // linear bypass keeps every input gradient O(1), so the
            // relative-error metric is not dominated by near-zero coords
            let r = tape.constant(bypass_coeffs(&mut rng, 24));
            let xr = tape.reshape(x, vec![24])?;
            let lin = tape.mul(xr, r)?;
            let lin = tape.sum_all(lin);
            tape.add(s, lin)
        }
    }

    #[test]
    fn primitive_compositions_match_finite_differences_across_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let err = finite_difference_check(&everything_loss(seed), &x, 5e-3).unwrap();
            assert!(err < 1e-2, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn conv3x3_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn(&[2, 3 * 9], 0.4, &mut rng);
        let b = Tensor::randn(&[2], 0.2, &mut rng);
        let x = Tensor::randn(&[3, 5, 4], 1.0, &mut rng);
        let f = move |tape: &mut Tape, xin: Var| {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = tape.conv3x3(xin, wv, bv)?;
            let sq = tape.mul(y, y)?;
            let s = tape.sum_all(sq);
            let s = tape.scale(s, 1.0 / 40.0);
            let r = tape.constant(bypass_coeffs(&mut ChaCha8Rng::seed_from_u64(55), 60));
            let xr = tape.reshape(xin, vec![60])?;
            let lin = tape.mul(xr, r)?;
            let lin = tape.sum_all(lin);
            tape.add(s, lin)
        };
        let err = finite_difference_check(&f, &x, 5e-3).unwrap();
        assert!(err < 1e-3, "relative error {err}");

        // weight gradients via the same oracle
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x2 = Tensor::randn(&[3, 5, 4], 1.0, &mut rng);
        let w2 = Tensor::randn(&[2, 27], 0.4, &mut rng);
        let b2 = Tensor::randn(&[2], 0.2, &mut rng);
        let g = move |tape: &mut Tape, win: Var| {
            let xv = tape.constant(x2.clone());
            let bv = tape.constant(b2.clone());
            let y = tape.conv3x3(xv, win, bv)?;
            let sq = tape.mul(y, y)?;
            let s = tape.sum_all(sq);
            let s = tape.scale(s, 1.0 / 40.0);
            let r = tape.constant(bypass_coeffs(&mut ChaCha8Rng::seed_from_u64(56), 54));
            let wr = tape.reshape(win, vec![54])?;
            let lin = tape.mul(wr, r)?;
            let lin = tape.sum_all(lin);
            tape.add(s, lin)
        };
        let err = finite_difference_check(&g, &w2, 5e-3).unwrap();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
            let mut tape = Tape::new();
            let leaf = tape.leaf(x, true);
            let loss = everything_loss(99)(&mut tape, leaf).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).data().to_vec(),
                tape.grad(leaf).unwrap().data().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1[0].to_bits(), l2[0].to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn causality_of_causal_softmax_is_exact() {
        // growing the score matrix must not change earlier rows at all
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let big = Tensor::randn(&[5, 5], 1.0, &mut rng);
        let small_data = {
            let mut v = Vec::new();
            for i in 0..3 {
                v.extend_from_slice(&big.data()[i * 5..i * 5 + 3]);
            }
            v
        };
        let small = Tensor::new(vec![3, 3], small_data).unwrap();

        let mut tape = Tape::new();
        let b = tape.constant(big);
        let yb = tape.causal_softmax(b).unwrap();
        let mut tape2 = Tape::new();
        let s = tape2.constant(small);
        let ys = tape2.causal_softmax(s).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(
                    tape.value(yb).data()[i * 5 + j].to_bits(),
                    tape2.value(ys).data()[i * 3 + j].to_bits()
                );
            }
        }
    }
}
