//! Dense tensors and a small reverse-mode differentiation engine.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, relative_error, GradCheck};
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(r, c, v.to_vec()).unwrap()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i = t.leaf(m(2, 2, &[1., 0., 0., 1.]));
        let x = t.leaf(m(2, 1, &[3., 4.]));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[3., 4.]);

        let a = t.leaf(m(1, 2, &[1., 2.]));
        let b = t.leaf(m(2, 1, &[3., 4.]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.]);

        let bad = t.leaf(m(3, 1, &[1., 1., 1.]));
        assert!(matches!(t.matmul(a, bad), Err(crate::Error::Shape { .. })));
    }

    #[test]
    fn hadamard_examples() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![1., 2., 3.]));
        let ones = t.leaf(Tensor::row(vec![1., 1., 1.]));
        let p = t.hadamard(a, ones).unwrap();
        assert_eq!(t.value(p).data(), &[1., 2., 3.]);
        let x = t.leaf(Tensor::row(vec![1., 2.]));
        let y = t.leaf(Tensor::row(vec![0., 5.]));
        let q = t.hadamard(x, y).unwrap();
        assert_eq!(t.value(q).data(), &[0., 10.]);
        assert!(t.hadamard(a, x).is_err());
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        let big: f64 = sigmoid(1000.0);
        assert!(big > 0.0 && big <= 1.0 && big.is_finite());
        let small: f64 = sigmoid(-1000.0);
        assert!((0.0..1.0).contains(&small));
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn ste_forward_and_backward() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![0.01, -0.3, 0.0]));
        let m = t.ste_indicator(a).unwrap();
        assert_eq!(t.value(m).data(), &[1., 0., 0.]);

        let mut t = Tape::new();
        let a = t.leaf(Tensor::row(vec![0.4, -0.4]));
        let m = t.ste_indicator(a).unwrap();
        let up = t.constant(Tensor::row(vec![0.7, -0.2]));
        let prod = t.hadamard(m, up).unwrap();
        let s = t.sum(prod).unwrap();
        let g = t.backward(s).unwrap();
        // d(sum(m ⊙ up))/dm = up, passed through unchanged.
        assert_eq!(g.get(a).unwrap().data(), &[0.7, -0.2]);
    }

    #[test]
    fn ste_masking_gradient_matches_mask_variable_differences() {
        // loss(m) = sum((x ⊙ m) W)²; the STE gradient on α must equal the
        // derivative with respect to the mask value itself.
        let x = rand_t(&[5, 3], 1);
        let w = rand_t(&[3, 2], 2);
        let alpha = Tensor::row(vec![0.2, 0.5, 0.1]);
        let loss = |tape: &mut Tape<'_, f64>, mask: Var| -> crate::Result<Var> {
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let masked = tape.mul_row(xv, mask)?;
            let y = tape.matmul(masked, wv)?;
            let sq = tape.square(y)?;
            tape.sum(sq)
        };
        let mut tape = Tape::new();
        let a = tape.leaf(alpha.clone());
        let mv = tape.ste_indicator(a).unwrap();
        let l = loss(&mut tape, mv).unwrap();
        let g = tape.backward(l).unwrap();
        let ste = g.get(a).unwrap().clone();

        let fd = check_gradients(&[Tensor::row(vec![1., 1., 1.])], 1e-5, |t, v| loss(t, v[0])).unwrap();
        assert!(relative_error(ste.data(), fd.numeric[0].data()) < 1e-8);
    }

    #[test]
    fn reductions_and_relu() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![-1., 2.]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r).data(), &[0., 2.]);
        let v = t.leaf(Tensor::row(vec![1., 2., 3.]));
        let s = t.sum(v).unwrap();
        assert_eq!(t.scalar(s), 6.0);
    }

    #[test]
    fn shared_input_accumulates_from_every_consumer() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![3.0]));
        let a = t.hadamard(x, x).unwrap();
        let b = t.add(a, x).unwrap();
        let g = t.backward(b).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::row(vec![1.0, 2.0]));
        let x = t.leaf(Tensor::row(vec![3.0, 4.0]));
        let p = t.hadamard(c, x).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn finite_check_mode_reports_nan() {
        let mut t = Tape::new().with_finite_check(true);
        let x = t.leaf(Tensor::row(vec![f64::MAX]));
        assert!(matches!(t.square(x), Err(crate::Error::NonFinite(_))));
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![f64::MAX]));
        assert!(t.square(x).is_ok());
    }

    #[test]
    fn normalize_cols_rejects_zero_column() {
        let mut t = Tape::new();
        let x = t.leaf(m(2, 2, &[1., 0., 1., 0.]));
        assert!(t.normalize_cols(x).is_err());
    }

    #[test]
    fn logloss_node_matches_closed_form() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::column(vec![0.0, 0.0]));
        let l = t.logloss_with_logits(z, vec![0.0, 1.0]).unwrap();
        assert!((t.scalar(l) - 2f64.ln()).abs() < 1e-15);
        let z = t.leaf(Tensor::column(vec![800.0]));
        let l = t.logloss_with_logits(z, vec![1.0]).unwrap();
        assert!(t.scalar(l).abs() < 1e-300);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let a = t.leaf(rand_t(&[4, 5], 3));
            let b = t.leaf(rand_t(&[5, 2], 4));
            let c = t.matmul(a, b).unwrap();
            let s = t.sigmoid(c).unwrap();
            t.value(s).clone()
        };
        let (x, y) = (run(), run());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn f32_tape_runs() {
        let mut t = Tape::<f32>::new();
        let a = t.leaf(Tensor::<f32>::row(vec![1.0, -2.0]));
        let s = t.sigmoid(a).unwrap();
        let l = t.sum(s).unwrap();
        let g = t.backward(l).unwrap();
        assert!((g.get(a).unwrap().data()[0] - 0.196_611_94).abs() < 1e-6);
    }

    type Build = fn(&mut Tape<'_, f64>, &[Var]) -> crate::Result<Var>;

    fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
        vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
            ("hadamard", vec![vec![2, 5], vec![2, 5]], |t, v| t.hadamard(v[0], v[1])),
            ("add", vec![vec![3, 2], vec![3, 2]], |t, v| t.add(v[0], v[1])),
            ("sub", vec![vec![3, 2], vec![3, 2]], |t, v| t.sub(v[0], v[1])),
            ("add_row", vec![vec![4, 3], vec![1, 3]], |t, v| t.add_row(v[0], v[1])),
            ("mul_row", vec![vec![4, 3], vec![1, 3]], |t, v| t.mul_row(v[0], v[1])),
            ("scale", vec![vec![2, 3]], |t, v| t.scale(v[0], -1.7)),
            ("sigmoid", vec![vec![3, 3]], |t, v| t.sigmoid(v[0])),
            ("relu", vec![vec![3, 3]], |t, v| t.relu(v[0])),
            ("square", vec![vec![2, 4]], |t, v| t.square(v[0])),
            ("sum", vec![vec![3, 4]], |t, v| t.sum(v[0])),
            ("row_sum", vec![vec![3, 4]], |t, v| t.row_sum(v[0])),
            ("gather_rows", vec![vec![5, 3]], |t, v| t.gather_rows(v[0], vec![4, 0, 4, 2])),
            ("concat_cols", vec![vec![2, 3], vec![2, 1]], |t, v| t.concat_cols(&[v[0], v[1], v[0]])),
            ("slice_cols", vec![vec![3, 5]], |t, v| t.slice_cols(v[0], 1, 4)),
            ("transpose", vec![vec![2, 3]], |t, v| t.transpose(v[0])),
            ("normalize_cols", vec![vec![4, 3]], |t, v| t.normalize_cols(v[0])),
            ("logloss", vec![vec![6, 1]], |t, v| {
                t.logloss_with_logits(v[0], vec![1., 0., 0., 1., 1., 0.])
            }),
        ]
    }

    #[test]
    fn every_primitive_passes_finite_differences() {
        for seed in 0..20u64 {
            for (name, shapes, build) in primitive_cases() {
                let inputs: Vec<Tensor> = shapes
                    .iter()
                    .enumerate()
                    .map(|(i, s)| rand_t(s, seed * 100 + i as u64))
                    .collect();
                let check = check_gradients(&inputs, 1e-5, build).unwrap();
                assert!(
                    check.max_rel_error() < 1e-5,
                    "{name} seed {seed}: rel err {}",
                    check.max_rel_error()
                );
            }
        }
    }

    proptest! {
        #[test]
        fn ste_output_is_binary_and_backward_is_bitwise_identity(
            alpha in proptest::collection::vec(-1.0f64..1.0, 1..16),
            seed in 0u64..1000,
        ) {
            let n = alpha.len();
            let up = rand_t(&[1, n], seed);
            let mut t = Tape::new();
            let a = t.leaf(Tensor::row(alpha.clone()));
            let m = t.ste_indicator(a).unwrap();
            for (&mv, &av) in t.value(m).data().iter().zip(&alpha) {
                prop_assert_eq!(mv, if av > 0.0 { 1.0 } else { 0.0 });
            }
            let u = t.constant(up.clone());
            let p = t.hadamard(m, u).unwrap();
            let s = t.sum(p).unwrap();
            let g = t.backward(s).unwrap();
            let ga = g.get(a).unwrap();
            for (x, y) in ga.data().iter().zip(up.data()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
