//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! Every learned operation in the network is composed from the primitives on
//! [`Tape`]. Parameters live in a [`ParamSet`]; a tape borrows their values,
//! and [`Tape::backward`] adds gradients into each parameter's `grad` cell.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, Entries, FdReport};
pub use param::{ParamId, ParamNode, ParamSet};
pub use tape::{dropout_seed, Aggregation, Mode, RowIndices, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use std::rc::Rc;

    fn vec_param(ps: &mut ParamSet, name: &str, v: Vec<f64>) -> ParamId {
        ps.add(name, Tensor::vector(v).unwrap()).unwrap()
    }

    #[test]
    fn relu_clamps_at_zero() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps, Mode::Eval);
        let x = t.input(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps, Mode::Eval);
        let x = t.input(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_hand_example() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps, Mode::Eval);
        let a = t.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.input(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps, Mode::Eval);
        let a = t.input(Tensor::zeros(&[2, 3]));
        let b = t.input(Tensor::zeros(&[2, 2]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps, Mode::Eval);
        let x = t.input(Tensor::vector(vec![5.0; 4]).unwrap());
        let y = t.layer_norm(x);
        assert_eq!(t.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn tensor_rejects_non_finite_and_bad_length() {
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::vector(vec![f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn backward_sum_relu() {
        let mut ps = ParamSet::new();
        let x = vec_param(&mut ps, "x", vec![2.0, 3.0]);
        let mut t = Tape::new(&ps, Mode::Train);
        let xv = t.param(x);
        let r = t.relu(xv);
        let l = t.sum(r);
        t.backward(l).unwrap();
        drop(t);
        assert_eq!(ps.grad(x).data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_mse_against_zero() {
        let mut ps = ParamSet::new();
        let x = vec_param(&mut ps, "x", vec![3.0]);
        let mut t = Tape::new(&ps, Mode::Train);
        let xv = t.param(x);
        let z = t.input(Tensor::vector(vec![0.0]).unwrap());
        let l = t.mse(xv, z).unwrap();
        t.backward(l).unwrap();
        drop(t);
        assert_eq!(ps.grad(x).data(), &[6.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut ps = ParamSet::new();
        let x = vec_param(&mut ps, "x", vec![0.0, 1.0]);
        let mut t = Tape::new(&ps, Mode::Train);
        let xv = t.param(x);
        let r = t.relu(xv);
        let l = t.sum(r);
        t.backward(l).unwrap();
        drop(t);
        assert_eq!(ps.grad(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.2]).unwrap()).unwrap();
        let mut t = Tape::new(&ps, Mode::Train);
        let x = t.input(Tensor::matrix(1, 2, vec![0.5, -1.5]).unwrap());
        let wv = t.param(w);
        let y = t.matmul(x, wv).unwrap();
        let s = t.softmax(y);
        let l = t.weighted_cross_entropy(s, &[1], &[1.0, 2.0]).unwrap();
        t.backward(l).unwrap();
        let once = ps.grad(w);
        t.backward(l).unwrap();
        drop(t);
        let twice = ps.grad(w);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_unrecorded() {
        let mut ps = ParamSet::new();
        let x = vec_param(&mut ps, "x", vec![1.0, 2.0]);
        let mut t = Tape::new(&ps, Mode::Train);
        let xv = t.param(x);
        let r = t.relu(xv);
        assert!(t.backward(r).is_err());

        let mut t = Tape::inference(&ps);
        let xv = t.param(x);
        let l = t.sum(xv);
        assert!(t.backward(l).is_err());

        let mut t = Tape::new(&ps, Mode::Train);
        let c = t.input(Tensor::vector(vec![1.0]).unwrap());
        let l = t.sum(c);
        assert!(t.backward(l).is_err());
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let ps = ParamSet::new();
        let data: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
        let mut t = Tape::new(&ps, Mode::Eval);
        let x = t.input(Tensor::vector(data.clone()).unwrap());
        let y = t.dropout(x, 0.5, 7).unwrap();
        assert_eq!(t.value(y).data(), data.as_slice());

        let run = |seed| {
            let mut t = Tape::new(&ps, Mode::Train).with_dropout(seed, 3);
            let x = t.input(Tensor::vector(data.clone()).unwrap());
            let y = t.dropout(x, 0.5, 7).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
        let kept = run(1);
        for (k, v) in kept.data().iter().zip(&data) {
            assert!(*k == 0.0 || (*k - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn dropout_rate_validated() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps, Mode::Train);
        let x = t.input(Tensor::vector(vec![1.0]).unwrap());
        assert!(t.dropout(x, 1.0, 0).is_err());
        assert!(t.dropout(x, -0.1, 0).is_err());
    }

    #[test]
    fn gather_scatter_roundtrip_values() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps, Mode::Eval);
        let x = t.input(Tensor::matrix(2, 4, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let idx: RowIndices = Rc::new(vec![vec![3, 0], vec![1, 2]]);
        let g = t.gather(x, idx.clone()).unwrap();
        assert_eq!(t.value(g).data(), &[4., 1., 6., 7.]);
        let s = t.scatter(g, idx, 4).unwrap();
        assert_eq!(t.value(s).data(), &[1., 0., 0., 4., 0., 6., 7., 0.]);
    }

    #[test]
    fn single_key_attention_weight_is_one() {
        let ps = ParamSet::new();
        let mut t = Tape::new(&ps, Mode::Eval);
        let q = t.input(Tensor::matrix(2, 16, (0..32).map(|i| i as f64 * 0.3).collect()).unwrap());
        let k = t.input(Tensor::matrix(2, 16, (0..32).map(|i| -(i as f64) * 0.7).collect()).unwrap());
        let l = t.head_logits(q, k, 8, false).unwrap();
        assert_eq!(t.value(l).shape(), &[16, 1]);
        let a = t.softmax(l);
        assert!(t.value(a).data().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nondeterminism() {
        let mut ps = ParamSet::new();
        let x = vec_param(&mut ps, "x", vec![1.0]);
        let f = |t: &mut Tape| {
            let v = t.param(x);
            Ok(t.sum(v))
        };
        assert!(finite_diff_check(&mut ps, f, 0.0, &Entries::All).is_err());

        let mut calls = 0.0;
        let g = |t: &mut Tape| {
            calls += 1.0;
            let v = t.param(x);
            Ok(t.scale(v, calls))
        };
        assert!(finite_diff_check(&mut ps, g, 1e-5, &Entries::All).is_err());
    }

    #[test]
    fn finite_diff_on_quadratic_is_tight() {
        let mut ps = ParamSet::new();
        let x = vec_param(&mut ps, "x", vec![1.5, -0.25, 3.0]);
        let rep = finite_diff_check(
            &mut ps,
            |t| {
                let v = t.param(x);
                let z = t.input(Tensor::vector(vec![0.5, 0.5, 0.5]).unwrap());
                t.mse(v, z)
            },
            1e-5,
            &Entries::All,
        )
        .unwrap();
        assert_eq!(rep.checked, 3);
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    }
}
