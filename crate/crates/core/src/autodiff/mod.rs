//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves created with
//! [`Graph::param`] receive gradients, leaves created with [`Graph::constant`]
//! never do. Broadcasting is limited to one single-element operand.
//!
//! ```
//! use c3po_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
//! let s = g.sum(x).unwrap();
//! let grads = g.backward(s).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let y = g.row_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn log_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.log_sigmoid(x).unwrap();
        assert!((g.item(y) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn log_sigmoid_is_stable_for_large_arguments() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![-800.0, 800.0, -35.0])).unwrap();
        let y = g.log_sigmoid(x).unwrap();
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], -800.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] + 35.0).abs() < 1e-12);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        let d = grads.get(x).unwrap().data();
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] == 0.0);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![3, 2]);
        let mut expect = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    expect[i * 2 + j] += a.data()[i * 3 + p] * b.data()[p * 2 + j];
                }
            }
        }
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a).unwrap(), g.constant(b).unwrap());
        let c = g.matmul(va, vb).unwrap();
        for (x, y) in g.value(c).data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(vec![3])).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1e300])).unwrap();
        assert!(matches!(g.scale(a, 1e300), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.3, -2.0, 5.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn log_sigmoid_of_dot_at_zero_weights() {
        let v = vec![0.4, -1.2, 2.5];
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).unwrap();
        let vv = g.constant(Tensor::matrix(3, 1, v.clone()).unwrap()).unwrap();
        let dotp = g.matmul(w, vv).unwrap();
        let l = g.log_sigmoid(dotp).unwrap();
        let s = g.sum(l).unwrap();
        let grads = g.backward(s).unwrap();
        for (gw, vi) in grads.get(w).unwrap().data().iter().zip(&v) {
            assert!((gw - 0.5 * vi).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Consumed)));
    }

    #[test]
    fn unreachable_and_constant_nodes_have_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let c = g.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let unrelated = g.param(Tensor::scalar(1.0)).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(unrelated).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(y).unwrap().shape(), &[2]);
    }

    #[test]
    fn sigmoid_gradient_closed_form() {
        for &x0 in &[-3.0, -0.5, 0.0, 0.7, 4.0] {
            let mut g = Graph::new();
            let x = g.param(Tensor::scalar(x0)).unwrap();
            let y = g.sigmoid(x).unwrap();
            let s = g.sum(y).unwrap();
            let grads = g.backward(s).unwrap();
            let sig = kernels::sigmoid(x0);
            assert_eq!(grads.get(x).unwrap().item(), sig * (1.0 - sig));
        }
    }

    /// Random two-layer composition exercising every op; returns the loss.
    fn composite(g: &mut Graph, leaves: &[Tensor]) -> (Var, Vec<Var>) {
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone()).unwrap()).collect();
        let (x, w1, w2, s) = (vars[0], vars[1], vars[2], vars[3]);
        let h = g.matmul(x, w1).unwrap();
        let h = g.rms_norm(h, 1e-6).unwrap();
        let h = g.relu(h).unwrap();
        let e = g.gather_rows(w1, &[0, 2, 2]).unwrap();
        let et = g.transpose(e).unwrap();
        let h2 = g.matmul(h, w2).unwrap();
        let left = g.slice_cols(h2, 0, 2).unwrap();
        let right = g.slice_cols(h2, 2, 2).unwrap();
        let att = g.matmul_nt(left, right).unwrap();
        let att = g.causal_softmax(att).unwrap();
        let mixed = g.matmul(att, h2).unwrap();
        let cat = g.concat_cols(&[mixed, h]).unwrap();
        let lp = g.log_softmax(cat).unwrap();
        let picked = g.pick(lp, &[0, 1, 2, 3], &[1, 0, 4, 2]).unwrap();
        let sc = g.mul(picked, s).unwrap();
        let sg = g.sigmoid(sc).unwrap();
        let ls = g.log_sigmoid(sc).unwrap();
        let d = g.sub(sg, ls).unwrap();
        let m = g.mean(d).unwrap();
        let et_sum = g.sum(et).unwrap();
        let et_sum = g.scale(et_sum, 0.1).unwrap();
        let m = g.add(m, et_sum).unwrap();
        let m = g.add_scalar(m, 0.3).unwrap();
        (m, vars)
    }

    fn composite_value(leaves: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let (l, _) = composite(&mut g, leaves);
        g.item(l)
    }

    #[test]
    fn composite_gradients_match_central_differences() {
        let h = 1e-5;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leaves = vec![
                rand_tensor(&mut rng, vec![4, 3]),
                rand_tensor(&mut rng, vec![3, 4]),
                rand_tensor(&mut rng, vec![4, 4]),
                rand_tensor(&mut rng, vec![1]),
            ];
            let mut g = Graph::new();
            let (loss, vars) = composite(&mut g, &leaves);
            let grads = g.backward(loss).unwrap();
            for (li, leaf) in leaves.iter().enumerate() {
                let analytic = grads.get(vars[li]).unwrap();
                for k in 0..leaf.numel() {
                    let mut plus = leaves.clone();
                    plus[li].data_mut()[k] += h;
                    let mut minus = leaves.clone();
                    minus[li].data_mut()[k] -= h;
                    let fd = (composite_value(&plus) - composite_value(&minus)) / (2.0 * h);
                    let a = analytic.data()[k];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "seed {seed} leaf {li}[{k}]: {a} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = vec![
            rand_tensor(&mut rng, vec![4, 3]),
            rand_tensor(&mut rng, vec![3, 4]),
            rand_tensor(&mut rng, vec![4, 4]),
            rand_tensor(&mut rng, vec![1]),
        ];
        let run = || {
            let mut g = Graph::new();
            let (loss, vars) = composite(&mut g, &leaves);
            let grads = g.backward(loss).unwrap();
            vars.iter()
                .flat_map(|v| grads.get(*v).unwrap().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn causal_softmax_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, vec![5, 5])).unwrap();
        let y = g.causal_softmax(x).unwrap();
        for i in 0..5 {
            let row = g.value(y).row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }
}
