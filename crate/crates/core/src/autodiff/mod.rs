//! A small dense tensor type with reverse-mode differentiation.
//!
//! Only the operations the tracker needs are provided. Gradients are
//! accumulated per [`Var`] node; parameters are leaves created with
//! [`Var::param`].

mod kernels;
mod tensor;
mod var;

pub use kernels::{conv2d_forward, Conv2dSpec};
pub use tensor::{numel, DType, Scalar, Tensor};
pub use var::{BackwardFn, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}

/// Gradient-free batched product used by inference paths.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>, TensorError> {
    Ok(Var::constant(a.clone())
        .matmul(&Var::constant(b.clone()), trans_a, trans_b)?
        .value()
        .clone())
}


#[cfg(test)]
mod tests {
    use super::gradcheck::check;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Var::<f64>::param(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let t = Tensor::<f64>::from_f64(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        let x = Var::param(t.clone());
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), t.map(|v| 2.0 * v));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Var::param(Tensor::<f64>::zeros(&[2]));
        assert!(matches!(x.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn identity_pointwise_conv_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, None, Conv2dSpec::new(1, 0, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_all_ones_center_is_nine() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_rejects_bad_groups() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[4, 1, 3, 3]);
        assert!(conv2d_forward(&x, &w, None, Conv2dSpec::new(1, 1, 2)).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_tensor(&mut rng, &[1, 3, 4]);
        let eye = Tensor::from_fn(&[1, 4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&a, &eye, false, false).unwrap(), a);
    }

    #[test]
    fn batch_norm_eval_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let y = Var::constant(x.clone())
            .batch_norm_eval(
                &Var::constant(Tensor::ones(&[3])),
                &Var::constant(Tensor::zeros(&[3])),
                &[0.0; 3],
                &[1.0; 3],
                1,
                0.0,
            )
            .unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let (xc, wc) = (x.clone(), w.clone());
        let xv = Var::param(x);
        let wv = Var::param(w);
        let y = xv.conv2d(&wv, None, Conv2dSpec::new(1, 1, 2)).unwrap();
        y.mul(&y).unwrap().sum().backward().unwrap();
        assert_eq!(xv.value(), &xc);
        assert_eq!(wv.value(), &wc);
    }

    const TOL: f64 = 1e-4;
    const H: f64 = 1e-6;

    #[test]
    fn gradcheck_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]).map(|v| v + 2.5);
        let err = check(&[a.clone(), b.clone()], |v| {
            let s = v[0].add(&v[1]).unwrap();
            let d = v[0].sub(&v[1]).unwrap();
            let m = s.mul(&d).unwrap();
            let q = m.div(&v[1]).unwrap();
            let mx = q.maximum(&v[0]).unwrap().minimum(&v[1]).unwrap();
            mx.sigmoid().add(&v[1].ln()).unwrap().scale(0.7).add_scalar(0.1).abs().sum()
        }, H);
        assert!(err < TOL, "elementwise gradcheck {err}");
    }

    #[test]
    fn gradcheck_shape_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 2, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 4]);
        let err = check(&[a, b, w], |v| {
            let c = Var::concat(&[&v[0], &v[1]], 1).unwrap();
            let n = c.narrow(1, 1, 3).unwrap();
            let p = n.permute(&[2, 0, 1]).unwrap().reshape(&[4, 6]).unwrap();
            let g = p.gather_rows(&[0, 5, 2, 3]).unwrap();
            let m = v[0].mean_groups(2).unwrap();
            let w = v[2].mul(&n).unwrap();
            g.sum().add(&m.mean()).unwrap().add(&w.sum()).unwrap()
        }, H);
        assert!(err < TOL, "shape gradcheck {err}");
    }

    #[test]
    fn gradcheck_conv2d_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cout, groups, k, stride, pad) in &[
            (4usize, 1usize, 3usize, 1usize, 1usize),
            (3, 3, 3, 2, 1),
            (6, 3, 1, 1, 0),
            (2, 1, 3, 2, 0),
        ] {
            let x = rand_tensor(&mut rng, &[2, 3, 5, 5]);
            let w = rand_tensor(&mut rng, &[cout, 3 / groups, k, k]);
            let b = rand_tensor(&mut rng, &[cout]);
            let err = check(&[x, w, b], |v| {
                let y = v[0]
                    .conv2d(&v[1], Some(&v[2]), Conv2dSpec::new(stride, pad, groups))
                    .unwrap();
                y.mul(&y).unwrap().sum()
            }, H);
            assert!(err < TOL, "conv gradcheck {err} for groups={groups} k={k} stride={stride}");
        }
    }

    #[test]
    fn gradcheck_matmul_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a = rand_tensor(&mut rng, if ta { &[2, 4, 3] } else { &[2, 3, 4] });
            let b = rand_tensor(&mut rng, if tb { &[2, 5, 4] } else { &[2, 4, 5] });
            let err = check(&[a, b], |v| {
                let y = v[0].matmul(&v[1], ta, tb).unwrap();
                y.mul(&y).unwrap().sum()
            }, H);
            assert!(err < TOL, "matmul gradcheck {err} ({ta},{tb})");
        }
        let x = rand_tensor(&mut rng, &[5, 3]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let err = check(&[x, w, b], |v| {
            let y = v[0].linear(&v[1], Some(&v[2])).unwrap();
            y.mul(&y).unwrap().sum()
        }, H);
        assert!(err < TOL, "linear gradcheck {err}");
    }

    #[test]
    fn gradcheck_batch_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let g = rand_tensor(&mut rng, &[2]);
        let b = rand_tensor(&mut rng, &[2]);
        let proj = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let err = check(&[x.clone(), g.clone(), b.clone()], |v| {
            let (y, _, _) = v[0].batch_norm_train(&v[1], &v[2], 1, 1e-5).unwrap();
            y.mul(&Var::constant(proj.clone())).unwrap().sum()
        }, H);
        assert!(err < TOL, "bn train gradcheck {err}");
        let err = check(&[x, g, b], |v| {
            let y = v[0]
                .batch_norm_eval(&v[1], &v[2], &[0.3, -0.2], &[1.5, 0.7], 1, 1e-5)
                .unwrap();
            y.mul(&y).unwrap().sum()
        }, H);
        assert!(err < TOL, "bn eval gradcheck {err}");
    }
}
