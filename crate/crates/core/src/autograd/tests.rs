use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::gradcheck::finite_difference_check;
use crate::rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[99]);
    let data = (0..crate::tensor::numel(shape)).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

const EPS: Real = 1e-4;
const TOL: Real = 1e-3;

#[test]
fn matmul_identity() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let i = t.constant(Tensor::eye(2));
    let y = t.matmul(a, i).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn relu_definition() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = t.relu(x);
    assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn conv_all_ones_sums_window() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = t.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).data(), &[9.0]);
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    match t.matmul(a, b) {
        Err(Error::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
    let c = t.constant(Tensor::zeros(&[3]));
    assert!(matches!(t.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(t.conv2d(x, w, 1, 0), Err(Error::ShapeMismatch { op: "conv2d", .. })));
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(randn(&[2, 3, 4], 1));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_of_square() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![3.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[3]));
    assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[2], 1.0));
    let unused = t.leaf(Tensor::full(&[3, 2], 5.0));
    let s = t.sum(x);
    let g = t.backward(s).unwrap();
    let gu = g.get(unused).unwrap();
    assert_eq!(gu.shape(), &[3, 2]);
    assert!(gu.data().iter().all(|&v| v == 0.0));
}

#[test]
fn constants_record_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Tensor::full(&[2], 1.0));
    let y = t.relu(c);
    assert!(!t.requires_grad(y));
    let x = t.leaf(Tensor::full(&[2], 1.0));
    let z = t.add(x, y).unwrap();
    assert!(t.requires_grad(z));
}

fn check(f: impl for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>, x: Tensor) {
    let err = finite_difference_check(f, &x, EPS).unwrap();
    assert!(err <= TOL, "relative error {}", err);
}

/// Fixed random weighting so every output coordinate affects the loss.
fn weighted_sum<'a>(t: &mut Tape<'a>, y: Var, seed: u64) -> Result<Var> {
    let w = randn(t.shape(y), seed);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

#[test]
fn gradcheck_matmul() {
    let b = randn(&[4, 3], 2);
    check(move |t, x| {
        let b = t.constant(b.clone());
        let y = t.matmul(x, b)?;
        weighted_sum(t, y, 3)
    }, randn(&[2, 4], 1));
    let a = randn(&[2, 4], 4);
    check(move |t, x| {
        let a = t.constant(a.clone());
        let y = t.matmul(a, x)?;
        weighted_sum(t, y, 5)
    }, randn(&[4, 3], 6));
}

#[test]
fn gradcheck_linear_all_inputs() {
    let w = randn(&[3, 5], 7);
    let b = randn(&[3], 8);
    let x = randn(&[4, 5], 9);
    {
        let (w, b) = (w.clone(), b.clone());
        check(move |t, x| {
            let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
            let y = t.linear(x, w, Some(b))?;
            weighted_sum(t, y, 10)
        }, x.clone());
    }
    {
        let (x, b) = (x.clone(), b.clone());
        check(move |t, w| {
            let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
            let y = t.linear(x, w, Some(b))?;
            weighted_sum(t, y, 10)
        }, w.clone());
    }
    check(move |t, b| {
        let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.linear(x, w, Some(b))?;
        weighted_sum(t, y, 10)
    }, b);
}

#[test]
fn gradcheck_conv2d() {
    let w = randn(&[3, 2, 3, 3], 11);
    let x = randn(&[2, 2, 5, 5], 12);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let w2 = w.clone();
        check(move |t, x| {
            let w = t.constant(w2.clone());
            let y = t.conv2d(x, w, stride, pad)?;
            weighted_sum(t, y, 13)
        }, x.clone());
        let x2 = x.clone();
        check(move |t, w| {
            let x = t.constant(x2.clone());
            let y = t.conv2d(x, w, stride, pad)?;
            weighted_sum(t, y, 13)
        }, w.clone());
    }
}

#[test]
fn gradcheck_add_mul_scale() {
    let other = randn(&[3, 4], 14);
    let o2 = other.clone();
    check(move |t, x| {
        let o = t.constant(o2.clone());
        let y = t.add(x, o)?;
        let y = t.mul(y, x)?;
        let y = t.scale(y, -0.7);
        weighted_sum(t, y, 15)
    }, randn(&[3, 4], 16));
}

#[test]
fn gradcheck_relu() {
    // keep values away from the kink
    let x = randn(&[20], 17).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    check(|t, x| {
        let y = t.relu(x);
        weighted_sum(t, y, 18)
    }, x);
}

#[test]
fn gradcheck_batchnorm_train_and_eval() {
    let gamma = randn(&[3], 19);
    let beta = randn(&[3], 20);
    for shape in [vec![5, 3], vec![2, 3, 2, 2]] {
        let (g, b) = (gamma.clone(), beta.clone());
        check(move |t, x| {
            let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
            let (y, _) = t.batchnorm(x, g, b, 1e-5)?;
            weighted_sum(t, y, 21)
        }, randn(&shape, 22));
        let (xv, b) = (randn(&shape, 23), beta.clone());
        check(move |t, g| {
            let (x, b) = (t.constant(xv.clone()), t.constant(b.clone()));
            let (y, _) = t.batchnorm(x, g, b, 1e-5)?;
            weighted_sum(t, y, 21)
        }, gamma.clone());
        let (g, xv) = (gamma.clone(), randn(&shape, 24));
        check(move |t, b| {
            let (x, g) = (t.constant(xv.clone()), t.constant(g.clone()));
            let (y, _) = t.batchnorm(x, g, b, 1e-5)?;
            weighted_sum(t, y, 21)
        }, beta.clone());
        let (g, b) = (gamma.clone(), beta.clone());
        check(move |t, x| {
            let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
            let y = t.batchnorm_eval(x, g, b, &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
            weighted_sum(t, y, 25)
        }, randn(&shape, 26));
    }
}

#[test]
fn batchnorm_normalises_batch() {
    let mut t = Tape::new();
    let x = t.constant(randn(&[64, 2], 27).map(|v| 3.0 * v + 5.0));
    let g = t.constant(Tensor::full(&[2], 1.0));
    let b = t.constant(Tensor::zeros(&[2]));
    let (y, stats) = t.batchnorm(x, g, b, 0.0).unwrap();
    assert_eq!(stats.count, 64);
    let v = t.value(y);
    for c in 0..2 {
        let col: Vec<Real> = (0..64).map(|i| v.data()[i * 2 + c]).collect();
        let mean: Real = col.iter().sum::<Real>() / 64.0;
        let var: Real = col.iter().map(|a| (a - mean) * (a - mean)).sum::<Real>() / 64.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn gradcheck_pools() {
    let x = randn(&[2, 2, 7, 7], 28);
    for pool in [Pool::Window { kernel: 4, stride: 3 }, Pool::Adaptive { out_h: 2, out_w: 2 }, Pool::Adaptive { out_h: 1, out_w: 1 }] {
        check(move |t, x| {
            let y = t.avgpool(x, pool)?;
            weighted_sum(t, y, 29)
        }, x.clone());
    }
    check(|t, x| {
        let y = t.maxpool(x, 3, 2, 1)?;
        weighted_sum(t, y, 30)
    }, x);
}

#[test]
fn avgpool_4x4_stride3_on_7x7_gives_2x2() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 1, 7, 7], 2.0));
    let y = t.avgpool(x, Pool::Window { kernel: 4, stride: 3 }).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 2]);
    assert!(t.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn gradcheck_reshape_concat_slice() {
    let other = randn(&[2, 3], 31);
    check(move |t, x| {
        let o = t.constant(other.clone());
        let r = t.reshape(x, &[2, 2])?;
        let c = t.concat(&[r, o, r], 1)?;
        let s = t.slice_cols(c, 1, 6)?;
        weighted_sum(t, s, 32)
    }, randn(&[4], 33));
    check(|t, x| {
        let c = t.concat(&[x, x], 0)?;
        weighted_sum(t, c, 34)
    }, randn(&[2, 3], 35));
}

#[test]
fn gradcheck_losses() {
    let labels = [2usize, 0, 1];
    check(move |t, x| t.cross_entropy(x, &labels), randn(&[3, 4], 36));
    let mut target = randn(&[3, 4], 37).map(crate::math::exp);
    for r in 0..3 {
        let s: Real = target.data()[r * 4..r * 4 + 4].iter().sum();
        for v in &mut target.data_mut()[r * 4..r * 4 + 4] {
            *v /= s;
        }
    }
    check(move |t, x| t.soft_cross_entropy(x, target.clone()), randn(&[3, 4], 38));
    check(|t, x| Ok(t.mean(x)), randn(&[5], 39));
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad(a f + b g) = a grad f + b grad g on a shared leaf
    let x0 = randn(&[3, 4], 40);
    let w = randn(&[2, 4], 41);
    let f = |t: &mut Tape<'_>, x: Var| -> Result<Var> {
        let wv = t.constant(w.clone());
        let y = t.linear(x, wv, None)?;
        let y = t.relu(y);
        Ok(t.sum(y))
    };
    let g = |t: &mut Tape<'_>, x: Var| -> Result<Var> {
        let sq = t.mul(x, x)?;
        Ok(t.mean(sq))
    };
    let (a, b) = (0.3, -1.7);
    let grad_of = |h: &dyn Fn(&mut Tape<'_>, Var) -> Result<Var>| {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let l = h(&mut t, x).unwrap();
        t.backward(l).unwrap().take(x).unwrap()
    };
    let gf = grad_of(&f);
    let gg = grad_of(&g);
    let combo = grad_of(&|t, x| {
        let lf = f(t, x)?;
        let lg = g(t, x)?;
        let lf = t.scale(lf, a);
        let lg = t.scale(lg, b);
        t.add(lf, lg)
    });
    for i in 0..combo.len() {
        let expect = a * gf.data()[i] + b * gg.data()[i];
        assert!((combo.data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn gradcheck_two_layer_mlp() {
    let w1 = randn(&[8, 5], 42).map(|v| v * 0.5);
    let b1 = randn(&[8], 43);
    let w2 = randn(&[3, 8], 44).map(|v| v * 0.5);
    let x = randn(&[6, 5], 45);
    let labels = [0usize, 1, 2, 2, 1, 0];
    let net = |t: &mut Tape<'_>, w1v: Var, b1v: Var, w2v: Var, xv: Var| -> Result<Var> {
        let h = t.linear(xv, w1v, Some(b1v))?;
        let h = t.relu(h);
        let o = t.linear(h, w2v, None)?;
        t.cross_entropy(o, &labels)
    };
    let (b1c, w2c, xc) = (b1.clone(), w2.clone(), x.clone());
    check(move |t, w1v| {
        let (b1v, w2v, xv) = (t.constant(b1c.clone()), t.constant(w2c.clone()), t.constant(xc.clone()));
        net(t, w1v, b1v, w2v, xv)
    }, w1.clone());
    check(move |t, w2v| {
        let (w1v, b1v, xv) = (t.constant(w1.clone()), t.constant(b1.clone()), t.constant(x.clone()));
        net(t, w1v, b1v, w2v, xv)
    }, w2);
}

#[test]
fn gradcheck_constant_function_is_zero() {
    let err = finite_difference_check(|t, _x| Ok(t.constant(Tensor::scalar(4.0))), &randn(&[3], 46), EPS).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn gradcheck_sum_of_squares_is_tight() {
    let x = randn(&[8], 47);
    let err = finite_difference_check(|t, x| {
        let sq = t.mul(x, x)?;
        Ok(t.sum(sq))
    }, &x, EPS).unwrap();
    assert!(err <= 1e-6, "{}", err);
}

#[test]
fn gradcheck_rejects_non_finite() {
    let r = finite_difference_check(|t, x| {
        let y = t.scale(x, Real::INFINITY);
        Ok(t.sum(y))
    }, &Tensor::from_vec(vec![1.0]), EPS);
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.leaf(randn(&[2, 3, 6, 6], 48));
        let w = t.leaf(randn(&[4, 3, 3, 3], 49));
        let y = t.conv2d(x, w, 1, 1).unwrap();
        let y = t.relu(y);
        let l = weighted_sum(&mut t, y, 50).unwrap();
        let v = t.value(l).data()[0];
        let g = t.backward(l).unwrap();
        (v, g.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}
