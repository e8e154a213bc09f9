use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Direct nested-loop cross-correlation with zero padding, stride 1.
fn conv_oracle(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let &[ci, h, wd] = x.shape() else { panic!() };
    let &[co, _, k, _] = w.shape() else { panic!() };
    let mut out = Tensor::zeros(&[co, h, wd]);
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0;
                for i in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = xx as isize + kx as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.data()[(i * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * ci + i) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out.data_mut()[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

fn run_conv(x: &Tensor, w: &Tensor, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, 1, pad).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_ones_center_and_corners() {
    let y = run_conv(&Tensor::full(&[1, 3, 3], 1.0), &Tensor::full(&[1, 1, 3, 3], 1.0), 1);
    assert_eq!(y.shape(), &[1, 3, 3]);
    assert_eq!(y.data()[4], 9.0);
    for corner in [0, 2, 6, 8] {
        assert_eq!(y.data()[corner], 4.0);
    }
}

#[test]
fn conv_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&[2, 4, 5], &mut rng);
    let mut w = Tensor::zeros(&[2, 2, 3, 3]);
    w.data_mut()[4] = 1.0; // o=0,i=0 center
    w.data_mut()[(2 + 1) * 9 + 4] = 1.0; // o=1,i=1 center
    assert!(run_conv(&x, &w, 1).bit_eq(&x));
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randn(&[2, 5, 5], &mut rng);
    let w = randn(&[3, 2, 3, 3], &mut rng);
    let diff = run_conv(&x, &w, 1).max_abs_diff(&conv_oracle(&x, &w, 1));
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn conv_is_linear_in_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let x = randn(&[3, 6, 6], &mut rng);
        let y = randn(&[3, 6, 6], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        let (a, b): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let combo = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = run_conv(&combo, &w, 1);
        let (cx, cy) = (run_conv(&x, &w, 1), run_conv(&y, &w, 1));
        let rhs = Tensor::from_fn(lhs.shape(), |i| a * cx.data()[i] + b * cy.data()[i]);
        assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }
}

#[test]
fn conv_shape_errors_name_dimension() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 5, 3, 3]));
    match g.conv2d(x, w, 1, 1) {
        Err(TensorError::DimMismatch { dim, expected, actual, .. }) => {
            assert_eq!((dim, expected, actual), ("c_in", 5, 2));
        }
        other => panic!("unexpected {other:?}"),
    }
    let w_even = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
    assert!(matches!(g.conv2d(x, w_even, 1, 0), Err(TensorError::Invalid { .. })));
}

fn run_modconv(x: &Tensor, w: &Tensor, s: &Tensor, demod: bool) -> Tensor {
    let mut g = Graph::new();
    let (xv, wv, sv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(s.clone()));
    let y = g.modulated_conv2d(xv, wv, sv, demod, 1e-8).unwrap();
    g.value(y).clone()
}

#[test]
fn neutral_modulation_equals_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&[3, 5, 5], &mut rng);
    let w = randn(&[2, 3, 3, 3], &mut rng);
    let y = run_modconv(&x, &w, &Tensor::full(&[3], 1.0), false);
    assert!(y.bit_eq(&run_conv(&x, &w, 1)));
}

#[test]
fn doubled_style_doubles_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&[3, 5, 5], &mut rng);
    let w = randn(&[2, 3, 3, 3], &mut rng);
    let one = run_modconv(&x, &w, &Tensor::full(&[3], 1.0), false);
    let two = run_modconv(&x, &w, &Tensor::full(&[3], 2.0), false);
    assert!(two.bit_eq(&one.map(|v| 2.0 * v)));
}

#[test]
fn demodulation_normalises_white_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&[1, 64, 64], &mut rng);
    let w = randn(&[1, 1, 3, 3], &mut rng).map(|v| 7.0 * v);
    let y = run_modconv(&x, &w, &Tensor::full(&[1], 0.3), true);
    let n = y.numel() as f64;
    let mean = y.sum() / n;
    let sd = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((0.8..=1.2).contains(&sd), "{sd}");
}

#[test]
fn modconv_rejects_bad_style() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let s = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(
        g.modulated_conv2d(x, w, s, true, 1e-8),
        Err(TensorError::DimMismatch { dim: "style length", .. })
    ));
    let s_nan = g.constant(Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap());
    assert!(g.modulated_conv2d(x, w, s_nan, true, 1e-8).is_err());
}

#[test]
fn quadratic_gradient() {
    let x0 = Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut g = Graph::new();
    let x = g.param(x0.clone());
    let sq = g.square(x);
    let l = g.sum(sq);
    let mut grads = g.backward(l).unwrap();
    assert_eq!(grads.take(x), x0.map(|v| 2.0 * v));
}

#[test]
fn abs_gradient_of_positive_inputs_is_one() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![3], vec![0.1, 2.0, 5.0]).unwrap());
    let a = g.abs(x);
    let l = g.sum(a);
    let mut grads = g.backward(l).unwrap();
    assert_eq!(grads.take(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn abs_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![0.0, -1.0]).unwrap());
    let a = g.abs(x);
    let l = g.sum(a);
    let mut grads = g.backward(l).unwrap();
    assert_eq!(grads.take(x).data(), &[0.0, -1.0]);
}

#[test]
fn l1_of_conv_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&[2, 5, 5], &mut rng);
    let w = randn(&[3, 2, 3, 3], &mut rng);
    let err = grad_check(
        |g, wv| {
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, wv, 1, 1)?;
            let a = g.abs(y);
            Ok(g.sum(a))
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn grad_check_trivial_cases() {
    let p = Tensor::new(vec![3], vec![0.3, -1.7, 2.2]).unwrap();
    let quad = grad_check(
        |g, x| {
            let s = g.square(x);
            Ok(g.sum(s))
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(quad < 1e-8, "{quad}");
    let constant = grad_check(
        |g, x| {
            let z = g.scale(x, 0.0);
            let s = g.sum(z);
            Ok(g.add_scalar(s, 4.0))
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert_eq!(constant, 0.0);
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[2], 1.0));
    let unused = g.param(Tensor::full(&[3], 1.0));
    let l = g.sum(x);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3]));
}

#[test]
fn cosine_gram_rejects_zero_rows() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    assert!(matches!(g.cosine_gram(x), Err(TensorError::DegenerateRow { row: 1, .. })));
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&[2, 3, 8, 8], &mut rng);
    let w = randn(&[4, 3, 3, 3], &mut rng);
    let s = randn(&[2, 3], &mut rng);
    let a = run_modconv(&x, &w, &s, true);
    let b = run_modconv(&x, &w, &s, true);
    assert!(a.bit_eq(&b));
}
