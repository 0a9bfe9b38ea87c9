use approx::assert_relative_eq;
use cfsl::gradcheck::check_gradient;
use cfsl::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct nested-loop "same" convolution.
fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [bs, h, wd, cin] = x.shape().try_into().unwrap();
    let [kh, kw, _, cout] = w.shape().try_into().unwrap();
    let (ph, pw) = (kh as i64 / 2, kw as i64 / 2);
    let mut out = vec![0.0; bs * h * wd * cout];
    for n in 0..bs {
        for i in 0..h {
            for j in 0..wd {
                for o in 0..cout {
                    let mut acc = b.data()[o];
                    for di in 0..kh {
                        for dj in 0..kw {
                            let (y, xx) = (i as i64 + di as i64 - ph, j as i64 + dj as i64 - pw);
                            if y < 0 || xx < 0 || y >= h as i64 || xx >= wd as i64 {
                                continue;
                            }
                            for c in 0..cin {
                                let xv = x.data()[((n * h + y as usize) * wd + xx as usize) * cin + c];
                                acc += xv * w.data()[((di * kw + dj) * cin + c) * cout + o];
                            }
                        }
                    }
                    out[((n * h + i) * wd + j) * cout + o] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loops() {
    for (seed, k) in [(0, 1), (1, 3), (2, 5)] {
        let x = random(&[2, 6, 5, 3], seed);
        let w = random(&[k, k, 3, 4], seed + 10);
        let b = random(&[4], seed + 20);
        let mut g = Graph::new();
        let (xn, wn, bn) = (g.constant(x.clone()).unwrap(), g.constant(w.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let y = g.conv2d(xn, wn, bn).unwrap();
        assert_eq!(g.shape(y), &[2, 6, 5, 4]);
        for (a, e) in g.value(y).data().iter().zip(naive_conv(&x, &w, &b)) {
            assert_relative_eq!(*a, e, epsilon = 1e-12);
        }
    }
}

#[test]
fn matmul_matches_dot_products() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let mut g = Graph::new();
    let (an, bn) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
    let c = g.matmul(an, bn).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let e: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 2 + j]).sum();
            assert_relative_eq!(g.value(c).data()[i * 2 + j], e, epsilon = 1e-14);
        }
    }
}

#[test]
fn pooling_matches_block_means() {
    let x = random(&[1, 4, 4, 2], 3);
    let mut g = Graph::new();
    let xn = g.constant(x.clone()).unwrap();
    let p = g.avg_pool2(xn).unwrap();
    let gp = g.global_avg_pool(xn).unwrap();
    assert_eq!(g.shape(p), &[1, 2, 2, 2]);
    let at = |i: usize, j: usize, c: usize| x.data()[(i * 4 + j) * 2 + c];
    for i in 0..2 {
        for j in 0..2 {
            for c in 0..2 {
                let e = (at(2 * i, 2 * j, c) + at(2 * i + 1, 2 * j, c) + at(2 * i, 2 * j + 1, c) + at(2 * i + 1, 2 * j + 1, c)) / 4.0;
                assert_relative_eq!(g.value(p).data()[(i * 2 + j) * 2 + c], e, epsilon = 1e-15);
            }
        }
    }
    for c in 0..2 {
        let e: f64 = (0..16).map(|i| x.data()[i * 2 + c]).sum::<f64>() / 16.0;
        assert_relative_eq!(g.value(gp).data()[c], e, epsilon = 1e-15);
    }
}

#[test]
fn backward_of_sum_of_products() {
    // d/da sum(a*b) = b
    let a = random(&[5], 4);
    let b = random(&[5], 5);
    let mut g = Graph::new();
    let an = g.param(a).unwrap();
    let bn = g.constant(b.clone()).unwrap();
    let p = g.mul(an, bn).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(an).unwrap().data(), b.data());
    assert!(g.grad(bn).is_none());
}

#[test]
fn backward_accumulates_over_repeated_use() {
    // d/dx sum(x + x) = 2
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, -2.0, 3.0])).unwrap();
    let y = g.add(x, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn softmax_cross_entropy_matches_log_sum_exp() {
    let logits = [1.0, 2.0, -0.5];
    let mut g = Graph::new();
    let l = g.param(Tensor::from_vec(logits.to_vec())).unwrap();
    let ce = g.softmax_cross_entropy(l, &[1]).unwrap();
    let lse = logits.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
    assert_relative_eq!(g.value(ce).item().unwrap(), lse - 2.0, epsilon = 1e-14);
    g.backward(ce).unwrap();
    let grad = g.grad(l).unwrap();
    for (i, v) in logits.iter().enumerate() {
        let p = (v - lse).exp();
        let e = if i == 1 { p - 1.0 } else { p };
        assert_relative_eq!(grad.data()[i], e, epsilon = 1e-14);
    }
}

#[test]
fn shape_mismatches_are_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 2])).unwrap();
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, a).is_err());
    assert!(g.softmax_cross_entropy(a, &[0]).is_err());
    assert!(g.softmax_cross_entropy(a, &[0, 3]).is_err());
}

#[test]
fn conv_and_pool_gradients_match_finite_differences() {
    let w = random(&[3, 3, 2, 3], 7);
    let b = random(&[3], 8);
    let x = random(&[1, 4, 4, 2], 9);
    let report = check_gradient(
        |g: &mut Graph, xn| {
            let wn = g.constant(w.clone())?;
            let bn = g.constant(b.clone())?;
            let c = g.conv2d(xn, wn, bn)?;
            let r = g.relu(c)?;
            let p = g.avg_pool2(r)?;
            let q = g.global_avg_pool(p)?;
            let n = g.l2_normalize(q)?;
            g.weighted_sum(n, vec![0.3, -1.2, 0.7])
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
    let report = check_gradient(
        |g: &mut Graph, wn| {
            let xn = g.constant(x.clone())?;
            let bn = g.constant(b.clone())?;
            let c = g.conv2d(xn, wn, bn)?;
            let a = g.abs(c)?;
            g.sum(a)
        },
        &w,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn zero_rows_stay_zero_under_normalization() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 3.0, 0.0, 4.0]).unwrap()).unwrap();
    let n = g.l2_normalize(x).unwrap();
    for (a, e) in g.value(n).data().iter().zip([0.0, 0.0, 0.0, 0.6, 0.0, 0.8]) {
        assert_relative_eq!(*a, e, epsilon = 1e-15);
    }
    assert_eq!(&g.value(n).data()[..3], &[0.0; 3]);
    let s = g.sum(n).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().is_finite());
}

proptest! {
    #[test]
    fn normalized_rows_have_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(v)).unwrap();
        let n = g.l2_normalize(x).unwrap();
        let norm: f64 = g.value(n).data().iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_and_backward_stay_finite(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let x = random(&[1, 4, 4, 2], seed).map(|v| v * scale);
        let w = random(&[3, 3, 2, 3], seed ^ 1);
        let b = random(&[3], seed ^ 2);
        let mut g = Graph::new();
        let xn = g.param(x).unwrap();
        let wn = g.param(w).unwrap();
        let bn = g.param(b).unwrap();
        let c = g.conv2d(xn, wn, bn).unwrap();
        let r = g.relu(c).unwrap();
        let q = g.global_avg_pool(r).unwrap();
        let n = g.l2_normalize(q).unwrap();
        let l = g.scale(n, 30.0).unwrap();
        let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
        g.backward(ce).unwrap();
        prop_assert!(g.value(ce).is_finite());
        for id in [xn, wn, bn] {
            prop_assert!(g.grad(id).unwrap().is_finite());
        }
    }
}
