use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (i * stride + ki) as isize - pad as isize;
                                let jj = (j * stride + kj) as isize - pad as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((s * c + ic) * h + ii as usize) * wd + jj as usize]
                                    * w.data()[((oc * c + ic) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((s * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    out
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn conv2d_identity_kernel() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new([1, 1, 1, 1], vec![5.0]).unwrap());
    let w = g.constant(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
    let b = g.constant(Tensor::new([1], vec![0.0]).unwrap());
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);
}

#[test]
fn conv2d_zero_input_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2, 3, 5, 5]));
    let w = g.constant(rand_tensor(&[4, 3, 3, 3], &mut rng));
    let b = g.constant(Tensor::zeros([4]));
    let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for &(shape, ks, stride, pad) in &[
        ([1usize, 1, 4, 4], [1usize, 1, 3, 3], 1usize, 0usize),
        ([2, 3, 7, 6], [4, 3, 3, 3], 2, 1),
        ([1, 2, 5, 5], [3, 2, 1, 1], 1, 0),
        ([1, 2, 8, 8], [2, 2, 5, 5], 2, 2),
    ] {
        let x = rand_tensor(&shape, &mut rng);
        let w = rand_tensor(&ks, &mut rng);
        let b: Vec<f64> = (0..ks[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = naive_conv(&x, &w, &b, stride, pad);
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (
            g.constant(x),
            g.constant(w),
            g.constant(Tensor::new([ks[0]], b).unwrap()),
        );
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert!(close(g.value(y).data(), &expected, 1e-6));
    }
}

#[test]
fn conv2d_rejects_bad_shapes() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
    assert!(matches!(
        g.conv2d(x, w, None, 1, 0),
        Err(crate::Error::Shape { .. })
    ));
    let big = g.constant(Tensor::zeros([1, 2, 7, 7]));
    assert!(g.conv2d(x, big, None, 1, 0).is_err());
}

#[test]
fn conv_transpose_broadcasts_single_pixel() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap());
    let w = g.constant(Tensor::full([1, 1, 2, 2], 1.0));
    let y = g.conv_transpose2d(x, w, None, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[3.0; 4]);

    let z = g.constant(Tensor::zeros([1, 1, 3, 3]));
    let y = g.conv_transpose2d(z, w, None, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 6, 6]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(n, a, b, h, k, s) in &[
        (1, 2, 3, 6, 2, 2),
        (2, 3, 2, 7, 3, 2),
        (1, 1, 1, 5, 3, 1),
        (2, 4, 2, 9, 3, 3),
    ] {
        // conv maps b channels (size h) to a channels; transposed conv goes back.
        let x = rand_tensor(&[n, b, h, h], &mut rng);
        let w = rand_tensor(&[a, b, k, k], &mut rng);
        let oh = (h - k) / s + 1;
        assert_eq!(
            (oh - 1) * s + k,
            h,
            "sizes chosen so the two maps are exact adjoints"
        );
        let y = rand_tensor(&[n, a, oh, oh], &mut rng);
        let mut g = Graph::<f64>::new();
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let cx = g.conv2d(xv, wv, None, s, 0).unwrap();
        let ty = g.conv_transpose2d(yv, wv, None, s).unwrap();
        let lhs = g.value(cx).dot(&y).unwrap();
        let rhs = x.dot(g.value(ty)).unwrap();
        assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
    }
}

#[test]
fn max_pool_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.max_pool2d(x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);

    let c = g.constant(Tensor::full([1, 2, 4, 4], 0.25));
    let y = g.max_pool2d(c, 2, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.25));

    let small = g.constant(Tensor::zeros([1, 1, 1, 3]));
    assert!(g.max_pool2d(small, 2, 2).is_err());
}

#[test]
fn max_pool_matches_window_scan_and_routes_ties_to_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[2, 3, 8, 8], &mut rng);
    let mut expected = Vec::new();
    for plane in x.data().chunks(64) {
        for i in 0..4 {
            for j in 0..4 {
                let mut m = f64::NEG_INFINITY;
                for di in 0..2 {
                    for dj in 0..2 {
                        m = m.max(plane[(2 * i + di) * 8 + 2 * j + dj]);
                    }
                }
                expected.push(m);
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let y = g.max_pool2d(xv, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), expected.as_slice());

    let mut g = Graph::<f64>::new();
    let xv = g.parameter(Tensor::full([1, 1, 2, 2], 1.0));
    let y = g.max_pool2d(xv, 2, 2).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(xv).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn global_avg_pool_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full([1, 1, 3, 5], 3.0));
    let y = g.global_avg_pool(c).unwrap();
    assert_eq!(g.value(y).data(), &[3.0]);
    let q = g.constant(Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.global_avg_pool(q).unwrap();
    assert_eq!(g.value(y).data(), &[2.5]);

    let x = rand_tensor(&[3, 4, 5, 6], &mut rng);
    let expected: Vec<f64> = x
        .data()
        .chunks(30)
        .map(|p| p.iter().sum::<f64>() / 30.0)
        .collect();
    let xv = g.constant(x);
    let y = g.global_avg_pool(xv).unwrap();
    assert_eq!(g.value(y).shape(), &[3, 4]);
    assert!(close(g.value(y).data(), &expected, 1e-6));
}

#[test]
fn batch_norm_train_mode_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::<f64>::from_fn([4, 3, 5, 5], |_| rng.gen_range(-3.0..7.0));
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full([3], 1.0));
    let beta = g.constant(Tensor::zeros([3]));
    let mut running = RunningStats::new(3);
    let y = g
        .batch_norm(xv, gamma, beta, &mut running, true, 0.1, 1e-5)
        .unwrap();
    let out = g.value(y).data();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|s| out[(s * 3 + ch) * 25..(s * 3 + ch + 1) * 25].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(
            mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4,
            "channel {ch}: mean {mean} var {var}"
        );
    }
    assert!(
        running.mean.iter().all(|&m| m != 0.0),
        "running mean must move toward the batch mean"
    );
}

#[test]
fn batch_norm_identity_on_normalized_batch_and_gamma_zero() {
    // One channel with mean 0 and biased variance 1.
    let data = vec![1.0, -1.0, 1.0, -1.0];
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::new([1, 1, 2, 2], data.clone()).unwrap());
    let one = g.constant(Tensor::full([1], 1.0));
    let zero = g.constant(Tensor::zeros([1]));
    let (y, _) = g
        .batch_norm_with(xv, one, zero, BnMode::Train, 1e-12)
        .unwrap();
    assert!(close(g.value(y).data(), &data, 1e-6));

    let beta = g.constant(Tensor::full([1], 0.7));
    let (y, _) = g
        .batch_norm_with(xv, zero, beta, BnMode::Train, 1e-5)
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));

    // Zero-variance channel stays finite thanks to eps.
    let flat = g.constant(Tensor::full([2, 1, 2, 2], 3.0));
    let (y, _) = g
        .batch_norm_with(flat, one, zero, BnMode::Train, 1e-5)
        .unwrap();
    assert!(g.value(y).is_finite());
}

#[test]
fn activation_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item(), 0.5);
    let r = g.constant(Tensor::new([2], vec![-2.0, 3.0]).unwrap());
    let y = g.relu(r).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 3.0]);

    let x = rand_tensor(&[50], &mut rng);
    let xv = g.constant(x.clone());
    let y = g.silu(xv).unwrap();
    for (&yv, &xv) in g.value(y).data().iter().zip(x.data()) {
        assert!((yv - xv / (1.0 + (-xv).exp())).abs() < 1e-7);
    }
    let big = g.constant(Tensor::new([3], vec![-800.0, 0.0, 800.0]).unwrap());
    let s = g.sigmoid(big).unwrap();
    assert!(g.value(s).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn dense_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&[3, 4], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let eye = g.constant(Tensor::from_fn([4, 4], |i| {
        if i / 4 == i % 4 {
            1.0
        } else {
            0.0
        }
    }));
    let zb = g.constant(Tensor::zeros([4]));
    let y = g.dense(xv, eye, zb).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let zw = g.constant(Tensor::zeros([4, 2]));
    let b = g.constant(Tensor::new([2], vec![0.5, -1.5]).unwrap());
    let y = g.dense(xv, zw, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

    let w = rand_tensor(&[4, 5], &mut rng);
    let bias = rand_tensor(&[5], &mut rng);
    let mut expected = vec![0.0; 15];
    for i in 0..3 {
        for k in 0..5 {
            let mut acc = bias.data()[k];
            for f in 0..4 {
                acc += x.data()[i * 4 + f] * w.data()[f * 5 + k];
            }
            expected[i * 5 + k] = acc;
        }
    }
    let (wv, bv) = (g.constant(w), g.constant(bias));
    let y = g.dense(xv, wv, bv).unwrap();
    assert!(close(g.value(y).data(), &expected, 1e-6));
    let bad = g.constant(Tensor::zeros([3, 5]));
    assert!(g.dense(xv, bad, bv).is_err());
}

#[test]
fn dropout_modes_and_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([10_000], 1.0));
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    assert!(g.dropout(x, 1.0, true, &mut rng).is_err());

    let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
    let out = g.value(y).data();
    let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / 10_000.0;
    assert!(
        (survivors - 0.5).abs() <= 0.02,
        "survivor fraction {survivors}"
    );
    let mean = out.iter().sum::<f64>() / 10_000.0;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn bce_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::scalar(0.5));
    let t = g.constant(Tensor::scalar(1.0));
    let l = g.bce_loss(p, t).unwrap();
    assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-6);

    let p = g.constant(Tensor::new([2], vec![0.0, 1.0]).unwrap());
    let t = g.constant(Tensor::new([2], vec![0.0, 1.0]).unwrap());
    let l = g.bce_loss(p, t).unwrap();
    assert!(g.value(l).item() < 1e-6);

    let pred = Tensor::<f64>::from_fn([40], |_| rng.gen_range(0.01..0.99));
    let target = Tensor::<f64>::from_fn([40], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let expected = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
        .sum::<f64>()
        / 40.0;
    let (pv, tv) = (g.constant(pred), g.constant(target));
    let l = g.bce_loss(pv, tv).unwrap();
    assert!((g.value(l).item() - expected).abs() < 1e-6);

    let short = g.constant(Tensor::zeros([3]));
    assert!(g.bce_loss(pv, short).is_err());
}

#[test]
fn l2_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::<f64>::new();
    let w = g.constant(Tensor::new([1], vec![3.0]).unwrap());
    let l = g.l2_penalty(&[w], 0.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let l = g.l2_penalty(&[w], 1.0).unwrap();
    assert_eq!(g.value(l).item(), 9.0);

    let ps: Vec<Tensor<f64>> = (0..4).map(|i| rand_tensor(&[i + 2, 3], &mut rng)).collect();
    let expected: f64 = 0.01
        * ps.iter()
            .flat_map(|p| p.data().iter().map(|v| v * v))
            .sum::<f64>();
    let vars: Vec<Var> = ps.into_iter().map(|p| g.constant(p)).collect();
    let l = g.l2_penalty(&vars, 0.01).unwrap();
    assert!((g.value(l).item() - expected).abs() < 1e-12);
    assert!(g.l2_penalty(&vars, -1.0).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f32>::new();
    let x = g.parameter(Tensor::zeros([2, 3, 4]));
    let l = g.sum(x).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_bce_of_sigmoid_matches_chain_rule() {
    let (w0, x0, t0) = (0.7f64, -1.3f64, 1.0f64);
    let mut g = Graph::<f64>::new();
    let w = g.parameter(Tensor::new([1, 1], vec![w0]).unwrap());
    let x = g.constant(Tensor::new([1, 1], vec![x0]).unwrap());
    let zero = g.constant(Tensor::zeros([1]));
    let z = g.dense(x, w, zero).unwrap();
    let p = g.sigmoid(z).unwrap();
    let t = g.constant(Tensor::new([1, 1], vec![t0]).unwrap());
    let l = g.bce_loss(p, t).unwrap();
    g.backward(l).unwrap();
    let pv = 1.0 / (1.0 + (-(w0 * x0)).exp());
    assert!((g.grad(w).unwrap().item() - (pv - t0) * x0).abs() < 1e-12);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f32>::new();
    let c = g.constant(Tensor::scalar(1.0));
    assert!(matches!(g.backward(c), Err(crate::Error::NotAttached)));

    let mut other = Graph::<f32>::new();
    let foreign = other.parameter(Tensor::scalar(1.0));
    assert!(matches!(
        g.backward(foreign),
        Err(crate::Error::NotAttached)
    ));

    let x = g.parameter(Tensor::zeros([2]));
    assert!(g.backward(x).is_err(), "non-scalar loss");

    let l = g.sum(x).unwrap();
    g.backward_retain(l).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(crate::Error::GraphReleased)));
    assert!(matches!(g.sum(x), Err(crate::Error::GraphReleased)));
}

#[test]
fn ops_do_not_modify_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&[2, 2, 4, 4], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let (xv, wv) = (g.parameter(x.clone()), g.parameter(w.clone()));
    let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
    let y = g.relu(y).unwrap();
    let l = g.sum(y).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.value(xv).data(), x.data());
    assert_eq!(g.value(wv).data(), w.data());
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f32>::from_fn([2, 3, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f32>::from_fn([4, 3, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let mut g = Graph::<f32>::new();
        let (xv, wv) = (g.constant(x), g.parameter(w));
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = g.dropout(y, 0.3, true, &mut rng).unwrap();
        let l = g.mean(y).unwrap();
        g.backward(l).unwrap();
        (g.value(y).data().to_vec(), g.grad(wv).unwrap().into_data())
    };
    assert_eq!(run(), run());
}
