use lgd_core::rng::seeded;
use lgd_core::tensor::{Tape, Tensor, Var};
use lgd_core::Error;
use rand::Rng;

/// Central differences of `sum(f(inputs) ⊙ R)` for a fixed random `R`,
/// compared against the tape. Returns the worst relative error.
fn fd_check(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor], r: Option<&Tensor>, grad: bool| -> (f64, Vec<Tensor>, Tensor) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| if grad { tape.param(x.clone()) } else { tape.constant(x.clone()) })
            .collect();
        let y = f(&mut tape, &vars);
        let shape = tape.shape(y).to_vec();
        let r = match r {
            Some(r) => r.clone(),
            None => Tensor::uniform(&shape, -1.0, 1.0, &mut seeded(99)),
        };
        let rv = tape.constant(r.clone());
        let weighted = tape.mul(y, rv).unwrap();
        let loss = tape.sum(weighted).unwrap();
        let value = tape.value(loss).data()[0];
        let mut grads = Vec::new();
        if grad {
            tape.backward(loss).unwrap();
            grads = vars.iter().map(|v| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v)))).collect();
        }
        (value, grads, r)
    };
    let (_, grads, r) = eval(inputs, None, true);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[j] += eps;
            let (lp, _, _) = eval(&xs, Some(&r), false);
            xs[k].data_mut()[j] -= 2.0 * eps;
            let (lm, _, _) = eval(&xs, Some(&r), false);
            let fd = (lp - lm) / (2.0 * eps);
            let an = grads[k].data()[j];
            let scale = fd.abs().max(an.abs());
            if scale > 1e-7 {
                worst = worst.max((fd - an).abs() / scale);
            }
        }
    }
    worst
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut seeded(seed))
}

/// Values bounded away from zero so ReLU kinks are not straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn value_of(f: impl FnOnce(&mut Tape) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

#[test]
fn elementwise_cases() {
    let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
    let got = value_of(|t| {
        let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
        t.add(a, b).unwrap()
    });
    assert_eq!(got.data(), &[4.0, 6.0]);
    let x = rand_t(&[3, 4], 1);
    let got = value_of(|t| {
        let (a, b) = (t.constant(x.clone()), t.constant(Tensor::ones(&[3, 4])));
        t.mul(a, b).unwrap()
    });
    assert_eq!(got, x);
}

#[test]
fn broadcast_add_matches_loop_oracle() {
    let x = rand_t(&[4, 5, 6], 2);
    let s = rand_t(&[4, 1, 1], 3);
    let got = value_of(|t| {
        let (a, b) = (t.constant(x.clone()), t.constant(s.clone()));
        t.add(a, b).unwrap()
    });
    assert_eq!(got.shape(), &[4, 5, 6]);
    for c in 0..4 {
        for i in 0..5 {
            for j in 0..6 {
                let want = x.at(&[c, i, j]) + s.at(&[c, 0, 0]);
                assert!((got.at(&[c, i, j]) - want).abs() < 1e-12);
            }
        }
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_cases() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let got = value_of(|t| {
        let (a, b) = (t.constant(a.clone()), t.constant(b.clone()));
        t.matmul(a, b).unwrap()
    });
    assert_eq!(got.data(), &[19.0, 22.0, 43.0, 50.0]);

    let a = rand_t(&[5, 7], 4);
    let b = rand_t(&[7, 3], 5);
    let got = value_of(|t| {
        let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
        t.matmul(x, y).unwrap()
    });
    for i in 0..5 {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..7 {
                s += a.at(&[i, k]) * b.at(&[k, j]);
            }
            assert!((got.at(&[i, j]) - s).abs() < 1e-12);
        }
    }
    let eye = Tensor::from_fn(&[3, 3], |k| if k % 4 == 0 { 1.0 } else { 0.0 });
    let x = rand_t(&[3, 2], 6);
    let got = value_of(|t| {
        let (e, y) = (t.constant(eye.clone()), t.constant(x.clone()));
        t.matmul(e, y).unwrap()
    });
    assert_eq!(got, x);
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize, dil: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let ow = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = b[o];
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky * dil) as isize - pad as isize;
                            let ix = (xo * stride + kx * dil) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                s += w.at(&[o, c, ky, kx]) * x.at(&[c, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = s;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, dil: usize) -> Tensor {
    value_of(|t| {
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let bv = b.map(|b| t.constant(b.clone()));
        t.conv2d(xv, wv, bv, stride, pad, dil).unwrap()
    })
}

#[test]
fn conv_hand_cases() {
    let x = rand_t(&[1, 4, 4], 7);
    assert_eq!(conv(&x, &Tensor::ones(&[1, 1, 1, 1]), None, 1, 0, 1), x);
    let y = conv(&Tensor::ones(&[1, 5, 5]), &Tensor::ones(&[1, 1, 3, 3]), None, 1, 1, 1);
    assert_eq!(y.at(&[0, 2, 2]), 9.0);
    assert_eq!(y.at(&[0, 0, 0]), 4.0);
    assert_eq!(y.at(&[0, 0, 2]), 6.0);
}

#[test]
fn conv_matches_loop_oracle_with_dilation() {
    let x = rand_t(&[3, 8, 7], 8);
    let w = rand_t(&[4, 3, 3, 3], 9);
    let b = rand_t(&[4], 10);
    let mut results = Vec::new();
    for (stride, pad, dil) in [(1, 1, 1), (1, 2, 2), (2, 1, 1), (2, 3, 3), (1, 0, 2)] {
        let got = conv(&x, &w, Some(&b), stride, pad, dil);
        let want = naive_conv(&x, &w, b.data(), stride, pad, dil);
        assert_eq!(got.shape(), want.shape());
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12);
        }
        results.push(got);
    }
    // same padding-to-size ratio, different receptive field
    assert_eq!(results[0].shape(), results[1].shape());
    assert_ne!(results[0], results[1]);
}

#[test]
fn conv_rejects_bad_geometry() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 4, 4]));
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    assert!(matches!(tape.conv2d(x, w, None, 1, 1, 0), Err(Error::InvalidHyperparameter(_))));
    let w2 = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, w2, None, 1, 1, 1), Err(Error::ShapeMismatch { .. })));
    let big = tape.constant(Tensor::ones(&[1, 1, 7, 7]));
    assert!(tape.conv2d(x, big, None, 1, 0, 1).is_err());
}

#[test]
fn softmax_cases() {
    let sm = |v: Vec<f64>| {
        let n = v.len();
        value_of(|t| {
            let x = t.constant(Tensor::new(vec![1, n], v).unwrap());
            t.softmax(x, 1).unwrap()
        })
    };
    for v in sm(vec![0.0, 0.0, 0.0]).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(sm(vec![1000.0, 1000.0]).data(), &[0.5, 0.5]);
    let got = sm(vec![1.0, 2.0, 3.0]);
    for (g, e) in got.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
        assert!((g - e).abs() < 5e-9);
    }
    let x = rand_t(&[4, 6], 11).map(|v| 30.0 * v);
    let shifted = x.map(|v| v + 123.0);
    let a = value_of(|t| {
        let v = t.constant(x.clone());
        t.softmax(v, 1).unwrap()
    });
    let b = value_of(|t| {
        let v = t.constant(shifted.clone());
        t.softmax(v, 1).unwrap()
    });
    for row in a.data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| *p > 0.0 && *p < 1.0));
    }
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn backward_cases() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let l = tape.sum(x).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    let c = tape.constant(Tensor::ones(&[2]));
    let l = tape.sum(c).unwrap();
    assert!(matches!(tape.backward(l), Err(Error::DetachedGraph)));
}

#[test]
fn reused_parameter_accumulates() {
    // loss = sum(x·x + 3x): dl/dx = 2x + 3 from two paths
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let lin = tape.scale(x, 3.0).unwrap();
    let s = tape.add(sq, lin).unwrap();
    let l = tape.sum(s).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[5.0, -1.0]);
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::full(&[1], f64::MAX));
    assert!(matches!(tape.add(a, a), Err(Error::NonFinite(_))));
}

const TOL: f64 = 1e-4;

#[test]
fn fd_elementwise_with_broadcast() {
    let xs = [rand_t(&[3, 2, 4], 20), rand_t(&[3, 1, 1], 21)];
    assert!(fd_check(&xs, |t, v| t.add(v[0], v[1]).unwrap()) < TOL);
    assert!(fd_check(&xs, |t, v| t.sub(v[0], v[1]).unwrap()) < TOL);
    assert!(fd_check(&xs, |t, v| t.mul(v[0], v[1]).unwrap()) < TOL);
    assert!(fd_check(&xs[..1], |t, v| t.scale(v[0], -2.5).unwrap()) < TOL);
}

#[test]
fn fd_matmul_transpose_reshape() {
    let xs = [rand_t(&[4, 3], 22), rand_t(&[3, 5], 23)];
    assert!(fd_check(&xs, |t, v| t.matmul(v[0], v[1]).unwrap()) < TOL);
    assert!(fd_check(&xs[..1], |t, v| t.transpose(v[0]).unwrap()) < TOL);
    assert!(fd_check(&xs[..1], |t, v| t.reshape(v[0], &[2, 6]).unwrap()) < TOL);
}

#[test]
fn fd_conv2d() {
    for (stride, pad, dil) in [(1, 1, 1), (1, 2, 2), (2, 1, 1)] {
        let xs = [rand_t(&[2, 6, 5], 24), rand_t(&[3, 2, 3, 3], 25), rand_t(&[3], 26)];
        let worst = fd_check(&xs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad, dil).unwrap());
        assert!(worst < TOL, "conv s{stride} p{pad} d{dil}: {worst}");
    }
}

#[test]
fn fd_activations_and_pooling() {
    let x = away_from_zero(&[2, 4, 6], 27);
    assert!(fd_check(&[x.clone()], |t, v| t.relu(v[0]).unwrap()) < TOL);
    assert!(fd_check(&[rand_t(&[2, 3, 3], 28)], |t, v| t.softplus(v[0]).unwrap()) < TOL);
    // distinct values keep the pooled argmax stable under perturbation
    let distinct = Tensor::from_fn(&[2, 4, 6], |k| ((k * 37) % 48) as f64 * 0.01);
    assert!(fd_check(&[distinct], |t, v| t.max_pool2(v[0]).unwrap()) < TOL);
}

#[test]
fn fd_softmax_concat_sums_cosine() {
    let x = rand_t(&[3, 4], 29);
    assert!(fd_check(&[x.clone()], |t, v| t.softmax(v[0], 0).unwrap()) < TOL);
    assert!(fd_check(&[x.clone()], |t, v| t.softmax(v[0], 1).unwrap()) < TOL);
    assert!(fd_check(&[x.clone()], |t, v| t.sum_axis(v[0], 1).unwrap()) < TOL);
    assert!(fd_check(&[x.clone()], |t, v| t.sum_axis(v[0], 0).unwrap()) < TOL);
    let parts = [rand_t(&[1, 2, 3], 30), rand_t(&[2, 2, 3], 31)];
    assert!(fd_check(&parts, |t, v| t.concat(v).unwrap()) < TOL);
    let dir: Vec<f64> = {
        let d = rand_t(&[4], 32).into_data();
        let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.into_iter().map(|x| x / n).collect()
    };
    let q = rand_t(&[4, 3, 2], 33);
    assert!(fd_check(&[q], move |t, v| t.cosine(v[0], &dir).unwrap()) < TOL);
}

#[test]
fn cosine_of_zero_column_is_zero() {
    let mut q = rand_t(&[3, 1, 2], 34);
    for c in 0..3 {
        q.data_mut()[c * 2] = 0.0;
    }
    let got = value_of(|t| {
        let v = t.constant(q.clone());
        t.cosine(v, &[1.0, 0.0, 0.0]).unwrap()
    });
    assert_eq!(got.data()[0], 0.0);
    assert!((got.data()[1] - q.at(&[0, 0, 1]) / (0..3).map(|c| q.at(&[c, 0, 1]).powi(2)).sum::<f64>().sqrt()).abs() < 1e-12);
}
