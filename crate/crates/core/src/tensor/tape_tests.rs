use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at4(o, c, ky, kx) * x.at4(s, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    let off = out.offset4(s, o, y, xo);
                    out.data_mut()[off] = acc;
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv_all_ones() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(&[1, 1, 3, 3]));
    let w = t.constant(Tensor::ones(&[1, 1, 2, 2]));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 2]);
    assert_eq!(t.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv_identity_kernel() {
    let mut r = rng(1);
    let input = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut r);
    let mut t = Tape::new();
    let x = t.constant(input.clone());
    let w = t.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = t.constant(Tensor::zeros(&[1]));
    let y = t.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(t.value(y), &input);
}

#[test]
fn conv_matches_naive_oracle() {
    let mut r = rng(2);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[4], 1.0, &mut r);
        let expected = naive_conv(&x, &w, b.data(), stride, pad);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(t.shape(y), expected.shape());
        assert_close(t.value(y).data(), expected.data(), 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(&[1, 2, 3, 3]));
    let w = t.constant(Tensor::ones(&[1, 3, 2, 2]));
    assert!(matches!(t.conv2d(x, w, None, 1, 0), Err(Error::Dimension(_))));
    let w = t.constant(Tensor::ones(&[1, 2, 6, 6]));
    assert!(matches!(t.conv2d(x, w, None, 1, 1), Err(Error::Dimension(_))));
}

#[test]
fn linear_cases() {
    let mut r = rng(3);
    let input = Tensor::randn(&[4, 8], 1.0, &mut r);
    let mut eye = Tensor::zeros(&[8, 8]);
    for i in 0..8 {
        eye.data_mut()[i * 8 + i] = 1.0;
    }
    let mut t = Tape::new();
    let x = t.constant(input.clone());
    let w = t.constant(eye);
    let b = t.constant(Tensor::zeros(&[8]));
    let y = t.linear(x, w, Some(b)).unwrap();
    assert_eq!(t.value(y).data(), input.data());

    let zw = t.constant(Tensor::zeros(&[3, 8]));
    let bias = t.constant(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = t.linear(x, zw, Some(bias)).unwrap();
    for row in t.value(y).data().chunks(3) {
        assert_eq!(row, &[1.0, -2.0, 0.5]);
    }

    let w = Tensor::randn(&[3, 8], 1.0, &mut r);
    let bias = Tensor::randn(&[3], 1.0, &mut r);
    let mut expected = vec![0.0; 12];
    for n in 0..4 {
        for j in 0..3 {
            let mut acc = bias.data()[j];
            for i in 0..8 {
                acc += w.data()[j * 8 + i] * input.data()[n * 8 + i];
            }
            expected[n * 3 + j] = acc;
        }
    }
    let (wv, bv) = (t.constant(w), t.constant(bias));
    let y = t.linear(x, wv, Some(bv)).unwrap();
    assert_close(t.value(y).data(), &expected, 1e-12);

    let bad = t.constant(Tensor::zeros(&[3, 7]));
    assert!(matches!(t.linear(x, bad, None), Err(Error::Dimension(_))));
}

#[test]
fn activation_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
    let s = t.sigmoid(x);
    assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    let sm = t.softmax_rows(x).unwrap();
    assert_eq!(t.value(sm).data(), &[0.5, 0.5]);
    let r = t.constant(Tensor::new(&[2], vec![-2.5, 3.1]).unwrap());
    let rr = t.relu(r);
    assert_eq!(t.value(rr).data(), &[0.0, 3.1]);
    let v = t.constant(Tensor::zeros(&[2, 2, 1, 1]));
    assert!(matches!(t.softmax_rows(v), Err(Error::Dimension(_))));
}

#[test]
fn sigmoid_and_softmax_ranges() {
    let mut r = rng(4);
    let mut t = Tape::new();
    let x = t.constant(Tensor::randn(&[6, 9], 3.0, &mut r));
    let s = t.sigmoid(x);
    assert!(t.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let sm = t.softmax_rows(x).unwrap();
    for row in t.value(sm).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pool_examples() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
    let g = t.pool(x, PoolKind::Gap).unwrap();
    assert_eq!(t.value(g).data(), &[4.0]);
    let mut data = vec![2.0; 4];
    data.extend([4.0; 4]);
    let x = t.constant(Tensor::new(&[1, 2, 2, 2], data).unwrap());
    let a = t.pool(x, PoolKind::ChannelAvg).unwrap();
    assert_eq!(t.shape(a), &[1, 1, 2, 2]);
    assert_eq!(t.value(a).data(), &[3.0; 4]);
}

#[test]
fn max_pools_match_naive_scan() {
    let mut r = rng(5);
    let input = Tensor::randn(&[3, 4, 5, 6], 1.0, &mut r);
    let mut t = Tape::new();
    let x = t.constant(input.clone());
    let gmp = t.pool(x, PoolKind::Gmp).unwrap();
    let cmax = t.pool(x, PoolKind::ChannelMax).unwrap();
    let cavg = t.pool(x, PoolKind::ChannelAvg).unwrap();
    let gap = t.pool(x, PoolKind::Gap).unwrap();
    for n in 0..3 {
        for c in 0..4 {
            let mut m = f64::NEG_INFINITY;
            let mut s = 0.0;
            for h in 0..5 {
                for w in 0..6 {
                    m = m.max(input.at4(n, c, h, w));
                    s += input.at4(n, c, h, w);
                }
            }
            assert_eq!(t.value(gmp).data()[n * 4 + c], m);
            assert!((t.value(gap).data()[n * 4 + c] - s / 30.0).abs() < 1e-12);
        }
        for h in 0..5 {
            for w in 0..6 {
                let vals: Vec<f64> = (0..4).map(|c| input.at4(n, c, h, w)).collect();
                let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(t.value(cmax).at4(n, 0, h, w), m);
                let avg = vals.iter().sum::<f64>() / 4.0;
                assert!((t.value(cavg).at4(n, 0, h, w) - avg).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn max_pool_ties_route_to_first() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 3.0, 0.0]).unwrap().requiring_grad());
    let m = t.pool(x, PoolKind::Gmp).unwrap();
    let s = t.sum(m);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn broadcast_mul_cases() {
    let mut r = rng(6);
    let feature = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
    let mut t = Tape::new();
    let f = t.constant(feature.clone());
    let ones = t.constant(Tensor::ones(&[2, 3, 1, 1]));
    let y = t.broadcast_mul(f, ones).unwrap();
    assert_eq!(t.value(y), &feature);
    let zeros = t.constant(Tensor::zeros(&[2, 1, 2, 2]));
    let y = t.broadcast_mul(f, zeros).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));

    let map = Tensor::randn(&[2, 3, 1, 1], 1.0, &mut r);
    let m = t.constant(map.clone());
    let y = t.broadcast_mul(f, m).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for h in 0..2 {
                for w in 0..2 {
                    let expected = feature.at4(n, c, h, w) * map.data()[n * 3 + c];
                    assert!((t.value(y).at4(n, c, h, w) - expected).abs() < 1e-12);
                }
            }
        }
    }
    let bad = t.constant(Tensor::ones(&[2, 3, 2, 1]));
    assert!(matches!(t.broadcast_mul(f, bad), Err(Error::Dimension(_))));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(&[5]).requiring_grad());
    let s = t.sigmoid(x);
    let loss = t.sum(s);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.25; 5]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(&[3], vec![1.0, -4.0, 2.0]).unwrap().requiring_grad());
    let cx = t.scale(x, 2.5);
    let loss = t.sum(cx);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[2.5; 3]);
    // second call accumulates
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[5.0; 3]);
    t.zero_grad();
    assert!(t.grad(x).is_none());

    assert!(matches!(t.backward(cx), Err(Error::Contract(_))));
}

#[test]
fn diamond_graph_sums_paths() {
    // y = sigmoid(x) shared by two consumers: loss = sum(y * y) + sum(3y)
    let input = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
    let f = |t: &mut Tape, x: Var| -> crate::Result<Var> {
        let y = t.sigmoid(x);
        let sq = t.mul(y, y)?;
        let a = t.sum(sq);
        let lin = t.scale(y, 3.0);
        let b = t.sum(lin);
        t.add(a, b)
    };
    assert!(grad_check(f, &input, 1e-5).unwrap() < 1e-7);
    let mut t = Tape::new();
    let x = t.leaf(input.clone().requiring_grad());
    let loss = f(&mut t, x).unwrap();
    t.backward(loss).unwrap();
    for (g, v) in t.grad(x).unwrap().iter().zip(input.data()) {
        let s = 1.0 / (1.0 + (-v).exp());
        let ds = s * (1.0 - s);
        assert!((g - (2.0 * s * ds + 3.0 * ds)).abs() < 1e-14);
    }
}

#[test]
fn grad_check_examples() {
    let mut r = rng(7);
    let input = Tensor::randn(&[10], 1.0, &mut r);
    let sig = |t: &mut Tape, x: Var| Ok(t.sum_of(|t| t.sigmoid(x)));
    assert!(grad_check(sig, &input, 1e-5).unwrap() < 1e-6);

    let away: Vec<f64> = input.data().iter().map(|v| if v.abs() < 0.1 { v + 0.5 } else { *v }).collect();
    let away = Tensor::new(&[10], away).unwrap();
    let relu = |t: &mut Tape, x: Var| Ok(t.sum_of(|t| t.relu(x)));
    assert!(grad_check(relu, &away, 1e-5).unwrap() < 1e-6);

    let constant = |t: &mut Tape, _x: Var| Ok(t.constant(Tensor::scalar(3.0)));
    assert_eq!(grad_check(constant, &input, 1e-5).unwrap(), 0.0);
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct gradient.
fn weighted(t: &mut Tape, y: Var, seed: u64) -> crate::Result<Var> {
    let w = Tensor::randn(t.shape(y), 1.0, &mut rng(seed));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

#[test]
fn every_op_passes_grad_check() {
    let tol = 1e-4;
    for trial in 0..10u64 {
        let mut r = rng(100 + trial);
        let x4 = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut r);
        let w4 = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let b4 = Tensor::randn(&[2], 1.0, &mut r);
        let x2 = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w2 = Tensor::randn(&[5, 4], 1.0, &mut r);
        let cmap = Tensor::randn(&[2, 3, 1, 1], 1.0, &mut r);
        let smap = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut r);

        let conv_x = |t: &mut Tape, x: Var| {
            let w = t.constant(w4.clone());
            let b = t.constant(b4.clone());
            let y = t.conv2d(x, w, Some(b), 2, 1)?;
            weighted(t, y, trial)
        };
        let conv_w = |t: &mut Tape, w: Var| {
            let x = t.constant(x4.clone());
            let y = t.conv2d(x, w, None, 1, 1)?;
            weighted(t, y, trial)
        };
        let conv_b = |t: &mut Tape, b: Var| {
            let x = t.constant(x4.clone());
            let w = t.constant(w4.clone());
            let y = t.conv2d(x, w, Some(b), 1, 0)?;
            weighted(t, y, trial)
        };
        assert!(grad_check(conv_x, &x4, 1e-5).unwrap() < tol);
        assert!(grad_check(conv_w, &w4, 1e-5).unwrap() < tol);
        assert!(grad_check(conv_b, &b4, 1e-5).unwrap() < tol);

        let lin_x = |t: &mut Tape, x: Var| {
            let w = t.constant(w2.clone());
            let y = t.linear(x, w, None)?;
            weighted(t, y, trial)
        };
        let lin_w = |t: &mut Tape, w: Var| {
            let x = t.constant(x2.clone());
            let y = t.linear(x, w, None)?;
            weighted(t, y, trial)
        };
        assert!(grad_check(lin_x, &x2, 1e-5).unwrap() < tol);
        assert!(grad_check(lin_w, &w2, 1e-5).unwrap() < tol);

        for kind in [Activation::Sigmoid, Activation::SoftmaxRows] {
            let f = |t: &mut Tape, x: Var| {
                let y = t.activation(x, kind)?;
                weighted(t, y, trial)
            };
            assert!(grad_check(f, &x2, 1e-5).unwrap() < tol, "{kind:?}");
        }
        for kind in [PoolKind::Gap, PoolKind::Gmp, PoolKind::ChannelAvg, PoolKind::ChannelMax] {
            let f = |t: &mut Tape, x: Var| {
                let y = t.pool(x, kind)?;
                weighted(t, y, trial)
            };
            assert!(grad_check(f, &x4, 1e-5).unwrap() < tol, "{kind:?}");
        }
        for map in [&cmap, &smap] {
            let wrt_feature = |t: &mut Tape, x: Var| {
                let m = t.constant(map.clone());
                let y = t.broadcast_mul(x, m)?;
                weighted(t, y, trial)
            };
            let wrt_map = |t: &mut Tape, m: Var| {
                let x = t.constant(x4.clone());
                let y = t.broadcast_mul(x, m)?;
                weighted(t, y, trial)
            };
            assert!(grad_check(wrt_feature, &x4, 1e-5).unwrap() < tol);
            assert!(grad_check(wrt_map, map, 1e-5).unwrap() < tol);
        }
    }
}

#[test]
fn relu_grad_check_away_from_kink() {
    let mut r = rng(8);
    for _ in 0..10 {
        let x: Vec<f64> = Tensor::randn(&[3, 4], 1.0, &mut r)
            .data()
            .iter()
            .map(|v| if v.abs() < 1e-3 { 0.5 } else { *v })
            .collect();
        let x = Tensor::new(&[3, 4], x).unwrap();
        let f = |t: &mut Tape, x: Var| {
            let y = t.relu(x);
            weighted(t, y, 9)
        };
        assert!(grad_check(f, &x, 1e-5).unwrap() < 1e-4);
    }
}
