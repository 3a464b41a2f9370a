//! Forward ops checked against brute-force reference implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smag_tensor::{
    BinaryKind, Graph, NormMode, PointwiseKind, PoolKind, RunningStats, Tensor, TensorError,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
    let n = shape.iter().product();
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Direct sliding-window convolution in f64.
fn conv_oracle(
    x: &[f64],
    [b, cin, h, w]: [usize; 4],
    k: &[f64],
    [cout, _, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x[((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

/// Scatter form of the transposed convolution.
fn conv_transpose_oracle(
    x: &[f64],
    [b, cin, h, w]: [usize; 4],
    k: &[f64],
    [_, cout, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
) -> Vec<f64> {
    let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for v in &mut out[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow] {
                *v = bias[co];
            }
        }
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[((bi * cin + ci) * h + y) * w + xx];
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let oy = y * stride + ky;
                                let ox = xx * stride + kx;
                                out[((bi * cout + co) * oh + oy) * ow + ox] +=
                                    v * k[((ci * cout + co) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_case(rng: &mut ChaCha8Rng, xs: [usize; 4], ks: [usize; 4], stride: usize, pad: usize) -> f64 {
    let x = random(rng, &xs);
    let k = random(rng, &ks);
    let bias = random(rng, &[ks[0]]);
    let (expect, oh, ow) = conv_oracle(&x, xs, &k, ks, &bias, stride, pad);
    let mut g = Graph::<f32>::new();
    let xv = g.constant(Tensor::from_f64(xs.to_vec(), &x).unwrap());
    let kv = g.constant(Tensor::from_f64(ks.to_vec(), &k).unwrap());
    let bv = g.constant(Tensor::from_f64(vec![ks[0]], &bias).unwrap());
    let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
    assert_eq!(g.shape(y), &[xs[0], ks[0], oh, ow]);
    let got = g.value(y).data();
    // Inputs are rounded to f32 first; compare against the oracle on the rounded values.
    let xr: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
    let kr: Vec<f64> = k.iter().map(|&v| v as f32 as f64).collect();
    let br: Vec<f64> = bias.iter().map(|&v| v as f32 as f64).collect();
    let (expect_r, _, _) = conv_oracle(&xr, xs, &kr, ks, &br, stride, pad);
    assert_eq!(expect.len(), expect_r.len());
    got.iter()
        .zip(&expect_r)
        .map(|(&a, &e)| (a as f64 - e).abs())
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_ones_receptive_field_sums() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let k = g.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv2d_pointwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = Tensor::<f32>::from_f64(vec![2, 1, 5, 4], &random(&mut rng, &[2, 1, 5, 4])).unwrap();
    let mut g = Graph::<f32>::new();
    let x = g.constant(xs.clone());
    let k = g.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y), &xs);
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let err = conv_case(&mut rng, [2, 3, 8, 8], [4, 3, 3, 3], 1, 1);
    assert!(err <= 1e-6, "max abs diff {err}");
}

#[test]
fn conv2d_twenty_random_geometries() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20 {
        let k = [1, 2, 3][case % 3];
        let stride = 1 + rng.random_range(0..2);
        let pad = rng.random_range(0..=k / 2 + 1);
        let h = rng.random_range(k.max(3)..10);
        let w = rng.random_range(k.max(3)..10);
        let cin = rng.random_range(1..4);
        let cout = rng.random_range(1..5);
        let b = rng.random_range(1..3);
        let err = conv_case(&mut rng, [b, cin, h, w], [cout, cin, k, k], stride, pad);
        assert!(err <= 1e-6, "case {case}: max abs diff {err}");
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let k = g.constant(Tensor::zeros(vec![2, 2, 3, 3]));
    let err = g.conv2d(x, k, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"), "{msg}");
}

#[test]
fn conv_transpose_single_tap() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![1, 1, 1, 1], 3.5));
    let k = g.constant(Tensor::ones(vec![1, 1, 2, 2]));
    let y = g.conv_transpose2d(x, k, None, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[3.5; 4]);
}

#[test]
fn conv_transpose_doubles_extent() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 4, 8, 8]));
    let k = g.constant(Tensor::zeros(vec![4, 6, 2, 2]));
    let y = g.conv_transpose2d(x, k, None, 2).unwrap();
    assert_eq!(g.shape(y), &[1, 6, 16, 16]);
}

#[test]
fn conv_transpose_rejects_zero_stride() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    let k = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
    assert!(g.conv_transpose2d(x, k, None, 0).is_err());
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <convT(x, w), y> == <x, conv(y, w)>, so convT(x, w) is the gradient of
    // sum(conv(y, w) * x) with respect to y.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = [2, 3, 4, 5];
    let ks = [3, 2, 2, 2];
    let x = Tensor::<f64>::from_f64(xs.to_vec(), &random(&mut rng, &xs)).unwrap();
    let k = Tensor::<f64>::from_f64(ks.to_vec(), &random(&mut rng, &ks)).unwrap();

    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(k.clone());
    let out = g.conv_transpose2d(xv, kv, None, 2).unwrap();
    let got = g.value(out).clone();
    assert_eq!(got.shape(), &[2, 2, 8, 10]);

    let mut adj = Graph::<f64>::new();
    let y = adj.leaf(Tensor::zeros(got.shape().to_vec()));
    let kv = adj.constant(k.clone());
    let conv = adj.conv2d(y, kv, None, 2, 0).unwrap();
    let xc = adj.constant(x.clone());
    let prod = adj.mul(conv, xc).unwrap();
    let loss = adj.sum(prod);
    adj.backward(loss).unwrap();
    let oracle = adj.grad(y).unwrap();
    assert!(got.max_abs_diff(oracle) <= 1e-6);

    let scatter = conv_transpose_oracle(x.data(), xs, k.data(), ks, &[0.0, 0.0], 2);
    let scatter = Tensor::<f64>::new(got.shape().to_vec(), scatter).unwrap();
    assert!(got.max_abs_diff(&scatter) <= 1e-12);
}

#[test]
fn avg_pool_checkerboard() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_f64(vec![1, 1, 2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap());
    let y = g.pool2d(PoolKind::Avg, x, 2, 2).unwrap();
    assert_eq!(g.value(y).data(), &[0.5]);
}

#[test]
fn max_pool_constant_input() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![1, 2, 4, 4], -1.25));
    let y = g.pool2d(PoolKind::Max, x, 2, 2).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == -1.25));
}

#[test]
fn max_pool_ties_route_to_first() {
    let mut g = Graph::<f32>::new();
    let x = g.leaf(Tensor::full(vec![1, 1, 2, 2], 2.0));
    let y = g.pool2d(PoolKind::Max, x, 2, 2).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn avg_pool_matches_window_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vals = random(&mut rng, &[1, 1, 8, 8]);
    for (k, s) in [(2, 2), (4, 4), (3, 1), (8, 8)] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![1, 1, 8, 8], &vals).unwrap());
        let y = g.pool2d(PoolKind::Avg, x, k, s).unwrap();
        let o = (8 - k) / s + 1;
        for oy in 0..o {
            for ox in 0..o {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += vals[(oy * s + ky) * 8 + ox * s + kx];
                    }
                }
                let want = acc / (k * k) as f64;
                let got = g.value(y).data()[oy * o + ox];
                assert!((got - want).abs() <= 1e-7);
            }
        }
    }
}

#[test]
fn pool_rejects_oversized_window() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 1, 3, 3]));
    assert!(g.pool2d(PoolKind::Max, x, 4, 1).is_err());
    assert!(g.pool2d(PoolKind::Avg, x, 2, 0).is_err());
}

#[test]
fn pointwise_definitions() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_f64(vec![3], &[0.0, -1.0, 2.0]).unwrap());
    let s = g.pointwise(PointwiseKind::Sigmoid, x);
    let r = g.pointwise(PointwiseKind::Relu, x);
    assert_eq!(g.value(s).data()[0], 0.5);
    assert_eq!(&g.value(r).data()[1..], &[0.0, 2.0]);
}

#[test]
fn sigmoid_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vals: Vec<f64> = (0..400).map(|_| rng.random_range(-30.0..30.0)).collect();
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![20, 20], &vals).unwrap());
    let y = g.sigmoid(x);
    for (&v, &got) in vals.iter().zip(g.value(y).data()) {
        let want = 1.0 / (1.0 + (-v).exp());
        assert!(((got - want) / want).abs() <= 1e-7);
        assert!(got > 0.0 && got < 1.0);
    }
    // the f32 path stays inside (0, 1) even when saturated
    let mut g32 = Graph::<f32>::new();
    let x = g32.constant(Tensor::from_f64(vec![4], &[-80.0, -20.0, 15.0, 16.0]).unwrap());
    let y = g32.sigmoid(x);
    assert!(g32.value(y).data().iter().all(|&v| v > 0.0 && v <= 1.0));
}

#[test]
fn broadcast_identity_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let feats = Tensor::<f32>::from_f64(vec![2, 3, 4, 4], &random(&mut rng, &[2, 3, 4, 4])).unwrap();
    let mut g = Graph::<f32>::new();
    let f = g.constant(feats.clone());
    let ones = g.constant(Tensor::ones(vec![2, 1, 4, 4]));
    let zeros = g.constant(Tensor::zeros(vec![2, 3, 4, 4]));
    let m = g.mul(f, ones).unwrap();
    let m2 = g.mul(ones, f).unwrap();
    let a = g.add(f, zeros).unwrap();
    assert_eq!(g.value(m), &feats);
    assert_eq!(g.value(m2), &feats);
    assert_eq!(g.value(a), &feats);
}

#[test]
fn broadcast_matches_replicated_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fs = [2, 4, 3, 5];
    let feats = random(&mut rng, &fs);
    let map = random(&mut rng, &[2, 1, 3, 5]);
    let mut replicated = Vec::new();
    for b in 0..2 {
        for _ in 0..4 {
            replicated.extend_from_slice(&map[b * 15..(b + 1) * 15]);
        }
    }
    for kind in [BinaryKind::Add, BinaryKind::Mul] {
        let mut g = Graph::<f32>::new();
        let f = g.constant(Tensor::from_f64(fs.to_vec(), &feats).unwrap());
        let m = g.constant(Tensor::from_f64(vec![2, 1, 3, 5], &map).unwrap());
        let r = g.constant(Tensor::from_f64(fs.to_vec(), &replicated).unwrap());
        let bc = g.binary(kind, f, m).unwrap();
        let full = g.binary(kind, f, r).unwrap();
        assert_eq!(g.value(bc), g.value(full));
    }
}

#[test]
fn broadcast_rejects_spatial_mismatch() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![1, 3, 4, 4]));
    let b = g.constant(Tensor::zeros(vec![1, 1, 4, 5]));
    assert!(g.mul(a, b).is_err());
    let c = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    assert!(g.add(a, c).is_err());
}

#[test]
fn concat_and_slice_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Tensor::<f32>::from_f64(vec![2, 2, 3, 3], &random(&mut rng, &[2, 2, 3, 3])).unwrap();
    let b = Tensor::<f32>::from_f64(vec![2, 3, 3, 3], &random(&mut rng, &[2, 3, 3, 3])).unwrap();
    let mut g = Graph::<f32>::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let c = g.concat_channels(av, bv).unwrap();
    assert_eq!(g.shape(c), &[2, 5, 3, 3]);
    assert_eq!(g.value(c).at4(1, 0, 2, 1), a.at4(1, 0, 2, 1));
    assert_eq!(g.value(c).at4(1, 4, 0, 2), b.at4(1, 2, 0, 2));
    let sa = g.slice_channels(c, 0, 2).unwrap();
    let sb = g.slice_channels(c, 2, 3).unwrap();
    assert_eq!(g.value(sa), &a);
    assert_eq!(g.value(sb), &b);

    let empty = g.constant(Tensor::zeros(vec![2, 0, 3, 3]));
    let same = g.concat_channels(av, empty).unwrap();
    assert_eq!(g.value(same), &a);

    let other = g.constant(Tensor::zeros(vec![2, 1, 3, 4]));
    assert!(g.concat_channels(av, other).is_err());
}

#[test]
fn norm_layer_standardized_input_unchanged() {
    // exact zero-mean unit-variance values per channel
    let vals = [-1.5, -0.5, 0.5, 1.5];
    let scale = 1.0 / (1.25f64).sqrt();
    let data: Vec<f64> = vals.iter().chain(vals.iter()).map(|v| v * scale).collect();
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_f64(vec![1, 2, 2, 2], &data).unwrap());
    let gamma = g.constant(Tensor::ones(vec![2]));
    let beta = g.constant(Tensor::zeros(vec![2]));
    let mut rs = RunningStats::new(2);
    let y = g.norm_layer(x, gamma, beta, NormMode::BatchStats, &mut rs).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(x)) <= 1e-4);
}

#[test]
fn norm_layer_constant_channel_gives_beta() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(vec![2, 1, 3, 3], 7.0));
    let gamma = g.constant(Tensor::full(vec![1], 2.0));
    let beta = g.constant(Tensor::full(vec![1], 0.25));
    let mut rs = RunningStats::new(1);
    let y = g.norm_layer(x, gamma, beta, NormMode::BatchStats, &mut rs).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    assert!(g.value(y).all_finite());
}

#[test]
fn norm_layer_matches_two_pass_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let shape = [3, 2, 4, 5];
    let data: Vec<f64> = random(&mut rng, &shape).iter().map(|v| 3.0 * v + 1.0).collect();
    let gam = [1.5, -0.5];
    let bet = [0.1, 2.0];
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(shape.to_vec(), &data).unwrap());
    let gamma = g.constant(Tensor::from_f64(vec![2], &gam).unwrap());
    let beta = g.constant(Tensor::from_f64(vec![2], &bet).unwrap());
    let mut rs = RunningStats::new(2);
    let y = g.norm_layer(x, gamma, beta, NormMode::BatchStats, &mut rs).unwrap();
    let plane = 20;
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| data[(b * 2 + c) * plane..(b * 2 + c + 1) * plane].to_vec())
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for b in 0..3 {
            for i in 0..plane {
                let idx = (b * 2 + c) * plane + i;
                let want = gam[c] * (data[idx] - mean) / (var + 1e-5).sqrt() + bet[c];
                let got = g.value(y).data()[idx];
                assert!(((got - want) / want.abs().max(1e-12)).abs() <= 1e-6);
            }
        }
        let unbiased = var * n / (n - 1.0);
        assert!((rs.mean[c] - 0.1 * mean).abs() <= 1e-12);
        assert!((rs.var[c] - (0.9 + 0.1 * unbiased)).abs() <= 1e-12);
    }

    // running mode uses the stored estimates and leaves them untouched
    let before = rs.clone();
    let y2 = g.norm_layer(x, gamma, beta, NormMode::RunningStats, &mut rs).unwrap();
    assert_eq!(rs, before);
    let want = gam[0] * (data[0] - rs.mean[0]) / (rs.var[0] + 1e-5).sqrt() + bet[0];
    assert!((g.value(y2).data()[0] - want).abs() <= 1e-12);
}

#[test]
fn bce_reference_values() {
    let mut g = Graph::<f32>::new();
    let z = g.constant(Tensor::zeros(vec![1]));
    let l = g.bce_with_logits(z, &Tensor::ones(vec![1])).unwrap();
    assert!((g.value(l).item() - std::f32::consts::LN_2).abs() < 1e-6);

    let z = g.constant(Tensor::full(vec![1], 40.0));
    let l = g.bce_with_logits(z, &Tensor::ones(vec![1])).unwrap();
    assert!(g.value(l).item() >= 0.0 && g.value(l).item() < 1e-12);

    let z = g.constant(Tensor::from_f64(vec![4], &[-100.0, 100.0, -100.0, 100.0]).unwrap());
    let l = g.bce_with_logits(z, &Tensor::from_f64(vec![4], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
    assert!(g.value(l).item().is_finite());
    assert!((g.value(l).item() - 50.0).abs() < 1e-3);
}

#[test]
fn bce_matches_probability_space_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-6.0..6.0)).collect();
    let target: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::from_f64(vec![64], &logits).unwrap());
    let l = g.bce_with_logits(z, &Tensor::from_f64(vec![64], &target).unwrap()).unwrap();
    let naive = logits
        .iter()
        .zip(&target)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 64.0;
    assert!(((g.value(l).item() - naive) / naive).abs() <= 1e-6);
}

#[test]
fn bce_rejects_out_of_range_target() {
    let mut g = Graph::<f32>::new();
    let z = g.constant(Tensor::zeros(vec![2]));
    assert!(g.bce_with_logits(z, &Tensor::from_f64(vec![2], &[0.0, 1.5]).unwrap()).is_err());
    assert!(g.bce_with_logits(z, &Tensor::zeros(vec![3])).is_err());
}
