use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smag_tensor::{NormMode, Tensor};
use smagnet::encoder::{BlockKind, Encoder, EncoderConfig, Preset, ResidualBlock};
use smagnet::model::{Model, ModelConfig};
use smagnet::params::{Ctx, ParamStore, Scope};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn zero_residual_branch_gives_relu_of_input() {
    let mut store = ParamStore::<f64>::new(1);
    let block = ResidualBlock::new(&mut store, &Scope::new("b"), BlockKind::Basic, 4, 4, 1);
    assert!(block.shortcut.is_none());
    // Zeroing the last norm's gamma and beta zeroes the residual branch.
    let (_, last) = block.layers.last().unwrap();
    store.value_mut(last.gamma).data_mut().fill(0.0);
    let x = random(&[2, 4, 6, 6], 3);
    let mut ctx = Ctx::new(&store, NormMode::BatchStats, false);
    let xv = ctx.g.constant(x.clone());
    let y = block.forward(&mut ctx, xv).unwrap();
    assert_eq!(ctx.g.value(y), &x.map(|v| v.max(0.0)));
}

#[test]
fn stride_two_halves_extents() {
    for kind in [BlockKind::Basic, BlockKind::Bottleneck] {
        let mut store = ParamStore::<f64>::new(1);
        let block = ResidualBlock::new(&mut store, &Scope::new("b"), kind, 8, 16, 2);
        let mut ctx = Ctx::new(&store, NormMode::BatchStats, false);
        let x = ctx.g.constant(random(&[1, 8, 8, 10], 1));
        let y = block.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.shape(y), [1, 16, 4, 5]);
    }
}

/// Direct-loop convolution, batch statistics normalization and ReLU.
mod oracle {
    use smag_tensor::Tensor;

    pub fn conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [b, c, h, wd] = x.dims4().unwrap();
        let [co, ci, k, _] = w.dims4().unwrap();
        assert_eq!(c, ci);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * co * oh * ow];
        for bi in 0..b {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.at4(bi, i, iy as usize, ix as usize) * w.at4(o, i, ky, kx);
                                    }
                                }
                            }
                        }
                        out[((bi * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![b, co, oh, ow], out).unwrap()
    }

    pub fn batch_norm(x: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Tensor<f64> {
        let [b, c, h, w] = x.dims4().unwrap();
        let mut out = x.clone();
        for ci in 0..c {
            let vals: Vec<f64> = (0..b)
                .flat_map(|bi| (0..h * w).map(move |i| (bi, i)))
                .map(|(bi, i)| x.data()[(bi * c + ci) * h * w + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            for bi in 0..b {
                for i in 0..h * w {
                    let j = (bi * c + ci) * h * w + i;
                    out.data_mut()[j] = gamma[ci] * (x.data()[j] - mean) / (var + 1e-5).sqrt() + beta[ci];
                }
            }
        }
        out
    }

    pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
        x.map(|v| v.max(0.0))
    }

    pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut o = a.clone();
        o.add_assign(b);
        o
    }
}

#[test]
fn residual_blocks_match_straight_line_oracle() {
    for (kind, cin, cout, stride) in [
        (BlockKind::Basic, 3, 5, 2),
        (BlockKind::Basic, 4, 4, 1),
        (BlockKind::Bottleneck, 4, 8, 2),
        (BlockKind::Bottleneck, 8, 8, 1),
    ] {
        let mut store = ParamStore::<f64>::new(9);
        let block = ResidualBlock::new(&mut store, &Scope::new("b"), kind, cin, cout, stride);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = random(&shape, 100 + i as u64);
        }
        let x = random(&[2, cin, 8, 8], 5);
        let mut ctx = Ctx::new(&store, NormMode::BatchStats, false);
        let xv = ctx.g.constant(x.clone());
        let y = block.forward(&mut ctx, xv).unwrap();

        let mut h = x.clone();
        for (i, (conv, norm)) in block.layers.iter().enumerate() {
            h = oracle::conv(&h, store.value(conv.weight), conv.stride, conv.pad);
            h = oracle::batch_norm(&h, store.value(norm.gamma).data(), store.value(norm.beta).data());
            if i + 1 < block.layers.len() {
                h = oracle::relu(&h);
            }
        }
        let s = match &block.shortcut {
            Some((conv, norm)) => {
                let p = oracle::conv(&x, store.value(conv.weight), conv.stride, 0);
                oracle::batch_norm(&p, store.value(norm.gamma).data(), store.value(norm.beta).data())
            }
            None => x.clone(),
        };
        let expected = oracle::relu(&oracle::add(&h, &s));
        let diff = ctx.g.value(y).max_abs_diff(&expected);
        assert!(diff <= 1e-6, "{kind:?}: {diff}");
    }
}

fn pyramid_shapes(preset: Preset, in_c: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut store = ParamStore::<f32>::new(0);
    let enc = Encoder::new(&mut store, &Scope::new("enc"), EncoderConfig::new(preset, in_c)).unwrap();
    let mut ctx = Ctx::new(&store, NormMode::BatchStats, false);
    let x = ctx.g.constant(Tensor::full(vec![1, in_c, h, w], 0.5f32));
    let p = enc.encode(&mut ctx, x).unwrap();
    p.levels.iter().map(|&l| ctx.g.shape(l).to_vec()).collect()
}

#[test]
fn tiny_pyramid_shapes() {
    let shapes = pyramid_shapes(Preset::Tiny, 2, 64, 64);
    let expected: Vec<Vec<usize>> = [16, 32, 64, 128, 256]
        .iter()
        .zip([32, 16, 8, 4, 2])
        .map(|(&c, s)| vec![1, c, s, s])
        .collect();
    assert_eq!(shapes, expected);
}

#[test]
fn paper_pyramid_shapes() {
    let shapes = pyramid_shapes(Preset::Paper, 4, 256, 256);
    let expected: Vec<Vec<usize>> = [64, 256, 512, 1024, 2048]
        .iter()
        .zip([128, 64, 32, 16, 8])
        .map(|(&c, s)| vec![1, c, s, s])
        .collect();
    assert_eq!(shapes, expected);
}

#[test]
fn indivisible_input_names_the_multiple() {
    let mut store = ParamStore::<f32>::new(0);
    let enc = Encoder::new(&mut store, &Scope::new("enc"), EncoderConfig::new(Preset::Tiny, 2)).unwrap();
    let mut ctx = Ctx::new(&store, NormMode::BatchStats, false);
    let x = ctx.g.constant(Tensor::zeros(vec![1, 2, 48, 64]));
    let err = enc.encode(&mut ctx, x).unwrap_err().to_string();
    assert!(err.contains("multiples of 32"), "{err}");
}

#[test]
fn equal_weights_give_equal_pyramids_across_streams() {
    let mut store = ParamStore::<f32>::new(4);
    let a = Encoder::new(&mut store, &Scope::new("enc_sar"), EncoderConfig::new(Preset::Tiny, 3)).unwrap();
    let b = Encoder::new(&mut store, &Scope::new("enc_msi"), EncoderConfig::new(Preset::Tiny, 3)).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let half = ids.len() / 2;
    for i in 0..half {
        let v = store.value(ids[i]).clone();
        *store.value_mut(ids[half + i]) = v;
    }
    let x = random(&[2, 3, 32, 32], 8).cast::<f32>();
    let mut ctx = Ctx::new(&store, NormMode::BatchStats, false);
    let xv = ctx.g.constant(x);
    let pa = a.encode(&mut ctx, xv).unwrap();
    let pb = b.encode(&mut ctx, xv).unwrap();
    for (la, lb) in pa.levels.iter().zip(&pb.levels) {
        assert_eq!(ctx.g.value(*la), ctx.g.value(*lb));
    }
}

#[test]
fn streams_never_share_parameters() {
    let model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    let store = &model.store;
    let sar: BTreeSet<_> = store.names().iter().filter(|n| n.starts_with("enc_sar.")).collect();
    let msi: BTreeSet<_> = store.names().iter().filter(|n| n.starts_with("enc_msi.")).collect();
    assert!(!sar.is_empty() && !msi.is_empty());
    assert!(sar.is_disjoint(&msi));
    assert_eq!(sar.len(), msi.len());
    assert!(sar.iter().all(|n| n.starts_with("enc_sar.stage")));
}

#[test]
fn every_encoder_parameter_gets_gradient() {
    let mut store = ParamStore::<f64>::new(2);
    let enc = Encoder::new(&mut store, &Scope::new("enc"), EncoderConfig::new(Preset::Tiny, 2)).unwrap();
    let head = smagnet::layers::Conv::new(&mut store, &Scope::new("head"), 256, 1, 1, 1, 0, true);
    let mut ctx = Ctx::new(&store, NormMode::BatchStats, true);
    let x = ctx.g.constant(random(&[2, 2, 32, 32], 4));
    let p = enc.encode(&mut ctx, x).unwrap();
    let logits = head.forward(&mut ctx, p.levels[4]).unwrap();
    let target = Tensor::from_f64(vec![2, 1, 1, 1], &[1.0, 0.0]).unwrap();
    let loss = ctx.g.bce_with_logits(logits, &target).unwrap();
    ctx.g.backward(loss).unwrap();
    let grads = ctx.param_grads();
    for (id, g) in store.ids().zip(&grads) {
        if store.name(id).starts_with("enc.") {
            assert!(g.data().iter().any(|&v| v != 0.0), "{} has no gradient", store.name(id));
        }
    }
}

#[test]
fn rejects_malformed_stage_layout() {
    let mut store = ParamStore::<f32>::new(0);
    let cfg = EncoderConfig {
        blocks: [2, 1, 1, 1, 1],
        ..EncoderConfig::new(Preset::Tiny, 2)
    };
    assert!(Encoder::new(&mut store, &Scope::new("e"), cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_shapes_follow_input_extents(hm in 1usize..4, wm in 1usize..4, c in 1usize..5) {
        let (h, w) = (32 * hm, 32 * wm);
        let shapes = pyramid_shapes(Preset::Tiny, c, h, w);
        let widths = Preset::Tiny.encoder_widths();
        for (k, s) in shapes.iter().enumerate() {
            let f = 2usize.pow(k as u32 + 1);
            prop_assert_eq!(s, &vec![1, widths[k], h / f, w / f]);
        }
    }
}
