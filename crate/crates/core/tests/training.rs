use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smag_tensor::{Graph, NormMode, Tensor};
use smagnet::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
use smagnet::data::{Dataset, GenParams, Scene};
use smagnet::model::{Model, ModelConfig, ModelKind, Prediction};
use smagnet::optim::{Adam, BETA1, BETA2, EPS};
use smagnet::params::Ctx;
use smagnet::train::{
    apply_augment, augment, draw_augment, make_inputs, select_threshold, total_loss, train, train_step, AugmentDraw,
    TrainConfig,
};
use smagnet::Error;

fn small_dataset(seed: u64, count: usize) -> Dataset {
    let params = GenParams { size: 32, seed, ..GenParams::default() };
    Dataset::generate(&params, count).unwrap()
}

fn bce(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn label_tensor(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::new(vec![1, 1, 1, n], (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect()).unwrap()
}

fn head_pair(g: &mut Graph<f64>, a: Tensor<f64>, b: Tensor<f64>) -> Prediction {
    let (pa, pb) = (g.leaf(a), g.leaf(b));
    Prediction {
        primary: pa,
        sar: Some(pb),
        features_primary: pa,
        features_sar: Some(pb),
        smg: Vec::new(),
    }
}

#[test]
fn equal_heads_give_the_single_head_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits = random_tensor(&mut rng, &[1, 1, 1, 40], 4.0);
    let label = label_tensor(&mut rng, 40);
    for w in [0.0, 0.25, 0.5, 1.0] {
        let mut g = Graph::new();
        let pred = head_pair(&mut g, logits.clone(), logits.clone());
        let terms = total_loss(&mut g, &pred, &label, w).unwrap();
        let (total, fused) = (g.value(terms.total).item(), g.value(terms.fused).item());
        assert!((total - fused).abs() <= 1e-12, "w={w}");
    }
}

#[test]
fn loss_matches_two_term_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let n = 64;
        let a = random_tensor(&mut rng, &[1, 1, 1, n], 6.0);
        let b = random_tensor(&mut rng, &[1, 1, 1, n], 6.0);
        let label = label_tensor(&mut rng, n);
        let w = rng.random_range(0.0..=1.0);
        let mut g = Graph::new();
        let pred = head_pair(&mut g, a.clone(), b.clone());
        let terms = total_loss(&mut g, &pred, &label, w).unwrap();
        let mean = |t: &Tensor<f64>| {
            t.data().iter().zip(label.data()).map(|(&l, &y)| bce(l, y)).sum::<f64>() / n as f64
        };
        let expected = w * mean(&b) + (1.0 - w) * mean(&a);
        assert!((g.value(terms.total).item() - expected).abs() <= 1e-7);
    }
}

#[test]
fn loss_weight_outside_unit_interval_is_rejected() {
    let mut g = Graph::new();
    let t = Tensor::<f64>::zeros(vec![1, 1, 1, 2]);
    let pred = head_pair(&mut g, t.clone(), t.clone());
    for w in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(total_loss(&mut g, &pred, &t, w), Err(Error::Config(_))));
    }
}

#[test]
fn sar_only_weight_leaves_gates_without_gradient() {
    let ds = small_dataset(3, 10);
    let model = Model::<f64>::new(ModelConfig::default(), 0).unwrap();
    let scenes: Vec<&Scene> = ds.scenes.iter().take(2).collect();
    let (inputs, label) = make_inputs::<f64>(&scenes, &ds.stats).unwrap();
    let mut ctx = Ctx::new(&model.store, NormMode::BatchStats, true);
    let pred = model.forward(&mut ctx, &inputs).unwrap();
    let terms = total_loss(&mut ctx.g, &pred, &label, 1.0).unwrap();
    ctx.g.backward(terms.total).unwrap();
    let grads = ctx.param_grads();
    let gates: Vec<_> = model.store.ids().filter(|&id| model.store.name(id).starts_with("fusion.")).collect();
    assert!(!gates.is_empty());
    for id in gates {
        assert!(grads[id.0].data().iter().all(|&v| v == 0.0), "{}", model.store.name(id));
    }
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = vec![random_tensor(&mut rng, &[3, 4], 1.0), random_tensor(&mut rng, &[5], 1.0)];
    let before = params.clone();
    let mut adam = Adam::new(&params, 5e-4, 0.0);
    let zeros: Vec<_> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    for _ in 0..3 {
        adam.update(&mut params, &zeros);
    }
    assert_eq!(params, before);
}

#[test]
fn adam_single_step_matches_hand_computation() {
    let lr = 5e-4;
    let mut params = vec![Tensor::scalar(0.3f64)];
    let mut adam = Adam::new(&params, lr, 0.0);
    adam.update(&mut params, &[Tensor::scalar(1.0)]);
    // m̂ = 1 and v̂ = 1 after bias correction.
    let expected = 0.3 - lr * 1.0 / (1.0 + EPS);
    assert!((params[0].item() - expected).abs() <= 1e-9);
}

#[test]
fn adam_two_steps_match_sequence_oracle() {
    let (lr, g) = (1e-2, -0.7);
    let mut params = vec![Tensor::scalar(1.25f64)];
    let mut adam = Adam::new(&params, lr, 0.0);
    let (mut p, mut m, mut v) = (1.25f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        adam.update(&mut params, &[Tensor::scalar(g)]);
        m = BETA1 * m + (1.0 - BETA1) * g;
        v = BETA2 * v + (1.0 - BETA2) * g * g;
        let mh = m / (1.0 - BETA1.powi(t));
        let vh = v / (1.0 - BETA2.powi(t));
        p -= lr * mh / (vh.sqrt() + EPS);
        assert!((params[0].item() - p).abs() <= 1e-9, "step {t}");
    }
    assert_eq!(adam.step, 2);
}

fn flip_only(hflip: bool, vflip: bool) -> AugmentDraw {
    AugmentDraw { y0: 0, x0: 0, size: None, hflip, vflip }
}

#[test]
fn flips_are_involutions_and_preserve_water() {
    let ds = small_dataset(5, 4);
    for scene in &ds.scenes {
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let d = flip_only(h, v);
            let once = apply_augment(scene, &d);
            assert_eq!(&apply_augment(&once, &d), scene);
            let water = |s: &Scene| s.label.iter().filter(|&&l| l == 1).count();
            assert_eq!(water(&once), water(scene));
        }
    }
}

#[test]
fn flips_move_all_rasters_together() {
    let ds = small_dataset(6, 2);
    let s = &ds.scenes[0];
    let (h, w) = (s.height(), s.width());
    let out = apply_augment(s, &flip_only(true, true));
    for y in 0..h {
        for x in 0..w {
            let (src, dst) = (y * w + x, (h - 1 - y) * w + (w - 1 - x));
            assert_eq!(out.label[dst], s.label[src]);
            assert_eq!(out.validity[dst], s.validity[src]);
            for c in 0..2 {
                assert_eq!(out.sar.data()[c * h * w + dst], s.sar.data()[c * h * w + src]);
            }
            for c in 0..4 {
                assert_eq!(out.msi.data()[c * h * w + dst], s.msi.data()[c * h * w + src]);
            }
        }
    }
}

#[test]
fn crop_windows_stay_inside_the_raster() {
    let params = GenParams { size: 96, seed: 7, ..GenParams::default() };
    let ds = Dataset::generate(&params, 1).unwrap();
    let scene = &ds.scenes[0];
    let cfg = TrainConfig { crop: Some(64), ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut corners = std::collections::BTreeSet::new();
    for _ in 0..1000 {
        let d = draw_augment(&mut rng, 96, 96, &cfg).unwrap();
        assert!(d.y0 + 64 <= 96 && d.x0 + 64 <= 96);
        corners.insert((d.y0, d.x0));
    }
    assert!(corners.len() > 100);
    let d = AugmentDraw { y0: 5, x0: 17, size: Some(64), hflip: false, vflip: false };
    let out = apply_augment(scene, &d);
    assert_eq!((out.height(), out.width()), (64, 64));
    for y in 0..64 {
        for x in 0..64 {
            assert_eq!(out.label[y * 64 + x], scene.label[(y + 5) * 96 + x + 17]);
            assert_eq!(out.sar.data()[y * 64 + x], scene.sar.data()[(y + 5) * 96 + x + 17]);
        }
    }
}

#[test]
fn invalid_crops_are_rejected() {
    let ds = small_dataset(9, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for crop in [0, 48, 64] {
        let cfg = TrainConfig { crop: Some(crop), ..TrainConfig::default() };
        assert!(matches!(augment(&ds.scenes[0], &mut rng, &cfg), Err(Error::Config(_))), "crop {crop}");
    }
}

#[test]
fn separated_probabilities_pick_the_smallest_optimal_candidate() {
    let c = select_threshold(&[0.1, 0.9, 0.1, 0.9], &[0, 1, 0, 1]);
    assert_eq!(c.threshold, 0.9f32 as f64);
    assert_eq!(c.iou, Some(1.0));
    assert!(!c.degenerate);
}

#[test]
fn constant_probabilities_return_that_value() {
    let c = select_threshold(&[0.37; 6], &[0, 1, 1, 0, 0, 1]);
    assert_eq!(c.threshold, 0.37f32 as f64);
    assert_eq!(c.iou, Some(0.5));
}

#[test]
fn single_class_labels_fall_back_to_half() {
    for labels in [[0u8; 4], [1u8; 4]] {
        let c = select_threshold(&[0.2, 0.4, 0.6, 0.8], &labels);
        assert!(c.degenerate);
        assert_eq!(c.threshold, 0.5);
        assert_eq!(c.iou, None);
    }
}

/// Scans every unique probability, comparing IoU as exact fractions.
fn threshold_oracle(probs: &[f32], labels: &[u8]) -> (f32, num_rational::Ratio<u64>) {
    let mut unique: Vec<f32> = probs.to_vec();
    unique.sort_by(f32::total_cmp);
    unique.dedup();
    let mut best: Option<(f32, num_rational::Ratio<u64>)> = None;
    for &t in &unique {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &l) in probs.iter().zip(labels) {
            match (p >= t, l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let iou = num_rational::Ratio::new(tp, tp + fp + fn_);
        if best.is_none_or(|(_, b)| iou > b) {
            best = Some((t, iou));
        }
    }
    best.unwrap()
}

#[test]
fn threshold_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..50 {
        // Coarse quantization forces plenty of ties.
        let levels = [4, 16, 256][case % 3];
        let probs: Vec<f32> = (0..256).map(|_| rng.random_range(0..levels) as f32 / levels as f32).collect();
        let labels: Vec<u8> = probs
            .iter()
            .map(|&p| rng.random_bool((0.15 + 0.7 * p as f64).min(1.0)) as u8)
            .collect();
        let (t, iou) = threshold_oracle(&probs, &labels);
        let c = select_threshold(&probs, &labels);
        assert_eq!(c.threshold, t as f64, "case {case}");
        assert_eq!(c.iou.unwrap(), *iou.numer() as f64 / *iou.denom() as f64, "case {case}");
    }
}

#[test]
fn every_parameter_gets_gradient_at_init() {
    let ds = small_dataset(11, 10);
    let scenes: Vec<&Scene> = ds.scenes.iter().take(4).collect();
    assert!(scenes.iter().any(|s| s.valid_fraction() < 1.0), "fixture needs missing MSI");
    for kind in [ModelKind::Smagnet, ModelKind::UnetSar, ModelKind::UnetConcat] {
        for shared in [true, false] {
            if kind != ModelKind::Smagnet && !shared {
                continue;
            }
            let cfg = ModelConfig { kind, shared_decoder: shared, ..ModelConfig::default() };
            let model = Model::<f32>::new(cfg, 1).unwrap();
            let (inputs, label) = make_inputs::<f32>(&scenes, &ds.stats).unwrap();
            let mut ctx = Ctx::new(&model.store, NormMode::BatchStats, true);
            let pred = model.forward(&mut ctx, &inputs).unwrap();
            let terms = total_loss(&mut ctx.g, &pred, &label, 0.5).unwrap();
            ctx.g.backward(terms.total).unwrap();
            let grads = ctx.param_grads();
            for id in model.store.ids() {
                assert!(
                    grads[id.0].data().iter().any(|&v| v != 0.0),
                    "{kind:?} shared={shared}: {} has no gradient",
                    model.store.name(id)
                );
            }
        }
    }
}

fn quick_config(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 4, lr: 2e-3, seed, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let ds = small_dataset(12, 10);
    let cfg = TrainConfig { lr: 0.0, ..quick_config(1, 2) };
    let out = train(&ModelConfig::default(), &cfg, &ds, &mut |_| {}).unwrap();
    let init = Model::<f32>::new(ModelConfig::default(), cfg.init_seed()).unwrap();
    assert_eq!(out.model.store.values(), init.store.values());
}

#[test]
fn training_is_bit_reproducible() {
    let ds = small_dataset(13, 10);
    let cfg = TrainConfig { crop: Some(32), ..quick_config(3, 2) };
    let run = || train(&ModelConfig::default(), &cfg, &ds, &mut |_| {}).unwrap();
    let (a, b) = (run(), run());
    let bits = |h: &[smagnet::train::EpochRecord]| {
        h.iter()
            .flat_map(|r| [r.train_loss, r.val_loss_total, r.val_loss_sar, r.val_loss_fused].map(f64::to_bits))
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.history), bits(&b.history));
    assert_eq!(a.model.store.values(), b.model.store.values());
    assert_eq!(a.threshold, b.threshold);
}

#[test]
fn best_epoch_has_the_lowest_validation_loss() {
    let ds = small_dataset(14, 10);
    let mut seen = Vec::new();
    let out = train(&ModelConfig::default(), &quick_config(4, 5), &ds, &mut |r| seen.push(*r)).unwrap();
    assert_eq!(seen, out.history);
    let min = out.history.iter().map(|r| r.val_loss_total).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_loss, min);
    assert_eq!(out.history[out.best_epoch - 1].val_loss_total, min);
    assert!(out.history.iter().take(out.best_epoch - 1).all(|r| r.val_loss_total > min));
    assert_eq!(out.optimizer.step as usize, out.best_epoch * 2);
}

#[test]
fn training_loss_decreases() {
    let ds = small_dataset(15, 20);
    let out = train(&ModelConfig::default(), &quick_config(5, 10), &ds, &mut |_| {}).unwrap();
    assert!(out.history[9].train_loss < out.history[0].train_loss, "{:?}", out.history);
}

#[test]
fn non_finite_loss_is_reported() {
    let ds = small_dataset(16, 10);
    let mut model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    let head = model.store.id("dec.head.weight").unwrap();
    model.store.value_mut(head).data_mut()[0] = f32::NAN;
    let mut adam = Adam::new(model.store.values(), 1e-3, 0.0);
    let scenes: Vec<&Scene> = ds.scenes.iter().take(2).collect();
    let err = train_step(&mut model, &mut adam, &scenes, &ds.stats, 0.5).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ds = small_dataset(17, 10);
    let cfg = ModelConfig { shared_decoder: false, ..ModelConfig::default() };
    let out = train(&cfg, &quick_config(6, 1), &ds, &mut |_| {}).unwrap();
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        model: cfg.clone(),
        epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        threshold: Some(out.threshold),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &out.model, Some(&out.optimizer), &meta).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.meta, meta);
    assert_eq!(loaded.optimizer.as_ref(), Some(&out.optimizer));
    assert_eq!(loaded.model.store.values(), out.model.store.values());

    let scenes: Vec<&Scene> = ds.scenes.iter().take(3).collect();
    let (inputs, _) = make_inputs::<f32>(&scenes, &ds.stats).unwrap();
    let logits = |m: &Model<f32>| {
        let mut ctx = Ctx::new(&m.store, NormMode::RunningStats, false);
        let p = m.forward(&mut ctx, &inputs).unwrap();
        let bits = |v| ctx.g.value(v).data().iter().map(|x: &f32| x.to_bits()).collect::<Vec<_>>();
        (bits(p.primary), bits(p.sar.unwrap()))
    };
    assert_eq!(logits(&loaded.model), logits(&out.model));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(&dir.path().join("absent.ckpt")), Err(Error::Data(_))));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr: -1.0, ..TrainConfig::default() },
        TrainConfig { loss_weight: 1.01, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { crop: Some(40), ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
    let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.1}"#).unwrap_err();
    assert!(err.to_string().contains("learning_rate"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_is_a_maximizer(
        pairs in prop::collection::vec((0u8..20, any::<bool>()), 2..80),
    ) {
        let probs: Vec<f32> = pairs.iter().map(|p| p.0 as f32 / 20.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|p| p.1 as u8).collect();
        let c = select_threshold(&probs, &labels);
        if c.degenerate {
            prop_assert!(labels.iter().all(|&l| l == labels[0]));
        } else {
            prop_assert!(probs.iter().any(|&p| p as f64 == c.threshold));
            let (t, iou) = threshold_oracle(&probs, &labels);
            prop_assert_eq!(c.threshold, t as f64);
            prop_assert_eq!(c.iou.unwrap(), *iou.numer() as f64 / *iou.denom() as f64);
        }
    }
}
