mod common;

use common::{fill_params, random_image, rng, small_config};
use proptest::prelude::*;
use rand::Rng;
use selfmae::mae::{
    mae_loss, masked_input, masked_loss, reconstruct_image, sample_mask, triptych, MaeModel, MaeOutput, MaskPlan,
};
use selfmae::params::Graph;
use selfmae::tensor::{Tape, Tensor};
use selfmae::vit::{patch_batch, patchify, ModelConfig};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mask_plan_partitions_indices(n in 1usize..=256, ratio in 0.0f64..0.95, seed in any::<u64>()) {
        let p = sample_mask(n, ratio, seed).unwrap();
        prop_assert_eq!(p.masked.len(), (n as f64 * ratio).floor() as usize);
        prop_assert_eq!(p.masked.len() + p.visible.len(), n);
        let mut all: Vec<usize> = p.masked.iter().chain(&p.visible).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!(p.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(p.visible.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(sample_mask(n, ratio, seed).unwrap(), p);
    }

    #[test]
    fn constant_offset_gives_unit_loss(n in 2usize..40, w in 1usize..20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let target = Tensor::<f64>::from_fn(&[n, w], |_| r.random_range(-1.0..1.0));
        let pred = target.map(|v| v + 1.0);
        let plan = sample_mask(n, 0.5, seed).unwrap();
        prop_assert!((mae_loss(&pred, &target, &plan).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn mask_sampling_is_roughly_uniform() {
    let mut hits = [0usize; 64];
    for s in 0..2000 {
        for k in sample_mask(64, 0.75, s).unwrap().masked {
            hits[k] += 1;
        }
    }
    // Expected 1500 per index, sd ≈ 19.
    assert!(hits.iter().all(|&h| (1400..=1600).contains(&h)), "{hits:?}");
}

#[test]
fn loss_ignores_visible_patches() {
    let mut r = rng(1);
    let target = Tensor::<f64>::from_fn(&[64, 64], |_| r.random_range(0.0..1.0));
    let plan = sample_mask(64, 0.75, 4).unwrap();
    let mut pred = target.clone();
    for &k in &plan.visible {
        pred.data_mut()[k * 64..(k + 1) * 64].iter_mut().for_each(|v| *v = 1e3);
    }
    assert_eq!(mae_loss(&pred, &target, &plan).unwrap(), 0.0);
}

#[test]
fn loss_matches_double_loop() {
    let mut r = rng(2);
    for trial in 0..20 {
        let (n, w) = (r.random_range(2..80), r.random_range(1..30));
        let pred = Tensor::<f64>::from_fn(&[n, w], |_| r.random_range(-2.0..2.0));
        let target = Tensor::<f64>::from_fn(&[n, w], |_| r.random_range(-2.0..2.0));
        let plan = sample_mask(n, r.random_range(0.05..0.95), trial).unwrap();
        if plan.masked.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        for k in 0..n {
            if !plan.masked.contains(&k) {
                continue;
            }
            for j in 0..w {
                let d = pred.data()[k * w + j] - target.data()[k * w + j];
                acc += d * d;
            }
        }
        let oracle = acc / (plan.masked.len() * w) as f64;
        assert!((mae_loss(&pred, &target, &plan).unwrap() - oracle).abs() < 1e-12);
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone(), true);
        let l = masked_loss(&mut tape, p, &target, std::slice::from_ref(&plan)).unwrap().unwrap();
        assert!((tape.value(l).data()[0] - oracle).abs() < 1e-12);
    }
}

#[test]
fn empty_mask_loss_is_zero() {
    let t = Tensor::<f64>::full(&[4, 3], 1.0);
    let p = Tensor::<f64>::zeros(&[4, 3]);
    let plan = sample_mask(4, 0.0, 0).unwrap();
    assert_eq!(mae_loss(&p, &t, &plan).unwrap(), 0.0);
    let mut tape = Tape::new();
    let v = tape.leaf(p, true);
    assert!(masked_loss(&mut tape, v, &t, &[plan]).unwrap().is_none());
}

#[test]
fn gradient_is_zero_on_visible_rows() {
    let mut r = rng(3);
    let (n, w) = (64, 64);
    let plans = [sample_mask(n, 0.75, 1).unwrap(), sample_mask(n, 0.75, 2).unwrap()];
    let target = Tensor::<f64>::from_fn(&[2 * n, w], |_| r.random_range(0.0..1.0));
    let pred = Tensor::<f64>::from_fn(&[2 * n, w], |_| r.random_range(0.0..1.0));
    let mut tape = Tape::new();
    let p = tape.leaf(pred, true);
    let l = masked_loss(&mut tape, p, &target, &plans).unwrap().unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(p).unwrap();
    for (b, plan) in plans.iter().enumerate() {
        for k in 0..n {
            let row = &g[(b * n + k) * w..(b * n + k + 1) * w];
            if plan.is_masked(k) {
                assert!(row.iter().any(|&v| v != 0.0));
            } else {
                assert!(row.iter().all(|&v| v == 0.0), "visible row {k} of image {b} has gradient");
            }
        }
    }
}

#[test]
fn default_encoder_sees_seventeen_tokens() {
    let model = MaeModel::<f32>::new(&ModelConfig::default(), 0).unwrap();
    let img = random_image(64, 1, &mut rng(4));
    let tokens = model.embed(&img).unwrap();
    assert_eq!(tokens.len(), 65);
    let plan = sample_mask(64, 0.75, 0).unwrap();
    assert_eq!(model.encode_visible(&tokens, &plan).unwrap().shape(), &[17, 192]);
    let full = sample_mask(64, 0.0, 0).unwrap();
    assert_eq!(model.encode_visible(&tokens, &full).unwrap().shape(), &[65, 192]);

    let patches = patch_batch::<f32, f64>(&[&img, &img], 8).unwrap();
    let mut g = Graph::new(&model.store, false);
    let f = model.forward_batch(&mut g, &patches, &[plan.clone(), sample_mask(64, 0.75, 1).unwrap()]).unwrap();
    assert_eq!(f.encoder_len, (64 - 48) + 1);
    assert_eq!(g.tape.shape(f.predicted), &[128, 64]);

    let out = model.run(&img, &plan).unwrap();
    assert_eq!(out.predicted_patches.shape(), &[64, 64]);
}

#[test]
fn mismatched_plan_is_rejected() {
    let model = MaeModel::<f64>::new(&small_config(), 0).unwrap();
    let tokens = model.embed(&random_image(16, 1, &mut rng(5))).unwrap();
    assert!(model.encode_visible(&tokens, &sample_mask(64, 0.75, 0).unwrap()).is_err());
}

#[test]
fn batched_and_single_image_paths_agree() {
    let model = MaeModel::<f64>::new(&small_config(), 1).unwrap();
    let mut r = rng(6);
    let imgs = [random_image(16, 1, &mut r), random_image(16, 1, &mut r)];
    let plans = [sample_mask(16, 0.75, 7).unwrap(), sample_mask(16, 0.75, 8).unwrap()];
    let patches = patch_batch::<f64, f64>(&[&imgs[0], &imgs[1]], 4).unwrap();
    let mut g = Graph::new(&model.store, false);
    let f = model.forward_batch(&mut g, &patches, &plans).unwrap();
    let batched = g.tape.value(f.predicted).clone();
    let mut losses = 0.0;
    for (b, (img, plan)) in imgs.iter().zip(&plans).enumerate() {
        let out = model.run(img, plan).unwrap();
        for (x, y) in out.predicted_patches.data().iter().zip(&batched.data()[b * 16 * 16..(b + 1) * 16 * 16]) {
            assert!((x - y).abs() < 1e-12);
        }
        losses += out.loss;
    }
    let batch_loss = g.tape.value(f.loss.unwrap()).data()[0];
    assert!((batch_loss - losses / 2.0).abs() < 1e-12);
}

#[test]
fn visible_token_order_does_not_matter() {
    let model = MaeModel::<f64>::new(&small_config(), 2).unwrap();
    let tokens = model.embed(&random_image(16, 1, &mut rng(7))).unwrap();
    let plan = sample_mask(16, 0.5, 3).unwrap();
    let base = model.encode_visible(&tokens, &plan).unwrap();
    let mut shuffled = plan.clone();
    shuffled.visible.reverse();
    shuffled.visible.rotate_left(3);
    let out = model.encode_visible(&tokens, &shuffled).unwrap();
    let d = base.last_dim();
    let pos = |k: usize| plan.visible.iter().position(|&v| v == k).unwrap();
    for (i, &k) in shuffled.visible.iter().enumerate() {
        let (a, b) = (out.row(1 + i), base.row(1 + pos(k)));
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
    assert!(out.row(0).iter().zip(base.row(0)).all(|(x, y)| (x - y).abs() < 1e-12));
    assert_eq!(d, 16);
}

#[test]
fn zeroed_decoder_predicts_the_bias() {
    let mut model = MaeModel::<f64>::new(&small_config(), 3).unwrap();
    fill_params(&mut model.store, "decoder.", 0.0);
    let (_, b) = model.decoder.pred_ids();
    let bias: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.3).collect();
    model.store.get_mut(b).value.data_mut().copy_from_slice(&bias);
    let out = model.run(&random_image(16, 1, &mut rng(8)), &sample_mask(16, 0.75, 1).unwrap()).unwrap();
    for k in 0..16 {
        assert_eq!(out.predicted_patches.row(k), &bias[..]);
    }
}

#[test]
fn masking_a_patch_changes_its_prediction() {
    let model = MaeModel::<f64>::new(&small_config(), 4).unwrap();
    let img = random_image(16, 1, &mut rng(9));
    let plan = sample_mask(16, 0.5, 5).unwrap();
    let k = plan.visible[2];
    let mut masked = plan.masked.clone();
    masked.push(k);
    let moved = MaskPlan::with_masked(16, masked).unwrap();
    let a = model.run(&img, &plan).unwrap();
    let b = model.run(&img, &moved).unwrap();
    let diff: f64 = a.predicted_patches.row(k).iter().zip(b.predicted_patches.row(k)).map(|(x, y)| (x - y).abs()).sum();
    assert!(diff > 1e-9, "prediction at {k} unchanged");
}

fn output(pred: Tensor<f64>, plan: MaskPlan) -> MaeOutput<f64> {
    MaeOutput { predicted_patches: pred, loss: 0.0, plan }
}

#[test]
fn reconstruction_composes_sources() {
    let cfg = ModelConfig::default();
    let grid = cfg.grid();
    let img = random_image(64, 1, &mut rng(10));
    let patches = patchify(&img, 8).unwrap();

    let none = sample_mask(64, 0.0, 0).unwrap();
    let garbage = Tensor::full(&[64, 64], 7.0);
    assert_eq!(reconstruct_image(&img, &output(garbage, none), grid).unwrap(), img);

    let plan = sample_mask(64, 0.75, 1).unwrap();
    assert_eq!(reconstruct_image(&img, &output(patches, plan.clone()), grid).unwrap(), img);

    // Disjoint fills: the original at -1, predictions at +2.
    let low = Tensor::full(&[64, 64, 1], -1.0);
    let high = Tensor::full(&[64, 64], 2.0);
    let r = reconstruct_image(&low, &output(high, plan.clone()), grid).unwrap();
    let from_pred = r.data().iter().filter(|&&v| v == 2.0).count();
    let from_orig = r.data().iter().filter(|&&v| v == -1.0).count();
    assert_eq!((from_pred, from_orig), (48 * 64, 16 * 64));
    let pr = patchify(&r, 8).unwrap();
    for k in 0..64 {
        let expect = if plan.is_masked(k) { 2.0 } else { -1.0 };
        assert!(pr.row(k).iter().all(|&v| v == expect));
    }

    let m = masked_input(&img, &plan, grid, 0.5).unwrap();
    let mp = patchify(&m, 8).unwrap();
    let orig = patchify(&img, 8).unwrap();
    for k in 0..64 {
        if plan.is_masked(k) {
            assert!(mp.row(k).iter().all(|&v| v == 0.5));
        } else {
            assert_eq!(mp.row(k), orig.row(k));
        }
    }
}

#[test]
fn triptych_is_three_panels_wide() {
    let grid = ModelConfig::default().grid();
    let img = random_image(64, 1, &mut rng(11));
    let plan = sample_mask(64, 0.75, 2).unwrap();
    let t = triptych(&img, &output(patchify(&img, 8).unwrap(), plan), grid).unwrap();
    assert_eq!(t.dimensions(), (192, 64));
    // Panels 1 and 3 match because the predictions are perfect.
    for y in 0..64 {
        for x in 0..64 {
            assert_eq!(t.get_pixel(x, y), t.get_pixel(x + 128, y));
        }
    }
    let sentinel = t.pixels().filter(|p| p.0[0] == 128).count();
    assert!(sentinel >= 48 * 64);
}
