mod common;

use common::{fill_params, random_image, rng, small_config};
use proptest::prelude::*;
use rand::Rng;
use selfmae::params::{Graph, ParamStore};
use selfmae::tensor::Tensor;
use selfmae::vit::{
    count_params, decoder_params, head_params, imagenet_param_count, patchify, unpatchify, ModelConfig, PatchGrid,
    Taps, TokenSequence, VitEncoder, VitRegressor, VitSize,
};
use selfmae::{mae::MaeModel, Error};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patch_round_trip(gh in 1usize..6, gw in 1usize..6, p in 1usize..9, c in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let img = Tensor::<f32>::from_fn(&[gh * p, gw * p, c], |_| r.random::<f32>());
        let patches = patchify(&img, p).unwrap();
        prop_assert_eq!(patches.shape(), &[gh * gw, p * p * c]);
        let grid = PatchGrid::new(gh * p, gw * p, p).unwrap();
        prop_assert_eq!(unpatchify(&patches, grid).unwrap(), img);
    }
}

#[test]
fn patch_examples() {
    let img = random_image(64, 1, &mut rng(1));
    let p = patchify(&img, 8).unwrap();
    assert_eq!(p.shape(), &[64, 64]);
    // Row 9 is grid cell (1, 1); its first entry is pixel (8, 8).
    assert_eq!(p.row(9)[0], img.data()[8 * 64 + 8]);
    assert_eq!(p.row(9)[8], img.data()[9 * 64 + 8]);
    let whole = patchify(&img, 64).unwrap();
    assert_eq!(whole.shape(), &[1, 4096]);
    assert_eq!(whole.data(), img.data());
    assert!(matches!(patchify(&img, 7), Err(Error::Config(_))));

    let grid = PatchGrid::new(64, 64, 8).unwrap();
    let zero = unpatchify(&Tensor::<f64>::zeros(&[64, 64]), grid).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    assert!(unpatchify(&Tensor::<f64>::zeros(&[63, 64]), grid).is_err());

    for k in [0, 13, 63] {
        let mut ps = Tensor::<f64>::zeros(&[64, 64]);
        ps.data_mut()[k * 64..(k + 1) * 64].iter_mut().for_each(|v| *v = 1.0);
        let im = unpatchify(&ps, grid).unwrap();
        let (gy, gx) = (k / 8, k % 8);
        for y in 0..64 {
            for x in 0..64 {
                let inside = y / 8 == gy && x / 8 == gx;
                assert_eq!(im.data()[y * 64 + x] != 0.0, inside);
            }
        }
    }
}

#[test]
fn round_trip_thousand_images() {
    let mut r = rng(2);
    let grid = PatchGrid::new(64, 64, 8).unwrap();
    for _ in 0..1000 {
        let img = Tensor::<f32>::from_fn(&[64, 64, 1], |_| r.random::<f32>());
        assert_eq!(unpatchify(&patchify(&img, 8).unwrap(), grid).unwrap(), img);
    }
}

fn encoder(cfg: &ModelConfig, seed: u64) -> (ParamStore<f64>, VitEncoder) {
    let mut store = ParamStore::new();
    let enc = VitEncoder::new(&mut store, cfg, &mut rng(seed)).unwrap();
    (store, enc)
}

#[test]
fn embedding_layout() {
    let cfg = small_config();
    let (mut store, enc) = encoder(&cfg, 3);
    let img = random_image(16, 1, &mut rng(4));
    let seq = enc.embed(&store, &img).unwrap();
    assert_eq!(seq.len(), 17);
    let cls = store.value(store.find("encoder.cls_token").unwrap()).clone();
    assert_eq!(seq.tokens.row(0), cls.data());

    fill_params(&mut store, "encoder.pos_embed", 0.0);
    let (_, b) = enc.patch_embed_ids();
    let bias: Vec<f64> = (0..16).map(|i| i as f64).collect();
    store.get_mut(b).value.data_mut().copy_from_slice(&bias);
    let seq = enc.embed(&store, &Tensor::zeros(&[16, 16, 1])).unwrap();
    for k in 1..17 {
        assert_eq!(seq.tokens.row(k), &bias[..]);
    }
}

#[test]
fn swapping_patches_swaps_content_terms_only() {
    let cfg = small_config();
    let (store, enc) = encoder(&cfg, 5);
    let img = random_image(16, 1, &mut rng(6));
    let mut patches = patchify(&img, 4).unwrap();
    let a = enc.embed_patches(&store, &patches).unwrap();
    let (i, j) = (2, 11);
    let w = patches.last_dim();
    let (pi, pj) = (patches.row(i).to_vec(), patches.row(j).to_vec());
    patches.data_mut()[i * w..(i + 1) * w].copy_from_slice(&pj);
    patches.data_mut()[j * w..(j + 1) * w].copy_from_slice(&pi);
    let b = enc.embed_patches(&store, &patches).unwrap();
    let pos = store.value(enc.pos_embed_id()).clone();
    let content = |s: &TokenSequence<f64>, k: usize| -> Vec<f64> {
        s.tokens.row(k + 1).iter().zip(pos.row(k + 1)).map(|(t, p)| t - p).collect()
    };
    let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-12);
    assert!(close(&content(&a, i), &content(&b, j)));
    assert!(close(&content(&a, j), &content(&b, i)));
    assert!(close(&content(&a, 0), &content(&b, 0)));
}

#[test]
fn output_shape_for_each_size() {
    for size in VitSize::ALL {
        let cfg = ModelConfig::sized(size);
        let mut store = ParamStore::<f32>::new();
        let enc = VitEncoder::new(&mut store, &cfg, &mut rng(7)).unwrap();
        let img = random_image(64, 1, &mut rng(8)).cast::<f32>();
        let seq = enc.embed(&store, &img).unwrap();
        let out = enc.encode(&store, &seq).unwrap();
        assert_eq!(out.tokens.shape(), &[65, cfg.width], "{size:?}");
        assert!(out.tokens.is_finite());
        assert_eq!(enc.stack.layers(), 12);
    }
}

fn layer_norm(row: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    row.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect()
}

#[test]
fn zeroed_branches_leave_the_residual_path() {
    let cfg = small_config();
    let (mut store, enc) = encoder(&cfg, 9);
    for part in ["attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"] {
        for i in 0..cfg.layers {
            fill_params(&mut store, &format!("encoder.blocks.{i}.{part}."), 0.0);
        }
    }
    let seq = enc.embed(&store, &random_image(16, 1, &mut rng(10))).unwrap();
    let out = enc.encode(&store, &seq).unwrap();
    for k in 0..seq.len() {
        let expect = layer_norm(seq.tokens.row(k), cfg.norm_eps);
        assert!(out.tokens.row(k).iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn attention_rows_are_stochastic() {
    let cfg = small_config();
    let model = VitRegressor::<f64>::new(&cfg, 11).unwrap();
    let imgs = [random_image(16, 1, &mut rng(12)), random_image(16, 1, &mut rng(13))];
    let patches = selfmae::vit::patch_batch::<f64, f64>(&[&imgs[0], &imgs[1]], 4).unwrap();
    let mut g = Graph::new(&model.store, false);
    let p = g.tape.constant(patches);
    let mut taps = Taps { record_attention: true, ..Taps::default() };
    let out = model.forward(&mut g, p, 2, &mut taps).unwrap();
    assert_eq!(g.tape.shape(out), &[2, 1]);
    assert_eq!(taps.attention.len(), cfg.layers);
    for &a in &taps.attention {
        let t = g.tape.value(a);
        assert_eq!(t.shape(), &[2 * cfg.heads, 17, 17]);
        for row in t.data().chunks(17) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    let cfg = small_config();
    let (mut store, enc) = encoder(&cfg, 14);
    fill_params(&mut store, "encoder.pos_embed", 0.0);
    let seq = enc.embed(&store, &random_image(16, 1, &mut rng(15))).unwrap();
    let out = enc.encode(&store, &seq).unwrap();
    let mut order: Vec<usize> = (1..17).collect();
    order.reverse();
    order.swap(0, 5);
    let d = cfg.width;
    let mut data = seq.tokens.row(0).to_vec();
    for &k in &order {
        data.extend_from_slice(seq.tokens.row(k));
    }
    let permuted = TokenSequence { tokens: Tensor::new(&[17, d], data).unwrap(), has_class_token: true };
    let pout = enc.encode(&store, &permuted).unwrap();
    let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(u, v)| (u - v).abs() < 1e-12);
    assert!(close(pout.tokens.row(0), out.tokens.row(0)));
    for (i, &k) in order.iter().enumerate() {
        assert!(close(pout.tokens.row(i + 1), out.tokens.row(k)));
    }
}

#[test]
fn closed_form_counts_match_allocation() {
    let mut configs: Vec<ModelConfig> = VitSize::ALL.iter().map(|&s| ModelConfig::sized(s)).collect();
    configs.push(small_config());
    for cfg in configs {
        let m = MaeModel::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(m.store.element_count_with_prefix("encoder."), count_params(&cfg));
        assert_eq!(m.store.element_count_with_prefix("decoder."), decoder_params(&cfg));
        let r = VitRegressor::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(r.store.element_count_with_prefix("head."), head_params(&cfg));
        assert_eq!(r.store.element_count(), count_params(&cfg) + head_params(&cfg));
    }
}

#[test]
fn imagenet_backbone_allocation_matches_closed_form() {
    for size in VitSize::ALL {
        let cfg = ModelConfig::imagenet(size);
        let mut store = ParamStore::<f32>::new();
        VitEncoder::new(&mut store, &cfg, &mut rng(0)).unwrap();
        assert_eq!(store.element_count(), count_params(&cfg));
    }
    let reported = [(VitSize::Ti, 5.7e6), (VitSize::S, 22.1e6), (VitSize::B, 86.7e6)];
    for (s, r) in reported {
        assert!((imagenet_param_count(s) as f64 - r).abs() / r < 0.02);
    }
}

#[test]
fn regressor_rejects_wrong_image_shape() {
    let model = VitRegressor::<f64>::new(&small_config(), 0).unwrap();
    assert!(matches!(model.predict(&Tensor::<f64>::zeros(&[16, 12, 1])), Err(Error::Contract(_))));
    assert!(model.predict(&Tensor::<f64>::zeros(&[16, 16, 1])).unwrap().is_finite());
}

#[test]
fn pretrained_encoder_transfers() {
    let cfg = small_config();
    let mae = MaeModel::<f64>::new(&cfg, 1).unwrap();
    let reg = VitRegressor::from_pretrained(&cfg, &mae.store, 2).unwrap();
    for (_, p) in reg.store.iter().filter(|(_, p)| p.name.starts_with("encoder.")) {
        let src = mae.store.value(mae.store.find(&p.name).unwrap());
        assert_eq!(&p.value, src);
    }
}

#[test]
fn initialization_scales() {
    let m = MaeModel::<f64>::new(&ModelConfig::default(), 4).unwrap();
    for (name, fan_in, fan_out) in [
        ("encoder.patch_embed.weight", 64, 192),
        ("encoder.blocks.0.attn.qkv.weight", 192, 576),
        ("encoder.blocks.11.mlp.fc2.weight", 768, 192),
    ] {
        let w = m.store.value(m.store.find(name).unwrap());
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound), "{name}");
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var / (bound * bound / 3.0) - 1.0).abs() < 0.05, "{name}: {var}");
        let b = m.store.value(m.store.find(&name.replace("weight", "bias")).unwrap());
        assert!(b.data().iter().all(|&v| v == 0.0));
    }
    let cls = m.store.value(m.store.find("encoder.cls_token").unwrap());
    assert!(cls.data().iter().all(|v| v.abs() <= 0.04));
}
