mod common;

use std::ops::ControlFlow;

use common::{no_observer, quick_finetune, quick_pretrain, small64_config};
use selfmae::checkpoint::Checkpoint;
use selfmae::data::{split_dataset, synth_generate, LabeledSample};
use selfmae::params::{ParamKind, ParamStore};
use selfmae::tensor::Tensor;
use selfmae::training::{
    adamw_update, classify_defect, evaluate, finetune, lr_schedule, predict_many, pretrain, AdamW, DefectClass,
    EvalReport, FinetuneState, Init, PretrainState, SamplePrediction,
};
use selfmae::vit::{ModelConfig, VitRegressor};
use selfmae::Error;

fn corpus(n_leds: usize, seed: u64) -> Vec<LabeledSample> {
    synth_generate(n_leds, seed).unwrap().samples
}

/// Independent scalar AdamW with decoupled decay.
fn scalar_adamw(theta: &mut [f64; 2], m: &mut [f64; 2], v: &mut [f64; 2], g: [f64; 2], t: i32, lr: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for i in 0..2 {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        theta[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

#[test]
fn adamw_matches_scalar_reference_on_a_quadratic() {
    let curv = [1.0, 4.0];
    let grad = |p: &[f64]| [curv[0] * p[0], curv[1] * p[1]];
    let mut store = ParamStore::<f64>::new();
    let id = store.add("theta", Tensor::new(&[2], vec![1.0, -0.8]).unwrap(), ParamKind::NoDecay);
    let mut opt = AdamW::<f64>::new(0.9, 0.999, 1e-8);
    let mut reference = [1.0, -0.8];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for step in 0..200 {
        let lr = lr_schedule(step, 200, 0, 0.1);
        let g = grad(store.value(id).data());
        store.zero_grad();
        store.accumulate_grad(id, &g);
        opt.step(&mut store, lr, 0.0).unwrap();
        let g_ref = grad(&reference);
        scalar_adamw(&mut reference, &mut m, &mut v, g_ref, step as i32 + 1, lr);
        let p = store.value(id).data();
        assert!((p[0] - reference[0]).abs() < 1e-12 && (p[1] - reference[1]).abs() < 1e-12, "step {step}");
    }
    let p = store.value(id).data();
    assert!((p[0].powi(2) + p[1].powi(2)).sqrt() < 1e-3, "{p:?}");
}

#[test]
fn adamw_edge_cases() {
    let (mut p, mut m, mut v) = ([0.7f64, -0.2], [0.0; 2], [0.0; 2]);
    adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.0, (0.9, 0.95), 1e-8);
    assert_eq!(p, [0.7, -0.2]);
    let mut q = [1.0f64];
    adamw_update(&mut q, &[1.0], &mut [0.0], &mut [0.0], 1, 0.1, 0.0, (0.9, 0.999), 1e-8);
    assert!(q[0] < 1.0 && q[0] > 0.0);
    // Decoupled decay alone: p(1 - lr·wd).
    let mut r = [2.0f64];
    adamw_update(&mut r, &[0.0], &mut [0.0], &mut [0.0], 1, 0.1, 0.5, (0.9, 0.999), 1e-8);
    assert!((r[0] - 2.0 * 0.95).abs() < 1e-15);
}

#[test]
fn weight_decay_reaches_weights_only_and_nan_aborts() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::full(&[3], 1.0), ParamKind::Weight);
    let b = store.add("b", Tensor::full(&[3], 1.0), ParamKind::NoDecay);
    let buf = store.add("pos", Tensor::full(&[3], 1.0), ParamKind::Buffer);
    for id in [w, b, buf] {
        store.accumulate_grad(id, &[0.0; 3]);
    }
    let mut opt = AdamW::new(0.9, 0.999, 1e-8);
    opt.step(&mut store, 0.1, 0.5).unwrap();
    assert!(store.value(w).data().iter().all(|&x| (x - 0.95).abs() < 1e-15));
    assert_eq!(store.value(b).data(), &[1.0; 3]);
    assert_eq!(store.value(buf).data(), &[1.0; 3]);

    store.zero_grad();
    store.accumulate_grad(b, &[0.0, f64::NAN, 0.0]);
    store.accumulate_grad(w, &[1.0; 3]);
    let before = store.clone();
    assert!(matches!(opt.step(&mut store, 0.1, 0.5), Err(Error::Numeric(_))));
    assert_eq!(store.value(w), before.value(w));
}

#[test]
fn schedule_shape() {
    assert_eq!(lr_schedule(0, 100, 10, 1e-3), 0.0);
    assert!((lr_schedule(10, 100, 10, 1e-3) - 1e-3).abs() < 1e-18);
    assert!(lr_schedule(99, 100, 10, 1e-3) <= 1e-3 * 1e-2);
    assert!(lr_schedule(100, 100, 10, 1e-3) <= 1e-8 * 1e-3);
    let lrs: Vec<f64> = (10..=100).map(|s| lr_schedule(s, 100, 10, 1.0)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    assert!((1..10).all(|s| lr_schedule(s, 100, 10, 1.0) > lr_schedule(s - 1, 100, 10, 1.0)));
}

#[test]
fn pretrain_smoke_on_eight_images() {
    let data = corpus(5, 1);
    let images: Vec<&Tensor<f32>> = data.iter().take(8).map(|s| &s.image).collect();
    let mut seen = Vec::new();
    let st = pretrain::<f32, _>(&images, &ModelConfig::default(), &quick_pretrain(2, 8, 0), &mut |r| {
        seen.push(r.value);
        ControlFlow::Continue(())
    })
    .unwrap();
    assert_eq!(st.losses().len(), 2);
    assert_eq!(seen, st.losses());
    assert!(st.losses().iter().all(|l| l.is_finite() && *l > 0.0));
    assert!(matches!(
        pretrain::<f32, &Tensor<f32>>(&[], &ModelConfig::default(), &quick_pretrain(2, 8, 0), &mut no_observer()),
        Err(Error::Data(_))
    ));
}

#[test]
fn pretraining_is_reproducible_and_resumable() {
    let data = corpus(5, 2);
    let cfg = small64_config();
    let tc = quick_pretrain(3, 6, 7);
    let a = pretrain::<f64, _>(&data, &cfg, &tc, &mut no_observer()).unwrap();
    let b = pretrain::<f64, _>(&data, &cfg, &tc, &mut no_observer()).unwrap();
    assert_eq!(a.losses(), b.losses());
    assert!(a.model.store.iter().zip(b.model.store.iter()).all(|((_, x), (_, y))| x.value == y.value));

    let mut first = PretrainState::<f64>::new(&cfg, &tc).unwrap();
    first.run(&data, &mut |r| if r.epoch == 1 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }).unwrap();
    assert_eq!(first.epoch, 1);
    let bytes = first.to_checkpoint().unwrap().to_bytes().unwrap();
    let mut resumed = PretrainState::<f64>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    resumed.run(&data, &mut no_observer()).unwrap();
    assert_eq!(resumed.losses(), a.losses());
    assert!(resumed.model.store.iter().zip(a.model.store.iter()).all(|((_, x), (_, y))| x.value == y.value));
}

fn splits(data: &[LabeledSample], seed: u64) -> (Vec<&LabeledSample>, Vec<&LabeledSample>) {
    let m = split_dataset(data, seed).unwrap();
    (m.select(data, &m.train), m.select(data, &m.val))
}

#[test]
fn finetune_resume_matches_an_uninterrupted_run() {
    let data = corpus(6, 3);
    let (train, val) = splits(&data, 0);
    let cfg = small64_config();
    let tc = quick_finetune(3, 5, 1);
    let full = finetune::<f64>(Init::Scratch, &train, &val, &cfg, &tc, &mut no_observer()).unwrap();

    let mut part = FinetuneState::<f64>::new(Init::Scratch, &cfg, &tc).unwrap();
    part.run(&train, &val, &mut |r| {
        if r.epoch == 2 && r.metric == "val_mse" { ControlFlow::Break(()) } else { ControlFlow::Continue(()) }
    })
    .unwrap();
    let ck = Checkpoint::from_bytes(&part.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
    let mut resumed = FinetuneState::<f64>::from_checkpoint(&ck).unwrap();
    resumed.run(&train, &val, &mut no_observer()).unwrap();
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.best_epoch, full.best_epoch);
    let (a, b) = (resumed.selected_model(), full.selected_model());
    assert_eq!(evaluate(&a, &val, "val", 1).unwrap(), evaluate(&b, &val, "val", 1).unwrap());
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let data = corpus(5, 4);
    let (train, val) = splits(&data, 0);
    let cfg = small64_config();
    let mut tc = quick_finetune(2, 4, 2);
    tc.base_learning_rate = 0.0;
    let init = VitRegressor::<f64>::new(&cfg, tc.seed).unwrap();
    let st = finetune::<f64>(Init::Scratch, &train, &val, &cfg, &tc, &mut no_observer()).unwrap();
    for ((_, a), (_, b)) in st.model.store.iter().zip(init.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }

    let pre = pretrain::<f64, _>(&data, &cfg, &quick_pretrain(2, 8, 5), &mut no_observer()).unwrap();
    let st = finetune::<f64>(Init::Pretrained(&pre.model.store), &train, &val, &cfg, &tc, &mut no_observer()).unwrap();
    for (_, p) in st.model.store.iter() {
        if let Some(id) = pre.model.store.find(&p.name) {
            assert_eq!(&p.value, pre.model.store.value(id), "{}", p.name);
        } else {
            assert!(p.name.starts_with("head."));
            assert_eq!(&p.value, init.store.value(init.store.find(&p.name).unwrap()));
        }
    }
}

#[test]
fn frozen_encoder_stays_fixed() {
    let data = corpus(5, 6);
    let (train, val) = splits(&data, 0);
    let cfg = small64_config();
    let mut tc = quick_finetune(2, 4, 3);
    tc.freeze_encoder = true;
    let init = VitRegressor::<f64>::new(&cfg, tc.seed).unwrap();
    let st = finetune::<f64>(Init::Scratch, &train, &val, &cfg, &tc, &mut no_observer()).unwrap();
    for ((_, a), (_, b)) in st.model.store.iter().zip(init.store.iter()) {
        assert_eq!(a.value == b.value, a.name.starts_with("encoder."), "{}", a.name);
    }
}

#[test]
fn predictions_are_batch_and_thread_independent() {
    let data = corpus(5, 7);
    let model = VitRegressor::<f32>::new(&ModelConfig::default(), 9).unwrap();
    let images: Vec<&Tensor<f32>> = data.iter().map(|s| &s.image).collect();
    let single: Vec<f64> = images.iter().map(|i| model.predict(*i).unwrap()).collect();
    assert_eq!(single, images.iter().map(|i| model.predict(*i).unwrap()).collect::<Vec<_>>());
    for (bs, threads) in [(15, 1), (4, 1), (4, 3), (1, 2)] {
        assert_eq!(predict_many(&model, &images, bs, threads).unwrap(), single, "batch {bs} threads {threads}");
    }
    for v in [0.0f32, 1.0] {
        assert!(model.predict(&Tensor::full(&[64, 64, 1], v)).unwrap().is_finite());
    }
    assert!(matches!(model.predict(&Tensor::<f32>::zeros(&[64, 64, 3])), Err(Error::Contract(_))));
}

#[test]
fn evaluation_oracles() {
    let data = corpus(6, 8);
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let cfg = small64_config();
    let mut model = VitRegressor::<f64>::new(&cfg, 1).unwrap();
    let mean = data.iter().map(|s| s.delta_b_max).sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|s| (s.delta_b_max - mean).powi(2)).sum::<f64>() / data.len() as f64;
    common::fill_params(&mut model.store, "head.fc2.weight", 0.0);
    common::fill_params(&mut model.store, "head.fc2.bias", mean);
    let report = evaluate(&model, &refs, "all", 1).unwrap();
    assert!((report.mse - var).abs() < 1e-12 * var.max(1.0));
    assert_eq!(report.confusion.total(), data.len());

    let from_dump: Vec<(f64, f64)> = report
        .tsv()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    let recomputed = from_dump.iter().map(|(y, p)| (y - p).powi(2)).sum::<f64>() / from_dump.len() as f64;
    assert!((recomputed - report.mse).abs() < 1e-8);

    let perfect: Vec<SamplePrediction> = data
        .iter()
        .map(|s| SamplePrediction { led_id: s.led_id.clone(), tsc: s.tsc, label: s.delta_b_max, predicted: s.delta_b_max })
        .collect();
    let r = EvalReport::from_predictions("all", perfect).unwrap();
    assert_eq!(r.mse, 0.0);
    assert_eq!((r.confusion.fp, r.confusion.fn_), (0, 0));
    assert_eq!(r.confusion.tp, data.iter().filter(|s| s.is_defective()).count());
    assert!(matches!(evaluate(&model, &[], "empty", 1), Err(Error::Data(_))));
}

#[test]
fn defect_classes() {
    assert_eq!(classify_defect(0.99), DefectClass::Defective);
    assert_eq!(classify_defect(1.06), DefectClass::Defective);
    assert_eq!(classify_defect(0.18), DefectClass::Functional);
    assert_eq!(classify_defect(0.20), DefectClass::Functional);
    assert_eq!(classify_defect(0.2000001), DefectClass::Defective);
}

#[test]
fn missing_labels_are_rejected() {
    let mut data = corpus(5, 9);
    data[3].delta_b_max = f64::NAN;
    let refs: Vec<&LabeledSample> = data.iter().collect();
    let e = finetune::<f64>(Init::Scratch, &refs, &[], &small64_config(), &quick_finetune(2, 4, 0), &mut no_observer())
        .unwrap_err();
    assert!(matches!(e, Error::Data(_)));
}
