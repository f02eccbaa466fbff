#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfmae::tensor::{Tape, Tensor, TensorError, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor on the denominator, so coordinates
/// whose true derivative is numerically zero compare on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Max relative error between tape gradients and central differences for
/// `sum(weights ⊙ f(inputs))` with fixed random projection weights.
pub fn fd_check<F>(inputs: &[Tensor<f64>], seed: u64, floor: f64, f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut r = rng(seed);
    let eval = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>, grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars).unwrap();
        let w = weights.cloned().unwrap_or_else(|| Tensor::full(tape.shape(out), 1.0));
        let wv = tape.constant(w);
        let p = tape.mul(out, wv).unwrap();
        let loss = tape.sum(p).unwrap();
        let value = tape.value(loss).data()[0];
        if grad {
            tape.backward(loss).unwrap();
        }
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_default()).collect();
        (value, grads, tape.shape(out).to_vec())
    };
    let (_, _, out_shape) = eval(inputs, None, false);
    let weights = random_tensor(&out_shape, &mut r);
    let (_, analytic, _) = eval(inputs, Some(&weights), true);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, Some(&weights), false).0 - eval(&minus, Some(&weights), false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric, floor));
        }
    }
    worst
}

/// A few-thousand-parameter model on 16×16×1 inputs with 4×4 patches (N = 16).
pub fn small_config() -> selfmae::vit::ModelConfig {
    selfmae::vit::ModelConfig {
        layers: 2,
        width: 16,
        heads: 2,
        patch_size: 4,
        image_size: 16,
        in_channels: 1,
        head_hidden: 8,
        mask_ratio: 0.75,
        decoder_layers: 1,
        decoder_width: 8,
        decoder_heads: 2,
        pretrain_class_token: true,
        norm_eps: 1e-6,
    }
}

pub fn random_image(size: usize, channels: usize, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(&[size, size, channels], |_| rng.random_range(0.0..1.0))
}

/// Overwrites every parameter whose name starts with `prefix`.
pub fn fill_params<T: selfmae::tensor::Real>(store: &mut selfmae::params::ParamStore<T>, prefix: &str, value: f64) {
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        p.value.data_mut().iter_mut().for_each(|v| *v = T::of(value));
    }
}

/// [`small_config`] on full-size 64×64 inputs with 16×16 patches, so real and
/// synthetic samples (and augmentation) can be used.
pub fn small64_config() -> selfmae::vit::ModelConfig {
    selfmae::vit::ModelConfig { image_size: 64, patch_size: 16, ..small_config() }
}

pub fn quick_pretrain(epochs: usize, batch: usize, seed: u64) -> selfmae::training::TrainConfig {
    let mut c = selfmae::training::TrainConfig::pretrain();
    c.epochs = epochs;
    c.warmup_epochs = 1.min(epochs - 1);
    c.batch_size = batch;
    c.seed = seed;
    c
}

pub fn quick_finetune(epochs: usize, batch: usize, seed: u64) -> selfmae::training::TrainConfig {
    let mut c = selfmae::training::TrainConfig::finetune();
    c.epochs = epochs;
    c.warmup_epochs = 1.min(epochs - 1);
    c.batch_size = batch;
    c.seed = seed;
    c
}

pub fn no_observer() -> impl FnMut(&selfmae::training::MetricRecord) -> std::ops::ControlFlow<()> {
    |_| std::ops::ControlFlow::Continue(())
}
