use std::collections::HashMap;

use crate::checkpoint::{Checkpoint, OPT_M, OPT_V};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Linear warmup from 0 over `warmup_steps`, then cosine decay reaching 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base: f64) -> f64 {
    if step < warmup_steps {
        return base * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One AdamW update of a flat parameter slice with decoupled weight decay.
///
/// `t` is the 1-based step count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 / (1.0 - b1.powi(t as i32));
    let c2 = 1.0 / (1.0 - b2.powi(t as i32));
    let decay = T::of(1.0 - lr * weight_decay);
    let (b1, b2, c1, c2, lr, eps) = (T::of(b1), T::of(b2), T::of(c1), T::of(c2), T::of(lr), T::of(eps));
    let one = T::one();
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] * c1;
        let vhat = v[i] * c2;
        param[i] = param[i] * decay - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW state for every parameter of a store, indexed like the store.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW { beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one step to every parameter holding a gradient. Weight decay
    /// reaches [`ParamKind::Weight`] tensors only. A non-finite gradient
    /// aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, weight_decay: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
                }
            }
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.step += 1;
        let t = self.step;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable() {
                continue;
            }
            let Some(g) = &p.grad else { continue };
            let n = g.len();
            let m = self.m[i].get_or_insert_with(|| vec![T::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![T::zero(); n]);
            let wd = if p.kind == ParamKind::Weight { weight_decay } else { 0.0 };
            adamw_update(p.value.data_mut(), g, m, v, t, lr, wd, (self.beta1, self.beta2), self.eps);
        }
        Ok(())
    }

    /// Stores the moment buffers as `opt.m.<name>` / `opt.v.<name>`.
    pub fn export(&self, store: &ParamStore<T>, ck: &mut Checkpoint) -> Result<()> {
        for (id, p) in store.iter() {
            let i = id.index();
            if let (Some(Some(m)), Some(Some(v))) = (self.m.get(i), self.v.get(i)) {
                let shape = p.value.shape();
                ck.push(format!("{OPT_M}{}", p.name), &Tensor::new(shape, m.clone())?);
                ck.push(format!("{OPT_V}{}", p.name), &Tensor::new(shape, v.clone())?);
            }
        }
        Ok(())
    }

    /// Restores moment buffers written by [`AdamW::export`]; `step` comes from the caller.
    pub fn import(&mut self, store: &ParamStore<T>, ck: &Checkpoint, step: u64) -> Result<()> {
        let by_name: HashMap<&str, usize> = ck.tensors.iter().enumerate().map(|(i, t)| (t.name.as_str(), i)).collect();
        self.m = vec![None; store.len()];
        self.v = vec![None; store.len()];
        self.step = step;
        for (id, p) in store.iter() {
            let get = |prefix: &str| by_name.get(format!("{prefix}{}", p.name).as_str()).map(|&i| &ck.tensors[i]);
            if let (Some(m), Some(v)) = (get(OPT_M), get(OPT_V)) {
                if m.shape != p.value.shape() || v.shape != p.value.shape() {
                    return Err(Error::Config(format!("optimizer state for {} has the wrong shape", p.name)));
                }
                self.m[id.index()] = Some(m.data.to_real());
                self.v[id.index()] = Some(v.data.to_real());
            }
        }
        Ok(())
    }
}
