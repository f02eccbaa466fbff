use std::ops::ControlFlow;

use rand::seq::SliceRandom;

use super::config::{MetricRecord, Phase, TrainConfig};
use super::eval::evaluate;
use super::optim::{lr_schedule, AdamW};
use crate::checkpoint::{Checkpoint, CheckpointMeta, ModelKind, BEST};
use crate::data::{augment, LabeledSample};
use crate::mae::{sample_mask, MaeModel, MaskPlan};
use crate::params::{Graph, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor};
use crate::vit::{patch_batch, ModelConfig, Taps, VitEncoder, VitRegressor};
use crate::{Error, Result};

/// Receives every metric record as it is produced; `Break` stops training
/// after the current epoch.
pub type Observer<'a> = &'a mut dyn FnMut(&MetricRecord) -> ControlFlow<()>;

/// Observer that only forwards records to the log.
pub fn log_observer(r: &MetricRecord) -> ControlFlow<()> {
    log::info!("epoch {} {} {} = {:.6} (lr {:.3e})", r.epoch, r.phase.name(), r.metric, r.value, r.lr);
    ControlFlow::Continue(())
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", epoch as u64));
    order
}

fn training_image(image: &Tensor<f32>, cfg: &TrainConfig, epoch: usize, index: usize) -> Tensor<f32> {
    if cfg.augment {
        augment(image, &mut rng::sample_stream(cfg.seed, "augment", epoch as u64, index as u64))
    } else {
        image.clone()
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn apply_grads<T: Real>(store: &mut ParamStore<T>, grads: Vec<(crate::params::ParamId, Vec<T>)>) {
    store.zero_grad();
    store.accumulate_from(grads);
}

/// MAE model with its optimizer and progress, resumable from a checkpoint.
#[derive(Debug, Clone)]
pub struct PretrainState<T: Real> {
    pub model: MaeModel<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<MetricRecord>,
}

impl<T: Real> PretrainState<T> {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(PretrainState {
            model: MaeModel::new(model_config, config.seed)?,
            optimizer: AdamW::new(config.beta1, config.beta2, config.adam_eps),
            config: config.clone(),
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Trains until `config.epochs` are complete or the observer stops it.
    pub fn run<S: AsRef<Tensor<f32>>>(&mut self, data: &[S], observer: Observer<'_>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Data("pre-training set is empty".into()));
        }
        let cfg = self.config.clone();
        let n_patches = self.model.encoder.num_patches();
        let spe = steps_per_epoch(data.len(), cfg.batch_size);
        let (total, warmup) = (cfg.epochs * spe, cfg.warmup_epochs * spe);
        while self.epoch < cfg.epochs {
            let epoch = self.epoch;
            let order = epoch_order(data.len(), cfg.seed, epoch);
            let (mut loss_sum, mut count) = (0.0, 0usize);
            let mut lr = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                lr = lr_schedule(self.optimizer.step as usize, total, warmup, cfg.base_learning_rate);
                let images: Vec<Tensor<f32>> =
                    batch.iter().map(|&i| training_image(data[i].as_ref(), &cfg, epoch, i)).collect();
                let plans = batch
                    .iter()
                    .map(|&i| {
                        let seed = rng::sample_seed(cfg.seed, "mask", epoch as u64, i as u64);
                        sample_mask(n_patches, self.model.config.mask_ratio, seed)
                    })
                    .collect::<Result<Vec<MaskPlan>>>()?;
                let refs: Vec<&Tensor<f32>> = images.iter().collect();
                let patches = patch_batch::<T, f32>(&refs, self.model.config.patch_size)?;
                let mut g = Graph::new(&self.model.store, true);
                let fwd = self.model.forward_batch(&mut g, &patches, &plans)?;
                let Some(loss) = fwd.loss else {
                    count += batch.len();
                    continue;
                };
                let value = g.tape.value(loss).data()[0].f64();
                g.tape.backward(loss)?;
                let grads = g.into_param_grads();
                apply_grads(&mut self.model.store, grads);
                self.optimizer.step(&mut self.model.store, lr, cfg.weight_decay)?;
                self.model.store.zero_grad();
                loss_sum += value * batch.len() as f64;
                count += batch.len();
            }
            self.epoch += 1;
            let rec = MetricRecord {
                epoch: self.epoch,
                phase: Phase::Pretrain,
                metric: "mae_loss".into(),
                value: loss_sum / count as f64,
                lr,
            };
            if !rec.value.is_finite() {
                return Err(Error::Numeric(format!("pre-training loss is {} at epoch {}", rec.value, rec.epoch)));
            }
            self.history.push(rec.clone());
            if observer(&rec).is_break() {
                break;
            }
        }
        Ok(())
    }

    /// Per-epoch mean masked loss so far.
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().filter(|r| r.metric == "mae_loss").map(|r| r.value).collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::new(ModelKind::Mae, self.model.config.clone(), self.config.seed);
        meta.train = Some(self.config.clone());
        meta.epoch = self.epoch;
        meta.step = self.optimizer.step;
        meta.history = self.history.clone();
        let mut ck = Checkpoint::new(meta);
        ck.push_store(&self.model.store);
        self.optimizer.export(&self.model.store, &mut ck)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != ModelKind::Mae {
            return Err(Error::Config("checkpoint does not hold an MAE model".into()));
        }
        let config = ck.meta.train.clone().ok_or_else(|| Error::Config("checkpoint has no training config".into()))?;
        let mut state = Self::new(&ck.meta.model, &config)?;
        state.model.store.load_matching(&ck.params()?, "")?;
        state.optimizer.import(&state.model.store, ck, ck.meta.step)?;
        state.epoch = ck.meta.epoch;
        state.history = ck.meta.history.clone();
        Ok(state)
    }
}

/// Runs MAE pre-training from a fresh initialization.
pub fn pretrain<T: Real, S: AsRef<Tensor<f32>>>(
    data: &[S],
    model_config: &ModelConfig,
    config: &TrainConfig,
    observer: Observer<'_>,
) -> Result<PretrainState<T>> {
    let mut state = PretrainState::new(model_config, config)?;
    state.run(data, observer)?;
    Ok(state)
}

/// Starting point for fine-tuning.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a, T: Real> {
    /// Fresh encoder: the supervised baseline.
    Scratch,
    /// Encoder tensors copied from a pre-trained store.
    Pretrained(&'a ParamStore<T>),
}

#[derive(Debug, Clone)]
pub struct FinetuneState<T: Real> {
    pub model: VitRegressor<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub history: Vec<MetricRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mse: f64,
    best_store: Option<ParamStore<T>>,
}

impl<T: Real> FinetuneState<T> {
    pub fn new(init: Init<'_, T>, model_config: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model = match init {
            Init::Scratch => VitRegressor::new(model_config, config.seed)?,
            Init::Pretrained(store) => VitRegressor::from_pretrained(model_config, store, config.seed)?,
        };
        model.freeze_encoder(config.freeze_encoder);
        Ok(FinetuneState {
            model,
            optimizer: AdamW::new(config.beta1, config.beta2, config.adam_eps),
            config: config.clone(),
            epoch: 0,
            history: Vec::new(),
            best_epoch: None,
            best_val_mse: f64::INFINITY,
            best_store: None,
        })
    }

    fn record(&mut self, metric: &str, value: f64, lr: f64, observer: &mut Observer<'_>) -> ControlFlow<()> {
        let rec = MetricRecord { epoch: self.epoch, phase: Phase::Finetune, metric: metric.into(), value, lr };
        self.history.push(rec.clone());
        observer(&rec)
    }

    /// Trains on `train`, scoring `val` after every epoch.
    pub fn run(&mut self, train: &[&LabeledSample], val: &[&LabeledSample], mut observer: Observer<'_>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Data("fine-tuning set is empty".into()));
        }
        if let Some(s) = train.iter().find(|s| !s.delta_b_max.is_finite()) {
            return Err(Error::Data(format!("LED {} tsc {} has no label", s.led_id, s.tsc)));
        }
        let cfg = self.config.clone();
        let spe = steps_per_epoch(train.len(), cfg.batch_size);
        let (total, warmup) = (cfg.epochs * spe, cfg.warmup_epochs * spe);
        while self.epoch < cfg.epochs {
            let epoch = self.epoch;
            let order = epoch_order(train.len(), cfg.seed, epoch);
            let (mut loss_sum, mut lr) = (0.0, 0.0);
            for batch in order.chunks(cfg.batch_size) {
                lr = lr_schedule(self.optimizer.step as usize, total, warmup, cfg.base_learning_rate);
                let images: Vec<Tensor<f32>> =
                    batch.iter().map(|&i| training_image(&train[i].image, &cfg, epoch, i)).collect();
                let labels: Vec<T> = batch.iter().map(|&i| T::of(train[i].delta_b_max)).collect();
                let refs: Vec<&Tensor<f32>> = images.iter().collect();
                let patches = patch_batch::<T, f32>(&refs, self.model.config.patch_size)?;
                let mut g = Graph::new(&self.model.store, true);
                let p = g.tape.constant(patches);
                let out = self.model.forward(&mut g, p, batch.len(), &mut Taps::default())?;
                let loss = g.tape.mse(out, &labels)?;
                loss_sum += g.tape.value(loss).data()[0].f64() * batch.len() as f64;
                g.tape.backward(loss)?;
                let grads = g.into_param_grads();
                apply_grads(&mut self.model.store, grads);
                self.optimizer.step(&mut self.model.store, lr, cfg.weight_decay)?;
                self.model.store.zero_grad();
            }
            self.epoch += 1;
            let train_mse = loss_sum / train.len() as f64;
            if !train_mse.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss is {train_mse} at epoch {}", self.epoch)));
            }
            let mut flow = self.record("train_mse", train_mse, lr, &mut observer);
            if !val.is_empty() {
                let mse = evaluate(&self.model, val, "val", cfg.threads)?.mse;
                if mse < self.best_val_mse {
                    self.best_val_mse = mse;
                    self.best_epoch = Some(self.epoch);
                    if cfg.select_best {
                        self.best_store = Some(self.model.store.clone());
                    }
                }
                flow = self.record("val_mse", mse, lr, &mut observer);
            }
            if flow.is_break() {
                break;
            }
        }
        Ok(())
    }

    /// Model at the best validation epoch when selection is on, else the last one.
    pub fn selected_model(&self) -> VitRegressor<T> {
        let mut m = self.model.clone();
        if let Some(store) = &self.best_store {
            m.store = store.clone();
        }
        m
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::new(ModelKind::Regressor, self.model.config.clone(), self.config.seed);
        meta.train = Some(self.config.clone());
        meta.epoch = self.epoch;
        meta.step = self.optimizer.step;
        meta.history = self.history.clone();
        meta.best_epoch = self.best_epoch;
        let mut ck = Checkpoint::new(meta);
        ck.push_store(&self.model.store);
        if let Some(best) = self.best_store.as_ref().filter(|_| self.best_epoch != Some(self.epoch)) {
            for (_, p) in best.iter() {
                ck.push(format!("{BEST}{}", p.name), &p.value);
            }
        }
        self.optimizer.export(&self.model.store, &mut ck)?;
        Ok(ck)
    }

    /// Resumes from a checkpoint written by [`FinetuneState::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.meta.train.clone().ok_or_else(|| Error::Config("checkpoint has no training config".into()))?;
        let mut state = Self::new(Init::Scratch, &ck.meta.model, &config)?;
        state.model.store.load_matching(&ck.params()?, "")?;
        state.optimizer.import(&state.model.store, ck, ck.meta.step)?;
        state.epoch = ck.meta.epoch;
        state.history = ck.meta.history.clone();
        state.best_epoch = ck.meta.best_epoch;
        state.best_val_mse =
            ck.meta.history.iter().filter(|r| r.metric == "val_mse").map(|r| r.value).fold(f64::INFINITY, f64::min);
        if config.select_best && ck.meta.best_epoch.is_some() {
            let mut best = state.model.store.clone();
            if ck.has_prefix(BEST) {
                best.load_matching(&ck.params_with_prefix(BEST)?, "")?;
            }
            state.best_store = Some(best);
        }
        Ok(state)
    }
}

/// Fine-tunes a regressor and returns the state; see [`FinetuneState::selected_model`].
pub fn finetune<T: Real>(
    init: Init<'_, T>,
    train: &[&LabeledSample],
    val: &[&LabeledSample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    observer: Observer<'_>,
) -> Result<FinetuneState<T>> {
    let mut state = FinetuneState::new(init, model_config, config)?;
    state.run(train, val, observer)?;
    Ok(state)
}

/// Regressor weights stored in a checkpoint.
pub fn regressor_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<VitRegressor<T>> {
    if ck.meta.kind != ModelKind::Regressor || !ck.has_prefix("head.") {
        return Err(Error::Config("checkpoint has no regression head".into()));
    }
    let mut model = VitRegressor::new(&ck.meta.model, ck.meta.seed)?;
    if ck.has_prefix(BEST) {
        model.store.load_matching(&ck.params_with_prefix(BEST)?, "")?;
    } else {
        model.store.load_matching(&ck.params()?, "")?;
    }
    Ok(model)
}

/// MAE weights stored in a checkpoint.
pub fn mae_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<MaeModel<T>> {
    if ck.meta.kind != ModelKind::Mae || !ck.has_prefix("decoder.") {
        return Err(Error::Config("checkpoint has no MAE decoder".into()));
    }
    let mut model = MaeModel::new(&ck.meta.model, ck.meta.seed)?;
    model.store.load_matching(&ck.params()?, "")?;
    Ok(model)
}

/// Encoder tensors of any checkpoint, for initializing fine-tuning.
pub fn encoder_from_checkpoint<T: Real>(ck: &Checkpoint) -> Result<ParamStore<T>> {
    if !ck.has_prefix(VitEncoder::PREFIX) {
        return Err(Error::Config("checkpoint has no encoder tensors".into()));
    }
    ck.params()
}
