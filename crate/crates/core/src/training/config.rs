use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

/// Optimization settings for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Flip and crop augmentation on training batches.
    pub augment: bool,
    /// Fine-tuning only: keep encoder weights fixed and train the head.
    pub freeze_encoder: bool,
    /// Fine-tuning only: restore the epoch with the lowest validation MSE.
    pub select_best: bool,
    /// Worker threads for evaluation; 1 keeps everything on the calling thread.
    pub threads: usize,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            epochs: 50,
            batch_size: 64,
            base_learning_rate: 1.5e-3,
            weight_decay: 0.05,
            warmup_epochs: 5,
            seed: 0,
            precision: Precision::F32,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            augment: true,
            freeze_encoder: false,
            select_best: false,
            threads: 1,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            epochs: 20,
            base_learning_rate: 5e-4,
            warmup_epochs: 2,
            beta2: 0.999,
            select_best: true,
            ..Self::pretrain()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.base_learning_rate >= 0.0) || !self.base_learning_rate.is_finite() {
            return fail(format!("learning rate {} is invalid", self.base_learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight decay {} is negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.threads < 1 {
            return fail("threads must be at least 1".into());
        }
        Ok(())
    }
}

/// One line of metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub metric: String,
    pub value: f64,
    pub lr: f64,
}

impl MetricRecord {
    pub const TSV_HEADER: &'static str = "epoch\tphase\tmetric\tvalue\tlr";

    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{}\t{:.9e}\t{:.6e}", self.epoch, self.phase.name(), self.metric, self.value, self.lr)
    }
}
