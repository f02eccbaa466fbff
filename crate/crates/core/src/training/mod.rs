//! Optimization loops for MAE pre-training and supervised fine-tuning,
//! evaluation and defect classification.

mod config;
mod eval;
mod loops;
mod optim;

pub use config::{MetricRecord, Phase, Precision, TrainConfig};
pub use eval::{classify_defect, evaluate, predict, predict_many, Confusion, DefectClass, EvalReport, SamplePrediction};
pub use loops::{
    encoder_from_checkpoint, finetune, log_observer, mae_from_checkpoint, pretrain, regressor_from_checkpoint,
    FinetuneState, Init, Observer, PretrainState,
};
pub use optim::{adamw_update, lr_schedule, AdamW};
