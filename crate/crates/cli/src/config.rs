//! Run configuration: a `key = value` file with `[run]`, `[model]`,
//! `[pretrain]`, `[finetune]` and `[data]` sections, overlaid on defaults and
//! then on command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use selfmae::training::{Phase, Precision, TrainConfig};
use selfmae::vit::{ModelConfig, VitSize};
use selfmae::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub threads: usize,
    pub precision: Precision,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub size: VitSize,
    #[serde(flatten)]
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augment: bool,
    pub freeze_encoder: bool,
    pub select_best: bool,
}

impl PhaseSection {
    fn from_train(t: &TrainConfig) -> Self {
        PhaseSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_learning_rate: t.base_learning_rate,
            weight_decay: t.weight_decay,
            warmup_epochs: t.warmup_epochs,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            augment: t.augment,
            freeze_encoder: t.freeze_encoder,
            select_best: t.select_best,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory that manifest image paths are relative to.
    pub root: Option<PathBuf>,
    /// Manifest file; defaults to `<root>/manifest.csv`.
    pub manifest: Option<PathBuf>,
    /// Generate this many synthetic LEDs instead of reading files.
    pub synthetic: Option<usize>,
}

/// Fully resolved configuration of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub pretrain: PhaseSection,
    pub finetune: PhaseSection,
    pub data: DataSection,
}

impl RunConfig {
    pub fn defaults(size: VitSize) -> Self {
        RunConfig {
            run: RunSection { seed: 0, threads: 1, precision: Precision::F32, out: PathBuf::from("runs/latest") },
            model: ModelSection { size, config: ModelConfig::sized(size) },
            pretrain: PhaseSection::from_train(&TrainConfig::pretrain()),
            finetune: PhaseSection::from_train(&TrainConfig::finetune()),
            data: DataSection::default(),
        }
    }

    /// Defaults, then `file` (if any), then `overrides` as `section.key = value` pairs.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut user = Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            user = text.parse::<Table>().map_err(|e| Error::Config(format!("{}: {}", path.display(), one_line(&e.to_string()))))?;
        }
        for (key, raw) in overrides {
            set_path(&mut user, key, parse_value(raw))?;
        }
        let size = match user.get("model").and_then(|m| m.get("size")) {
            Some(Value::String(s)) => VitSize::parse(s)?,
            Some(other) => return Err(Error::Config(format!("model.size must be a string, got {other}"))),
            None => VitSize::Ti,
        };
        let base = Value::try_from(Self::defaults(size)).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Table(mut merged) = base else { unreachable!("config serializes to a table") };
        overlay(&mut merged, &user, "")?;
        let mut cfg: RunConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        // A default warmup never outlasts a short run; an explicit one is validated as given.
        for (name, phase) in [("pretrain", &mut cfg.pretrain), ("finetune", &mut cfg.finetune)] {
            let explicit = user.get(name).and_then(|s| s.get("warmup_epochs")).is_some();
            if !explicit {
                phase.warmup_epochs = phase.warmup_epochs.min(phase.epochs.saturating_sub(1));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.config.validate()?;
        self.train(Phase::Pretrain).validate()?;
        self.train(Phase::Finetune).validate()
    }

    pub fn train(&self, phase: Phase) -> TrainConfig {
        let s = match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::Finetune => &self.finetune,
        };
        TrainConfig {
            phase,
            epochs: s.epochs,
            batch_size: s.batch_size,
            base_learning_rate: s.base_learning_rate,
            weight_decay: s.weight_decay,
            warmup_epochs: s.warmup_epochs,
            seed: self.run.seed,
            precision: self.run.precision,
            beta1: s.beta1,
            beta2: s.beta2,
            adam_eps: s.adam_eps,
            augment: s.augment,
            freeze_encoder: s.freeze_encoder,
            select_best: s.select_best,
            threads: self.run.threads,
        }
    }

    /// The resolved configuration in the same file format it is read from.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Numbers and booleans as such, anything else as a string.
pub fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return Value::Float(f);
    }
    match raw {
        "true" => Value::Boolean(true),
        "false" => Value::Boolean(false),
        _ => Value::String(raw.trim_matches('"').to_string()),
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<()> {
    let Some((section, field)) = key.split_once('.') else {
        return Err(Error::Config(format!("override {key:?} must look like section.key")));
    };
    let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
    match entry {
        Value::Table(t) => {
            t.insert(field.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("{section} is not a section"))),
    }
}

fn overlay(base: &mut Table, user: &Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let optional = prefix == "data";
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(u)) => overlay(b, u, &name)?,
            (Some(Value::Table(_)), _) => return Err(Error::Config(format!("{name} must be a section"))),
            (Some(slot), v) => *slot = coerce(slot, v.clone()),
            (None, v) if optional => {
                base.insert(k.clone(), v.clone());
            }
            (None, _) => return Err(Error::Config(format!("unknown configuration key {name}"))),
        }
    }
    Ok(())
}

/// Integer literals written where a float is expected become floats.
fn coerce(slot: &Value, v: Value) -> Value {
    match (slot, v) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (_, v) => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = RunConfig::defaults(VitSize::Ti);
        let back: RunConfig = toml::from_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_size() {
        let o = vec![
            ("model.size".to_string(), "s".to_string()),
            ("pretrain.epochs".to_string(), "3".to_string()),
            ("finetune.base_learning_rate".to_string(), "1".to_string()),
            ("data.synthetic".to_string(), "12".to_string()),
        ];
        let c = RunConfig::resolve(None, &o).unwrap();
        assert_eq!((c.model.config.layers, c.model.config.width, c.model.config.heads), (12, 384, 6));
        assert_eq!(c.pretrain.epochs, 3);
        assert_eq!(c.finetune.base_learning_rate, 1.0);
        assert_eq!(c.data.synthetic, Some(12));
    }

    #[test]
    fn unknown_key_is_config_error() {
        let o = vec![("pretrain.epoch".to_string(), "3".to_string())];
        let e = RunConfig::resolve(None, &o).unwrap_err();
        assert!(matches!(e, Error::Config(_)), "{e}");
        assert!(e.to_string().contains("pretrain.epoch"));
    }
}
