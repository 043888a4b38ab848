//! Run configuration: a flat, human-diffable key = value file (TOML
//! subset with dotted sections), command-line overrides, and resolution
//! into the typed objects the trainer consumes.

use crate::error::{Error, Result};
use crate::mixing::{MixKind, MixStrategy};
use crate::scheduling::{ScheduleKind, TeacherForcingSchedule};
use crate::tasks::TaskKind;
use crate::trainer::{LoopConfig, OptimConfig, TrainMode};
use crate::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// "baseline" or "scheduled".
    pub mode: String,
    pub seed: u64,
    pub task: TaskSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub mix: MixSection,
    pub schedule: ScheduleSection,
    pub optim: OptimSection,
    pub train: TrainSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            mode: "scheduled".to_string(),
            seed: 1,
            task: TaskSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            mix: MixSection::default(),
            schedule: ScheduleSection::default(),
            optim: OptimSection::default(),
            train: TrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    /// copy | reverse | sort | files
    pub kind: String,
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: "copy".to_string(),
            vocab: 16,
            min_len: 4,
            max_len: 12,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_src: String,
    pub train_tgt: String,
    pub dev_src: String,
    pub dev_tgt: String,
    pub test_src: String,
    pub test_tgt: String,
    pub min_freq: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub share_embeddings: bool,
    pub share_decoder_out_embedding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 128,
            max_len: 32,
            dropout: 0.0,
            share_embeddings: true,
            share_decoder_out_embedding: true,
        }
    }
}

impl ModelSection {
    /// The published full-scale hyperparameters (6 layers, 8 heads, 512).
    pub fn full_scale() -> Self {
        ModelSection {
            n_layers: 6,
            n_heads: 8,
            d_model: 512,
            d_ff: 2048,
            max_len: 512,
            dropout: 0.2,
            share_embeddings: true,
            share_decoder_out_embedding: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    /// argmax | topk | softmax | gumbel | sparsemax
    pub kind: String,
    pub alpha: f64,
    pub k: usize,
    pub backprop_through_first: bool,
}

impl Default for MixSection {
    fn default() -> Self {
        MixSection {
            kind: "softmax".to_string(),
            alpha: 1.0,
            k: 5,
            backprop_through_first: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    /// linear | exponential | inverse_sigmoid | constant
    pub kind: String,
    pub epsilon: f64,
    pub k: f64,
    pub c: f64,
    pub pure_tf_steps: u64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: "linear".to_string(),
            epsilon: 0.3,
            k: 1.0,
            c: 1.0 / 3000.0,
            pure_tf_steps: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub clip_norm: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            warmup_steps: 400,
            lr_scale: 1.0,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_steps: u64,
    pub validation_interval: u64,
    /// Stop once dev accuracy and BLEU both reach these bars; 0 disables.
    pub early_stop_acc: f64,
    pub early_stop_bleu: f64,
    pub resume_from: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 16,
            max_steps: 3000,
            validation_interval: 250,
            early_stop_acc: 0.0,
            early_stop_bleu: 0.0,
            resume_from: String::new(),
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Config::from_str_with_overrides(&text, &[])
    }

    /// Parse config text and apply dotted-path `key=value` overrides.
    pub fn from_str_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {}", e)))?;
        for kv in overrides {
            apply_override(&mut table, kv)?;
        }
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config error: {}", e)))?;
        config.validate()?;
        Ok(config)
    }

    pub fn with_overrides(overrides: &[String]) -> Result<Self> {
        let text = toml::to_string(&Config::default())
            .map_err(|e| Error::Config(format!("serialize default config: {}", e)))?;
        Config::from_str_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize config: {}", e)))
    }

    pub fn validate(&self) -> Result<()> {
        self.task_kind()?;
        if self.mode != "baseline" && self.mode != "scheduled" {
            return Err(Error::Config(format!(
                "mode must be baseline or scheduled, got {}",
                self.mode
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".to_string()));
        }
        if self.train.validation_interval == 0 {
            return Err(Error::Config(
                "train.validation_interval must be >= 1".to_string(),
            ));
        }
        if self.mode == "scheduled" {
            self.mix_strategy()?;
            self.schedule()?;
        }
        Ok(())
    }

    pub fn task_kind(&self) -> Result<Option<TaskKind>> {
        match self.task.kind.as_str() {
            "copy" => Ok(Some(TaskKind::Copy)),
            "reverse" => Ok(Some(TaskKind::Reverse)),
            "sort" => Ok(Some(TaskKind::Sort)),
            "files" => Ok(None),
            other => Err(Error::Config(format!(
                "task.kind must be copy, reverse, sort or files, got {}",
                other
            ))),
        }
    }

    pub fn mix_strategy(&self) -> Result<MixStrategy> {
        let kind = match self.mix.kind.as_str() {
            "argmax" => MixKind::Argmax,
            "topk" => MixKind::Topk,
            "softmax" => MixKind::Softmax,
            "gumbel" => MixKind::Gumbel,
            "sparsemax" => MixKind::Sparsemax,
            other => {
                return Err(Error::Config(format!(
                    "mix.kind must be argmax, topk, softmax, gumbel or sparsemax, got {}",
                    other
                )))
            }
        };
        MixStrategy::new(kind, self.mix.alpha, self.mix.k)
    }

    pub fn schedule(&self) -> Result<TeacherForcingSchedule> {
        let kind = match self.schedule.kind.as_str() {
            "linear" => ScheduleKind::Linear,
            "exponential" => ScheduleKind::Exponential,
            "inverse_sigmoid" => ScheduleKind::InverseSigmoid,
            "constant" => ScheduleKind::Constant,
            other => {
                return Err(Error::Config(format!(
                "schedule.kind must be linear, exponential, inverse_sigmoid or constant, got {}",
                other
            )))
            }
        };
        TeacherForcingSchedule::new(
            kind,
            self.schedule.epsilon,
            self.schedule.k,
            self.schedule.c,
            self.schedule.pure_tf_steps,
        )
    }

    pub fn train_mode(&self) -> Result<TrainMode> {
        if self.mode == "baseline" {
            Ok(TrainMode::Baseline)
        } else {
            Ok(TrainMode::Scheduled {
                strategy: self.mix_strategy()?,
                schedule: self.schedule()?,
                backprop_through_first: self.mix.backprop_through_first,
            })
        }
    }

    pub fn transformer_config(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_model: self.model.d_model,
            d_ff: self.model.d_ff,
            vocab_size,
            max_len: self.model.max_len,
            dropout_rate: self.model.dropout,
            share_embeddings: self.model.share_embeddings,
            share_decoder_out_embedding: self.model.share_decoder_out_embedding,
            pad_id: crate::tasks::PAD_ID,
            bos_id: crate::tasks::BOS_ID,
            eos_id: crate::tasks::EOS_ID,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            warmup_steps: self.optim.warmup_steps,
            lr_scale: self.optim.lr_scale,
            clip_norm: self.optim.clip_norm,
        }
    }

    pub fn loop_config(&self, out_dir: Option<PathBuf>) -> LoopConfig {
        let early_stop = (self.train.early_stop_acc > 0.0 || self.train.early_stop_bleu > 0.0)
            .then_some((self.train.early_stop_acc, self.train.early_stop_bleu));
        LoopConfig {
            max_steps: self.train.max_steps,
            validation_interval: self.train.validation_interval,
            batch_size: self.train.batch_size,
            seed: self.seed,
            out_dir,
            early_stop,
        }
    }
}

/// Apply one `dotted.path=value` override onto a parsed table. Values are
/// interpreted as bool, integer or float when they parse as one, else as a
/// string.
fn apply_override(table: &mut toml::Table, kv: &str) -> Result<()> {
    let (path, raw) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override must be key=value, got {}", kv)))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(Error::Config(format!("empty key in override {}", kv)));
    }
    let value = parse_scalar(raw);
    let mut cur = table;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a section", part)))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    let unquoted = raw.trim_matches('"');
    if let Ok(b) = unquoted.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = unquoted.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = unquoted.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(unquoted.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let text = Config::default().to_toml_string().unwrap();
        let back = Config::from_str_with_overrides(&text, &[]).unwrap();
        assert_eq!(back, Config::default());
    }

    #[test]
    fn flat_dotted_keys_parse() {
        let text = "mode = \"baseline\"\nseed = 7\nschedule.epsilon = 0.1\nmodel.d_model = 32\n";
        let c = Config::from_str_with_overrides(text, &[]).unwrap();
        assert_eq!(c.mode, "baseline");
        assert_eq!(c.seed, 7);
        assert_eq!(c.schedule.epsilon, 0.1);
        assert_eq!(c.model.d_model, 32);
        // untouched keys keep their defaults
        assert_eq!(c.train.batch_size, 16);
    }

    #[test]
    fn overrides_apply_with_type_inference() {
        let c = Config::with_overrides(&[
            "mode=baseline".to_string(),
            "train.max_steps=50".to_string(),
            "schedule.c=0.001".to_string(),
            "mix.backprop_through_first=true".to_string(),
            "mix.kind=gumbel".to_string(),
        ])
        .unwrap();
        assert_eq!(c.mode, "baseline");
        assert_eq!(c.train.max_steps, 50);
        assert_eq!(c.schedule.c, 0.001);
        assert!(c.mix.backprop_through_first);
        assert_eq!(c.mix.kind, "gumbel");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_str_with_overrides("nonsense = 1\n", &[]).is_err());
        assert!(Config::with_overrides(&["train.not_a_key=1".to_string()]).is_err());
    }

    #[test]
    fn invalid_combinations_rejected() {
        assert!(Config::with_overrides(&["mode=fancy".to_string()]).is_err());
        assert!(Config::with_overrides(&["mix.kind=nope".to_string()]).is_err());
        assert!(Config::with_overrides(&["schedule.epsilon=1.5".to_string()]).is_err());
        assert!(Config::with_overrides(&["task.kind=qq".to_string()]).is_err());
    }

    #[test]
    fn resolves_domain_objects() {
        let c = Config::default();
        let strategy = c.mix_strategy().unwrap();
        assert_eq!(strategy.kind, MixKind::Softmax);
        let schedule = c.schedule().unwrap();
        assert_eq!(schedule.tf_probability(0), 1.0);
        let tc = c.transformer_config(20);
        assert!(tc.validate().is_ok());
        assert!(matches!(
            c.train_mode().unwrap(),
            TrainMode::Scheduled { .. }
        ));
    }
}
