use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PqmError, Result};
use crate::model::{LayerSelection, OptimiserConfig, Selection, TrainConfig, TrainMode, ATTACHABLE};
use crate::nfquant::{MAX_BITS, MIN_BITS};
use crate::speakersim::TaskConfig;

/// Where adaptation labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    /// Argmax of the teacher checkpoint written by the teacher stage.
    TeacherCheckpoint,
    /// Argmax of the quantised model with the pretrained adapters.
    #[serde(rename = "self")]
    SelfLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { d_model: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u8,
    pub block_size: usize,
    /// Comma list of `linear`, `conv`, `embed`, or `all` / `none`.
    pub select: String,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            block_size: 64,
            select: "all".into(),
        }
    }
}

impl QuantConfig {
    pub fn selection(&self) -> Result<LayerSelection> {
        self.select.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
    pub attach: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            attach: vec!["block0".into(), "block1".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub base_speakers: usize,
    pub base_utts: usize,
    pub pool_speakers: usize,
    pub pool_utts: usize,
    pub target_speakers: usize,
    pub target_utts: usize,
    pub task: TaskConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            base_speakers: 40,
            base_utts: 100,
            pool_speakers: 50,
            pool_utts: 50,
            target_speakers: 8,
            target_utts: 150,
            task: TaskConfig::default(),
        }
    }
}

/// Training budget of one stage. The seed is derived from the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimiser: OptimiserConfig,
    pub eval_every: usize,
    pub keep_best: bool,
    pub select_by: Selection,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 300,
            batch_size: 16,
            optimiser: OptimiserConfig::default(),
            eval_every: 25,
            keep_best: true,
            select_by: Selection::DevError,
        }
    }
}

impl Budget {
    fn new(steps: usize, batch_size: usize, eval_every: usize, keep_best: bool) -> Self {
        Self {
            steps,
            batch_size,
            eval_every,
            keep_best,
            ..Self::default()
        }
    }

    pub fn train_config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            steps: self.steps,
            batch_size: self.batch_size,
            optimiser: self.optimiser,
            seed,
            mode,
            eval_every: self.eval_every,
            keep_best: self.keep_best,
            select_by: self.select_by,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    /// Full-precision base model on the base population.
    pub base: Budget,
    /// Teacher: the base model fully fine-tuned on the pool.
    pub teacher: Budget,
    /// Shared adapters on the pool.
    pub pretrain: Budget,
    /// Per-speaker adaptation; full fine-tuning baselines use the same budget.
    pub adapt: Budget,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            base: Budget::new(800, 32, 200, false),
            teacher: Budget::new(1000, 32, 250, false),
            pretrain: Budget::new(2000, 32, 250, false),
            adapt: Budget::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Labels the per-speaker adapters are trained on.
    pub labels: LabelSource,
    /// Also run the full fine-tuning systems.
    pub full_finetune: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            labels: LabelSource::GroundTruth,
            full_finetune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub counts: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            counts: vec![0, 5, 10, 20, 40, 60],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub quant: QuantConfig,
    pub lora: LoraConfig,
    pub data: DataConfig,
    pub budget: Budgets,
    pub adapt: AdaptConfig,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            quant: QuantConfig::default(),
            lora: LoraConfig::default(),
            data: DataConfig::default(),
            budget: Budgets::default(),
            adapt: AdaptConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> PqmError {
    PqmError::Config(msg.into())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.d_model < 8 {
            return Err(config_err(format!("d_model must be at least 8, got {}", self.model.d_model)));
        }
        if !(MIN_BITS..=MAX_BITS).contains(&self.quant.bits) {
            return Err(config_err(format!("bits must be in {MIN_BITS}..={MAX_BITS}")));
        }
        if self.quant.block_size == 0 {
            return Err(config_err("block_size must be positive"));
        }
        self.quant.selection().map_err(|e| config_err(e.to_string()))?;
        let d = self.model.d_model;
        let smallest = if self.lora.attach.iter().any(|a| a == "head") {
            d.min(self.data.task.classes)
        } else {
            d
        };
        if self.lora.rank == 0 || 2 * self.lora.rank > smallest {
            return Err(config_err(format!(
                "rank {} must be positive and at most half the smallest attached dimension {smallest}",
                self.lora.rank
            )));
        }
        if !(self.lora.alpha > 0.0 && self.lora.alpha.is_finite()) {
            return Err(config_err("alpha must be positive"));
        }
        if self.lora.attach.is_empty() {
            return Err(config_err("no adapter attach points"));
        }
        for id in &self.lora.attach {
            if !ATTACHABLE.contains(&id.as_str()) {
                return Err(config_err(format!("cannot attach adapters to '{id}'; choose from {ATTACHABLE:?}")));
            }
        }
        let data = &self.data;
        data.task.validate().map_err(|e| config_err(e.to_string()))?;
        if data.base_speakers == 0 || data.base_utts < 5 {
            return Err(config_err("base population needs speakers with at least 5 utterances"));
        }
        if data.pool_speakers < 2 || data.pool_utts < 5 {
            return Err(config_err("pool needs at least 2 speakers with at least 5 utterances"));
        }
        if data.target_speakers == 0 || data.target_utts < 5 {
            return Err(config_err("need target speakers with at least 5 utterances"));
        }
        for (name, b) in [
            ("base", &self.budget.base),
            ("teacher", &self.budget.teacher),
            ("pretrain", &self.budget.pretrain),
            ("adapt", &self.budget.adapt),
        ] {
            b.train_config(TrainMode::LoraOnly, 0)
                .validate()
                .map_err(|e| config_err(format!("budget.{name}: {e}")))?;
        }
        let n_train = crate::speakersim::split_sizes(data.target_utts).0;
        if !self.sweep.counts.contains(&0) {
            return Err(config_err("sweep counts must include 0"));
        }
        if let Some(c) = self.sweep.counts.iter().find(|&&c| c > n_train) {
            return Err(config_err(format!("sweep count {c} exceeds the {n_train} training utterances per speaker")));
        }
        Ok(())
    }
}
