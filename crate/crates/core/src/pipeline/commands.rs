//! File-based stage commands. Every command reads its inputs from and writes
//! its outputs to a run directory, and writes the resolved config beside
//! them.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_adapters, load_model, save_adapters, save_model};
use crate::error::{invalid, PqmError, Result};
use crate::lora::AdapterSet;
use crate::model::{evaluate, LossRecord, ToyModel};
use crate::nfquant::QuantStats;
use crate::pipeline::report::{EvalReport, SweepReport};
use crate::pipeline::stages::{self, Corpus};
use crate::pipeline::{LabelSource, PipelineConfig};
use crate::speakersim::{read_datasets, write_datasets, AdaptationDataset, Split};

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.jsonl"))
    }

    pub fn base_model(&self) -> PathBuf {
        self.root.join("models/base.pqm")
    }

    pub fn teacher_model(&self) -> PathBuf {
        self.root.join("models/teacher.pqm")
    }

    pub fn quantised_model(&self) -> PathBuf {
        self.root.join("models/quantised.pqm")
    }

    pub fn pretrained_adapters(&self) -> PathBuf {
        self.root.join("adapters/pretrained.pqma")
    }

    pub fn speaker_adapters(&self, system: &str, speaker: &str) -> PathBuf {
        self.root.join("adapters").join(system).join(format!("{speaker}.pqma"))
    }

    pub fn fft_model(&self, speaker: &str) -> PathBuf {
        self.root.join("models/fft").join(format!("{speaker}.pqm"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write_config(&self, cfg: &PipelineConfig) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        cfg.save(&self.config())
    }
}

fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths
        .iter()
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(PqmError::MissingArtifacts(missing))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_file(path, text.as_bytes())
}

fn save_model_at(path: &Path, model: &ToyModel) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_model(path, model)
}

fn save_adapters_at(path: &Path, set: &AdapterSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_adapters(path, set)
}

fn write_data(path: &Path, sets: &[AdaptationDataset]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_datasets(&mut w, &sets.iter().collect::<Vec<_>>())?;
    w.flush()?;
    Ok(())
}

pub fn load_data(path: &Path) -> Result<Vec<AdaptationDataset>> {
    require(&[path.to_path_buf()])?;
    read_datasets(BufReader::new(File::open(path)?))
}

/// Loss curve of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub selected_step: usize,
    pub final_dev_loss: Option<f64>,
    pub curve: Vec<LossRecord>,
}

impl StageLog {
    fn new(stage: &str, out: &crate::model::TrainOutcome) -> Self {
        Self {
            stage: stage.into(),
            selected_step: out.selected_step,
            final_dev_loss: out.final_dev_loss,
            curve: out.records(),
        }
    }
}

/// Quantisation summary written by [`cmd_quantise`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantiseSummary {
    pub select: String,
    pub bits: u8,
    pub block_size: usize,
    pub stats: QuantStats,
}

impl QuantiseSummary {
    /// One row with the table columns.
    pub fn render(&self) -> String {
        format!(
            "select {}  k={} block={}  FP32 {} B  quantised {} B  ratio {:.2}\n",
            self.select, self.bits, self.block_size, self.stats.raw_bytes, self.stats.quantised_bytes, self.stats.ratio
        )
    }
}

/// Generates the data and trains the full-precision base model.
pub fn cmd_train_base(cfg: &PipelineConfig, dir: &RunDir) -> Result<()> {
    cfg.validate()?;
    dir.write_config(cfg)?;
    let corpus = stages::generate_corpus(cfg)?;
    write_data(&dir.data("base"), &corpus.base)?;
    write_data(&dir.data("pool"), &corpus.pool)?;
    write_data(&dir.data("target"), &corpus.target)?;
    let (model, out) = stages::train_base(cfg, &corpus)?;
    save_model_at(&dir.base_model(), &model)?;
    write_json(&dir.file("logs/base.json"), &StageLog::new("base", &out))
}

/// Fine-tunes the base model on the pool into the teacher.
pub fn cmd_train_teacher(cfg: &PipelineConfig, dir: &RunDir) -> Result<()> {
    cfg.validate()?;
    require(&[dir.base_model(), dir.data("pool")])?;
    dir.write_config(cfg)?;
    let base = load_model(&dir.base_model())?;
    let pool = load_data(&dir.data("pool"))?;
    let (teacher, out) = stages::train_teacher(cfg, &base, &pool)?;
    save_model_at(&dir.teacher_model(), &teacher)?;
    write_json(&dir.file("logs/teacher.json"), &StageLog::new("teacher", &out))
}

/// Quantises `input` into `output` and writes the size summary to the run
/// directory.
pub fn cmd_quantise(cfg: &PipelineConfig, dir: &RunDir, input: &Path, output: &Path) -> Result<QuantiseSummary> {
    cfg.validate()?;
    require(&[input.to_path_buf()])?;
    dir.write_config(cfg)?;
    let model = load_model(input)?;
    let (q, stats) = stages::quantise_base(cfg, &model)?;
    save_model_at(output, &q)?;
    let summary = QuantiseSummary {
        select: cfg.quant.selection()?.to_string(),
        bits: cfg.quant.bits,
        block_size: cfg.quant.block_size,
        stats,
    };
    write_json(&dir.file("quantise.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_pretrain_lora(cfg: &PipelineConfig, dir: &RunDir) -> Result<AdapterSet> {
    cfg.validate()?;
    require(&[dir.quantised_model(), dir.data("pool")])?;
    dir.write_config(cfg)?;
    let q = load_model(&dir.quantised_model())?;
    let pool = load_data(&dir.data("pool"))?;
    let (set, out) = stages::pretrain_adapters(cfg, &q, &pool)?;
    save_adapters_at(&dir.pretrained_adapters(), &set)?;
    write_json(&dir.file("logs/pretrain.json"), &StageLog::new("pretrain", &out))?;
    Ok(set)
}

fn load_teacher(dir: &RunDir, path: Option<&Path>) -> Result<ToyModel> {
    let path = path.map_or_else(|| dir.teacher_model(), Path::to_path_buf);
    require(std::slice::from_ref(&path))?;
    load_model(&path)
}

/// Per-speaker adapters and the adaptation table.
pub fn cmd_adapt(cfg: &PipelineConfig, dir: &RunDir) -> Result<EvalReport> {
    cfg.validate()?;
    require(&[dir.base_model(), dir.quantised_model(), dir.pretrained_adapters(), dir.data("target")])?;
    dir.write_config(cfg)?;
    let fp32 = load_model(&dir.base_model())?;
    let q = load_model(&dir.quantised_model())?;
    let pretrained = load_adapters(&dir.pretrained_adapters())?;
    let target = load_data(&dir.data("target"))?;
    let teacher = match cfg.adapt.labels {
        LabelSource::TeacherCheckpoint => Some(load_teacher(dir, None)?),
        _ => None,
    };
    let out = stages::adapt_speakers(cfg, &fp32, &q, &pretrained, teacher.as_ref(), &target)?;
    for (spk, (scratch, warm)) in target.iter().zip(out.scratch.iter().zip(&out.pretrain)) {
        save_adapters_at(&dir.speaker_adapters("scratch", &spk.speaker_id), scratch)?;
        save_adapters_at(&dir.speaker_adapters("pretrain", &spk.speaker_id), warm)?;
    }
    for (spk, m) in target.iter().zip(&out.fft) {
        save_model_at(&dir.fft_model(&spk.speaker_id), m)?;
    }
    write_file(&dir.file("report.json"), out.report.to_json().as_bytes())?;
    Ok(out.report)
}

/// Adaptation on ground-truth, teacher and self labels. `teacher` overrides
/// the run directory's teacher checkpoint.
pub fn cmd_adapt_semisup(cfg: &PipelineConfig, dir: &RunDir, teacher: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    require(&[dir.quantised_model(), dir.pretrained_adapters(), dir.data("target")])?;
    let teacher = load_teacher(dir, teacher)?;
    dir.write_config(cfg)?;
    let q = load_model(&dir.quantised_model())?;
    let pretrained = load_adapters(&dir.pretrained_adapters())?;
    let target = load_data(&dir.data("target"))?;
    let sources = [LabelSource::GroundTruth, LabelSource::TeacherCheckpoint, LabelSource::SelfLabel];
    let report = stages::adapt_semisup(cfg, &q, &pretrained, Some(&teacher), &target, &sources)?;
    write_file(&dir.file("semisup.json"), report.to_json().as_bytes())?;
    Ok(report)
}

pub fn cmd_sweep_utts(cfg: &PipelineConfig, dir: &RunDir, counts: &[usize]) -> Result<SweepReport> {
    cfg.validate()?;
    require(&[dir.quantised_model(), dir.pretrained_adapters(), dir.data("target")])?;
    dir.write_config(cfg)?;
    let q = load_model(&dir.quantised_model())?;
    let pretrained = load_adapters(&dir.pretrained_adapters())?;
    let target = load_data(&dir.data("target"))?;
    let report = stages::sweep_utts(cfg, &q, &pretrained, &target, counts)?;
    write_file(&dir.file("sweep.json"), report.to_json().as_bytes())?;
    Ok(report)
}

/// Error rate of a checkpoint, optionally with adapters, on one split of a
/// data file (all speakers pooled).
pub fn cmd_eval(model: &Path, adapters: Option<&Path>, data: &Path, split: Split) -> Result<f64> {
    let mut inputs = vec![model.to_path_buf(), data.to_path_buf()];
    inputs.extend(adapters.map(Path::to_path_buf));
    require(&inputs)?;
    let model = load_model(model)?;
    let adapters = adapters.map(load_adapters).transpose()?;
    let utts: Vec<_> = load_data(data)?
        .iter()
        .flat_map(|s| s.get(split).to_vec())
        .collect();
    if utts.is_empty() {
        return Err(invalid!("no {split:?} utterances in {}", data.display()));
    }
    evaluate(&model, adapters.as_ref(), &utts)
}

/// Renders every report found in the run directory and writes `report.txt`.
pub fn cmd_report(dir: &RunDir) -> Result<String> {
    require(&[dir.config(), dir.file("report.json")])?;
    PipelineConfig::load(&dir.config())?;
    let mut text = String::new();
    if dir.file("quantise.json").is_file() {
        let q: QuantiseSummary = serde_json::from_str(&fs::read_to_string(dir.file("quantise.json"))?)?;
        text.push_str("Quantisation\n");
        text.push_str(&q.render());
        text.push('\n');
    }
    let main = EvalReport::from_json(&fs::read_to_string(dir.file("report.json"))?)?;
    text.push_str(&main.render());
    if dir.file("semisup.json").is_file() {
        let semi = EvalReport::from_json(&fs::read_to_string(dir.file("semisup.json"))?)?;
        text.push('\n');
        text.push_str(&semi.render());
    }
    if dir.file("sweep.json").is_file() {
        let sweep = SweepReport::from_json(&fs::read_to_string(dir.file("sweep.json"))?)?;
        text.push('\n');
        text.push_str(&sweep.render());
    }
    write_file(&dir.file("report.txt"), text.as_bytes())?;
    Ok(text)
}

/// Every stage in order.
pub fn cmd_run(cfg: &PipelineConfig, dir: &RunDir) -> Result<String> {
    cmd_train_base(cfg, dir)?;
    cmd_train_teacher(cfg, dir)?;
    cmd_quantise(cfg, dir, &dir.base_model(), &dir.quantised_model())?;
    cmd_pretrain_lora(cfg, dir)?;
    cmd_adapt(cfg, dir)?;
    cmd_adapt_semisup(cfg, dir, None)?;
    cmd_sweep_utts(cfg, dir, &cfg.sweep.counts)?;
    cmd_report(dir)
}

/// In-memory corpus of a run directory.
pub fn load_corpus(dir: &RunDir) -> Result<Corpus> {
    require(&[dir.data("base"), dir.data("pool"), dir.data("target")])?;
    Ok(Corpus {
        base: load_data(&dir.data("base"))?,
        pool: load_data(&dir.data("pool"))?,
        target: load_data(&dir.data("target"))?,
    })
}
