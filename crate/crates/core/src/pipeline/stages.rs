use std::collections::BTreeMap;

use crate::checkpoint::{encode_adapters, encode_model};
use crate::error::{invalid, Result};
use crate::lora::AdapterSet;
use crate::model::{
    pseudo_label, quantise_model, train_adapters, train_full, LayerWeight, ModelLayer, ToyModel, TrainMode,
    TrainOutcome,
};
use crate::nfquant::{NormalFloatCodebook, QuantStats};
use crate::pipeline::report::{EvalReport, SpeakerRow, SweepPoint, SweepReport, SystemRow};
use crate::pipeline::{LabelSource, PipelineConfig};
use crate::speakersim::{generate_population, AdaptationDataset, Population, Split, Utterance};
use crate::tensor::Rng;

pub const FP32_BASELINE: &str = "FP32 baseline";
pub const NF4_BASELINE: &str = "NF4 baseline";
pub const POOLED_LORA: &str = "NF4 + pooled LoRA";
pub const FFT_FP32: &str = "FFT-FP32";
pub const FFT_NF4: &str = "FFT-NF4";
pub const LORA_SCRATCH: &str = "LoRA-scratch";
pub const LORA_PRETRAIN: &str = "LoRA-pretrain";

pub const NO_ADAPTATION: &str = "no adaptation";
pub const GROUND_TRUTH: &str = "ground truth";
pub const STRONG_TEACHER: &str = "strong teacher";
pub const SELF_LABELS: &str = "self";

// Stream tags that keep the seeds of different stages apart.
const BASE: u64 = 1;
const TEACHER: u64 = 2;
const PRETRAIN: u64 = 3;
const ADAPT: u64 = 4;
const ADAPTER_INIT: u64 = 5;

fn stage_seed(seed: u64, stage: u64, index: u64) -> u64 {
    Rng::with_stream(seed, (stage << 32) | index).next_u64()
}

/// All data of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub base: Vec<AdaptationDataset>,
    pub pool: Vec<AdaptationDataset>,
    pub target: Vec<AdaptationDataset>,
}

pub fn generate_corpus(cfg: &PipelineConfig) -> Result<Corpus> {
    cfg.validate()?;
    let d = &cfg.data;
    let gen = |pop, n, utts| -> Result<Vec<AdaptationDataset>> {
        Ok(generate_population(&d.task, pop, n, utts, cfg.seed)?
            .into_iter()
            .map(|s| s.data)
            .collect())
    };
    Ok(Corpus {
        base: gen(Population::Base, d.base_speakers, d.base_utts)?,
        pool: gen(Population::Pool, d.pool_speakers, d.pool_utts)?,
        target: gen(Population::Target, d.target_speakers, d.target_utts)?,
    })
}

fn merge(sets: &[AdaptationDataset], split: Split) -> Vec<Utterance> {
    sets.iter().flat_map(|s| s.get(split).iter().cloned()).collect()
}

pub fn codebook(cfg: &PipelineConfig) -> Result<NormalFloatCodebook> {
    NormalFloatCodebook::new(cfg.quant.bits)
}

/// Full-precision base model trained on the base population.
pub fn train_base(cfg: &PipelineConfig, corpus: &Corpus) -> Result<(ToyModel, TrainOutcome)> {
    let task = &cfg.data.task;
    let mut model = ToyModel::new(task.vocab, task.classes, cfg.model.d_model, cfg.seed)?;
    let tc = cfg.budget.base.train_config(TrainMode::FullFinetune, stage_seed(cfg.seed, BASE, 0));
    let out = train_full(&mut model, &merge(&corpus.base, Split::Train), &merge(&corpus.base, Split::Dev), &tc)?;
    Ok((model, out))
}

/// Teacher: the base model fully fine-tuned on the pool, kept in FP32.
pub fn train_teacher(cfg: &PipelineConfig, base: &ToyModel, pool: &[AdaptationDataset]) -> Result<(ToyModel, TrainOutcome)> {
    let mut teacher = base.clone();
    let tc = cfg.budget.teacher.train_config(TrainMode::FullFinetune, stage_seed(cfg.seed, TEACHER, 0));
    let out = train_full(&mut teacher, &merge(pool, Split::Train), &merge(pool, Split::Dev), &tc)?;
    Ok((teacher, out))
}

pub fn quantise_base(cfg: &PipelineConfig, model: &ToyModel) -> Result<(ToyModel, QuantStats)> {
    quantise_model(model, cfg.quant.selection()?, cfg.quant.block_size, &codebook(cfg)?)
}

fn fresh_adapters(cfg: &PipelineConfig, model: &ToyModel, speaker: &str, index: u64) -> Result<AdapterSet> {
    let mut rng = Rng::with_stream(cfg.seed, (ADAPTER_INIT << 32) | index);
    model.init_adapters(speaker, &cfg.lora.attach, cfg.lora.rank, cfg.lora.alpha, &mut rng)
}

/// One adapter set shared by every pool speaker; the base stays frozen.
pub fn pretrain_adapters(cfg: &PipelineConfig, q: &ToyModel, pool: &[AdaptationDataset]) -> Result<(AdapterSet, TrainOutcome)> {
    if pool.len() < 2 {
        return Err(invalid!("adapter pretraining needs a pool of at least 2 speakers, got {}", pool.len()));
    }
    let mut set = fresh_adapters(cfg, q, "pool", u32::MAX as u64)?;
    let tc = cfg.budget.pretrain.train_config(TrainMode::LoraOnly, stage_seed(cfg.seed, PRETRAIN, 0));
    let out = train_adapters(q, &mut set, &merge(pool, Split::Train), &merge(pool, Split::Dev), &tc)?;
    Ok((set, out))
}

/// Predictions for a set of utterances.
fn predict(model: &ToyModel, adapters: Option<&AdapterSet>, utts: &[Utterance]) -> Result<Vec<u32>> {
    pseudo_label(model, adapters, utts)
}

fn wrong(model: &ToyModel, adapters: Option<&AdapterSet>, utts: &[Utterance]) -> Result<usize> {
    let preds = predict(model, adapters, utts)?;
    Ok(preds.iter().zip(utts).filter(|(p, u)| **p != u.label).count())
}

/// Replaces train and dev labels by a labeller's predictions; test keeps the
/// truth for scoring.
fn relabel(data: &AdaptationDataset, labeller: &ToyModel, adapters: Option<&AdapterSet>) -> Result<AdaptationDataset> {
    let train = predict(labeller, adapters, data.train())?;
    let dev = predict(labeller, adapters, data.dev())?;
    data.with_labels(Split::Train, &train)?.with_labels(Split::Dev, &dev)
}

/// Error counts per system, pooled over speakers.
#[derive(Default)]
struct Tally {
    order: Vec<String>,
    totals: BTreeMap<String, (usize, usize)>,
    speakers: Vec<SpeakerRow>,
}

impl Tally {
    fn start_speaker(&mut self, speaker: &str, n: usize) {
        self.speakers.push(SpeakerRow {
            speaker: speaker.to_string(),
            test_utterances: n,
            errors: BTreeMap::new(),
        });
    }

    fn add(&mut self, system: &str, wrong: usize) {
        let row = self.speakers.last_mut().expect("speaker started");
        let n = row.test_utterances;
        row.errors.insert(system.to_string(), 100.0 * wrong as f64 / n as f64);
        if !self.totals.contains_key(system) {
            self.order.push(system.to_string());
        }
        let t = self.totals.entry(system.to_string()).or_default();
        t.0 += wrong;
        t.1 += n;
    }

    fn error(&self, system: &str) -> f64 {
        let (w, n) = self.totals[system];
        100.0 * w as f64 / n as f64
    }
}

/// Size of what one speaker's deployment needs.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    bytes: u64,
    adapted_params: usize,
}

/// Artifacts of the per-speaker adaptation stage.
#[derive(Debug, Clone)]
pub struct AdaptOutput {
    pub report: EvalReport,
    pub scratch: Vec<AdapterSet>,
    pub pretrain: Vec<AdapterSet>,
    /// Full fine-tuned FP32 model per speaker, empty when disabled.
    pub fft: Vec<ToyModel>,
}

fn check_target(target: &[AdaptationDataset]) -> Result<()> {
    if target.is_empty() {
        return Err(invalid!("no target speakers"));
    }
    if let Some(s) = target.iter().find(|s| s.train().is_empty() || s.test().is_empty()) {
        return Err(invalid!("speaker {} has an empty train or test split", s.speaker_id));
    }
    Ok(())
}

/// Labels the adaptation systems train on, per `cfg.adapt.labels`.
fn adaptation_data(
    cfg: &PipelineConfig,
    q: &ToyModel,
    pretrained: &AdapterSet,
    teacher: Option<&ToyModel>,
    data: &AdaptationDataset,
) -> Result<AdaptationDataset> {
    match cfg.adapt.labels {
        LabelSource::GroundTruth => Ok(data.clone()),
        LabelSource::TeacherCheckpoint => {
            let teacher = teacher.ok_or_else(|| invalid!("label source teacher_checkpoint needs a teacher"))?;
            relabel(data, teacher, None)
        }
        LabelSource::SelfLabel => relabel(data, q, Some(pretrained)),
    }
}

/// Per-speaker adaptation and every system of the adaptation table.
pub fn adapt_speakers(
    cfg: &PipelineConfig,
    fp32: &ToyModel,
    q: &ToyModel,
    pretrained: &AdapterSet,
    teacher: Option<&ToyModel>,
    target: &[AdaptationDataset],
) -> Result<AdaptOutput> {
    check_target(target)?;
    q.check_adapters(pretrained)?;
    let fp32_bytes = encode_model(fp32).len() as u64;
    let q_bytes = encode_model(q).len() as u64;
    let selection = cfg.quant.selection()?;
    let cb = codebook(cfg)?;

    let mut tally = Tally::default();
    let mut out = AdaptOutput {
        report: EvalReport {
            title: "Speaker adaptation".into(),
            seed: cfg.seed,
            rows: Vec::new(),
            per_speaker: Vec::new(),
            config: cfg.clone(),
        },
        scratch: Vec::new(),
        pretrain: Vec::new(),
        fft: Vec::new(),
    };
    let mut footprints: BTreeMap<&str, Footprint> = BTreeMap::new();
    footprints.insert(FP32_BASELINE, Footprint { bytes: fp32_bytes, adapted_params: 0 });
    footprints.insert(NF4_BASELINE, Footprint { bytes: q_bytes, adapted_params: 0 });
    let adapter_fp = |set: &AdapterSet| Footprint {
        bytes: q_bytes + encode_adapters(set).len() as u64,
        adapted_params: set.num_params(),
    };
    footprints.insert(POOLED_LORA, adapter_fp(pretrained));

    for (i, spk) in target.iter().enumerate() {
        let id = &spk.speaker_id;
        let test = spk.test();
        let data = adaptation_data(cfg, q, pretrained, teacher, spk)?;
        let seed = stage_seed(cfg.seed, ADAPT, i as u64);
        tally.start_speaker(id, test.len());
        tally.add(FP32_BASELINE, wrong(fp32, None, test)?);
        tally.add(NF4_BASELINE, wrong(q, None, test)?);
        tally.add(POOLED_LORA, wrong(q, Some(pretrained), test)?);

        if cfg.adapt.full_finetune {
            let mut m = fp32.clone();
            let tc = cfg.budget.adapt.train_config(TrainMode::FullFinetune, seed);
            train_full(&mut m, data.train(), data.dev(), &tc)?;
            let (mq, _) = quantise_model(&m, selection, cfg.quant.block_size, &cb)?;
            tally.add(FFT_FP32, wrong(&m, None, test)?);
            tally.add(FFT_NF4, wrong(&mq, None, test)?);
            footprints.insert(FFT_FP32, Footprint { bytes: fp32_bytes, adapted_params: m.num_params() });
            footprints.insert(FFT_NF4, Footprint { bytes: encode_model(&mq).len() as u64, adapted_params: m.num_params() });
            out.fft.push(m);
        }

        let tc = cfg.budget.adapt.train_config(TrainMode::LoraOnly, seed);
        let mut scratch = fresh_adapters(cfg, q, id, i as u64)?;
        train_adapters(q, &mut scratch, data.train(), data.dev(), &tc)?;
        tally.add(LORA_SCRATCH, wrong(q, Some(&scratch), test)?);
        footprints.insert(LORA_SCRATCH, adapter_fp(&scratch));

        let mut warm = pretrained.for_speaker(id.as_str());
        train_adapters(q, &mut warm, data.train(), data.dev(), &tc)?;
        tally.add(LORA_PRETRAIN, wrong(q, Some(&warm), test)?);
        footprints.insert(LORA_PRETRAIN, adapter_fp(&warm));

        out.scratch.push(scratch);
        out.pretrain.push(warm);
    }

    out.report.rows = tally
        .order
        .iter()
        .map(|system| {
            let fp = footprints[system.as_str()];
            SystemRow {
                system: system.clone(),
                error_rate: tally.error(system),
                model_bytes: fp.bytes,
                ratio: fp32_bytes as f64 / fp.bytes as f64,
                adapted_params: fp.adapted_params,
            }
        })
        .collect();
    out.report.per_speaker = tally.speakers;
    Ok(out)
}

/// Adaptation from the pretrained adapters on different label sources.
/// `sources` picks the rows; the no-adaptation row is always present.
/// Ground-truth labels of train and dev are never seen by the pseudo-label
/// rows.
pub fn adapt_semisup(
    cfg: &PipelineConfig,
    q: &ToyModel,
    pretrained: &AdapterSet,
    teacher: Option<&ToyModel>,
    target: &[AdaptationDataset],
    sources: &[LabelSource],
) -> Result<EvalReport> {
    check_target(target)?;
    q.check_adapters(pretrained)?;
    if sources.contains(&LabelSource::TeacherCheckpoint) && teacher.is_none() {
        return Err(invalid!("a teacher row needs a teacher model"));
    }
    if let Some(t) = teacher {
        if t.vocab() != q.vocab() || t.classes() != q.classes() {
            return Err(invalid!(
                "teacher has vocab {} / {} classes, model has {} / {}",
                t.vocab(),
                t.classes(),
                q.vocab(),
                q.classes()
            ));
        }
    }
    let q_bytes = encode_model(q).len() as u64;
    let mut tally = Tally::default();
    let mut last_set = pretrained.clone();
    for (i, spk) in target.iter().enumerate() {
        let test = spk.test();
        let seed = stage_seed(cfg.seed, ADAPT, i as u64);
        let tc = cfg.budget.adapt.train_config(TrainMode::LoraOnly, seed);
        tally.start_speaker(&spk.speaker_id, test.len());
        tally.add(NO_ADAPTATION, wrong(q, Some(pretrained), test)?);
        for &source in sources {
            let (name, data) = match source {
                LabelSource::GroundTruth => (GROUND_TRUTH, spk.clone()),
                LabelSource::TeacherCheckpoint => (STRONG_TEACHER, relabel(spk, teacher.expect("checked"), None)?),
                LabelSource::SelfLabel => (SELF_LABELS, relabel(spk, q, Some(pretrained))?),
            };
            let mut set = pretrained.for_speaker(spk.speaker_id.as_str());
            train_adapters(q, &mut set, data.train(), data.dev(), &tc)?;
            tally.add(name, wrong(q, Some(&set), test)?);
            last_set = set;
        }
    }
    let bytes = q_bytes + encode_adapters(&last_set).len() as u64;
    let fp32_bytes = fp32_bytes_of(q)?;
    let rows = tally
        .order
        .iter()
        .map(|system| SystemRow {
            system: system.clone(),
            error_rate: tally.error(system),
            model_bytes: bytes,
            ratio: fp32_bytes as f64 / bytes as f64,
            adapted_params: if system == NO_ADAPTATION { 0 } else { pretrained.num_params() },
        })
        .collect();
    Ok(EvalReport {
        title: "Label sources".into(),
        seed: cfg.seed,
        rows,
        per_speaker: tally.speakers,
        config: cfg.clone(),
    })
}

/// Size of the full-precision checkpoint with the same architecture.
fn fp32_bytes_of(model: &ToyModel) -> Result<u64> {
    let layers = model
        .layers()
        .iter()
        .map(|l| ModelLayer {
            kind: l.kind,
            weight: LayerWeight::Dense(l.weight.dense().clone()),
            bias: l.bias.clone(),
        })
        .collect();
    let dense = ToyModel::from_layers(model.vocab(), model.classes(), model.d_model(), layers)?;
    Ok(encode_model(&dense).len() as u64)
}

/// Mean test error after adapting the pretrained adapters on the first
/// `count` training utterances of every speaker; dev and test stay fixed.
/// Count 0 is the pretrained adapters as they are.
pub fn sweep_utts(
    cfg: &PipelineConfig,
    q: &ToyModel,
    pretrained: &AdapterSet,
    target: &[AdaptationDataset],
    counts: &[usize],
) -> Result<SweepReport> {
    check_target(target)?;
    q.check_adapters(pretrained)?;
    if !counts.contains(&0) {
        return Err(invalid!("sweep counts must include 0"));
    }
    let total: usize = target.iter().map(|s| s.test().len()).sum();
    let mut base_wrong = 0;
    for spk in target {
        base_wrong += wrong(q, Some(pretrained), spk.test())?;
    }
    let no_adaptation = 100.0 * base_wrong as f64 / total as f64;
    let mut points = Vec::with_capacity(counts.len());
    for &count in counts {
        if count == 0 {
            points.push(SweepPoint { count, error_rate: no_adaptation });
            continue;
        }
        let mut w = 0;
        for (i, spk) in target.iter().enumerate() {
            let data = spk.subsample_train(count)?;
            let tc = cfg.budget.adapt.train_config(TrainMode::LoraOnly, stage_seed(cfg.seed, ADAPT, i as u64));
            let mut set = pretrained.for_speaker(spk.speaker_id.as_str());
            train_adapters(q, &mut set, data.train(), data.dev(), &tc)?;
            w += wrong(q, Some(&set), spk.test())?;
        }
        points.push(SweepPoint {
            count,
            error_rate: 100.0 * w as f64 / total as f64,
        });
    }
    Ok(SweepReport {
        seed: cfg.seed,
        no_adaptation,
        points,
        config: cfg.clone(),
    })
}
