//! Synthetic multi-speaker classification task.
//!
//! A shared concept produces clean latent frame sequences whose label is the
//! class prototype nearest to the time-averaged frame. A speaker (optionally
//! preceded by a domain) transforms each frame as `gain ⊙ (mix · z) + bias`,
//! and the transformed frame is discretised to the nearest of `vocab` fixed
//! grid points. Labels never depend on the speaker.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{corrupt, invalid, Result};
use crate::tensor::Rng;

/// Task dimensions and generator knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub classes: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub latent_dim: usize,
    /// Seed of the shared concept (prototypes and token grid).
    pub concept_seed: u64,
    /// Spread of class prototypes around the origin.
    pub prototype_scale: f64,
    /// Per-frame noise around the class prototype.
    pub frame_noise: f64,
    pub speaker: ShiftConfig,
    /// Shared transform applied to every speaker of a shifted domain.
    pub domain: ShiftConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            seq_len: 20,
            vocab: 64,
            latent_dim: 16,
            concept_seed: 0,
            prototype_scale: 1.0,
            frame_noise: 1.0,
            speaker: ShiftConfig::default(),
            domain: ShiftConfig {
                gain_low: 0.6,
                gain_high: 1.4,
                bias_std: 0.6,
                mix_eps: 0.2,
            },
        }
    }
}

/// Distribution of one affine frame transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub gain_low: f64,
    pub gain_high: f64,
    pub bias_std: f64,
    /// Std of the skew-symmetric generator entries of the rotation.
    pub mix_eps: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            gain_low: 0.5,
            gain_high: 1.5,
            bias_std: 0.1,
            mix_eps: 0.1,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.seq_len == 0 || self.vocab < 2 || self.latent_dim == 0 {
            return Err(invalid!("degenerate task shape {self:?}"));
        }
        for s in [&self.speaker, &self.domain] {
            if !(s.gain_low > 0.0 && s.gain_low <= s.gain_high) || s.bias_std < 0.0 || s.mix_eps < 0.0 {
                return Err(invalid!("invalid shift distribution {s:?}"));
            }
        }
        Ok(())
    }
}

/// Prototypes and token grid shared by every speaker.
#[derive(Debug, Clone)]
pub struct Concept {
    dim: usize,
    prototypes: Vec<Vec<f64>>,
    grid: Vec<Vec<f64>>,
    prototype_scale: f64,
    frame_noise: f64,
    seq_len: usize,
}

impl Concept {
    pub fn new(task: &TaskConfig) -> Self {
        let mut rng = Rng::with_stream(task.concept_seed, 0xC0_4CE7);
        let dim = task.latent_dim;
        let mut draw = |n: usize, scale: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..dim).map(|_| scale * rng.normal()).collect())
                .collect()
        };
        let prototypes = draw(task.classes, 1.0);
        let grid = draw(task.vocab, 1.0);
        Self {
            dim,
            prototypes,
            grid,
            prototype_scale: task.prototype_scale,
            frame_noise: task.frame_noise,
            seq_len: task.seq_len,
        }
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn vocab(&self) -> usize {
        self.grid.len()
    }

    /// Label of a clean latent sequence: nearest scaled prototype to the
    /// frame mean, ties to the lower class.
    pub fn label(&self, frames: &[Vec<f64>]) -> u32 {
        let mut mean = vec![0.0; self.dim];
        for f in frames {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= frames.len() as f64);
        nearest(&mean, self.prototypes.iter().map(|p| p.iter().map(|v| v * self.prototype_scale)))
    }

    pub fn tokenise(&self, frame: &[f64]) -> u32 {
        nearest(frame, self.grid.iter().map(|g| g.iter().copied()))
    }

    fn sample_frames(&self, class: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        let proto = &self.prototypes[class];
        (0..self.seq_len)
            .map(|_| {
                proto
                    .iter()
                    .map(|p| p * self.prototype_scale + self.frame_noise * rng.normal())
                    .collect()
            })
            .collect()
    }
}

fn nearest<I, P>(x: &[f64], candidates: I) -> u32
where
    I: Iterator<Item = P>,
    P: Iterator<Item = f64>,
{
    let mut best = (f64::INFINITY, 0u32);
    for (i, c) in candidates.enumerate() {
        let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i as u32);
        }
    }
    best.1
}

/// Per-speaker frame transform `gain ⊙ (mix · z) + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: String,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    /// Row-major orthogonal matrix `exp(S)` for a random skew-symmetric `S`.
    pub mix: Vec<f64>,
    pub seed: u64,
}

impl SpeakerProfile {
    pub fn identity(id: impl Into<String>, dim: usize) -> Self {
        let mut mix = vec![0.0; dim * dim];
        for i in 0..dim {
            mix[i * dim + i] = 1.0;
        }
        Self {
            id: id.into(),
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
            mix,
            seed: 0,
        }
    }

    pub fn sample(id: impl Into<String>, dim: usize, shift: &ShiftConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let gain = (0..dim)
            .map(|_| rng.uniform_range(shift.gain_low, shift.gain_high))
            .collect();
        let bias = (0..dim).map(|_| shift.bias_std * rng.normal()).collect();
        let mut skew = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in (i + 1)..dim {
                let v = shift.mix_eps * rng.normal();
                skew[i * dim + j] = v;
                skew[j * dim + i] = -v;
            }
        }
        Self {
            id: id.into(),
            gain,
            bias,
            mix: expm(&skew, dim),
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.gain.len()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        (0..dim)
            .map(|i| {
                let row = &self.mix[i * dim..(i + 1) * dim];
                let mixed: f64 = row.iter().zip(z).map(|(m, v)| m * v).sum();
                self.gain[i] * mixed + self.bias[i]
            })
            .collect()
    }
}

/// Matrix exponential by scaling and squaring with a Taylor core.
fn expm(a: &[f64], n: usize) -> Vec<f64> {
    let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * n as f64;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as u32 } else { 0 };
    let scale = 0.5f64.powi(squarings as i32);
    let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();

    let mut result = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        result[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=20 {
        term = mat_mul_sq(&term, &scaled, n);
        term.iter_mut().for_each(|v| *v /= k as f64);
        for (r, t) in result.iter_mut().zip(&term) {
            *r += t;
        }
    }
    for _ in 0..squarings {
        result = mat_mul_sq(&result, &result, n);
    }
    result
}

fn mat_mul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<u32>,
    pub label: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One speaker's utterances, stored as `train ++ dev ++ test`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdaptationDataset {
    pub speaker_id: String,
    utterances: Vec<Utterance>,
    n_train: usize,
    n_dev: usize,
}

/// Split sizes for `n` utterances in the ratio 2:1:2, rounded half up.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (2 * n + 2) / 5;
    let dev = ((n + 2) / 5).min(n - train);
    (train, dev, n - train - dev)
}

fn split_key(speaker_id: &str, index: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(speaker_id.as_bytes());
    h.update([0u8]);
    h.update((index as u64).to_le_bytes());
    h.finalize().into()
}

impl AdaptationDataset {
    /// Assigns utterances to splits by ordering them on a hash of
    /// `(speaker id, utterance index)`; the train split keeps hash order,
    /// dev and test keep generation order.
    pub fn split(speaker_id: impl Into<String>, utterances: Vec<Utterance>) -> Self {
        let speaker_id = speaker_id.into();
        let n = utterances.len();
        let (n_train, n_dev, _) = split_sizes(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| split_key(&speaker_id, i));
        let mut dev_idx = order[n_train..n_train + n_dev].to_vec();
        let mut test_idx = order[n_train + n_dev..].to_vec();
        dev_idx.sort_unstable();
        test_idx.sort_unstable();
        let reordered = order[..n_train]
            .iter()
            .chain(&dev_idx)
            .chain(&test_idx)
            .map(|&i| utterances[i].clone())
            .collect();
        Self {
            speaker_id,
            utterances: reordered,
            n_train,
            n_dev,
        }
    }

    pub fn from_splits(
        speaker_id: impl Into<String>,
        train: Vec<Utterance>,
        dev: Vec<Utterance>,
        test: Vec<Utterance>,
    ) -> Self {
        let (n_train, n_dev) = (train.len(), dev.len());
        let mut utterances = train;
        utterances.extend(dev);
        utterances.extend(test);
        Self {
            speaker_id: speaker_id.into(),
            utterances,
            n_train,
            n_dev,
        }
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn train(&self) -> &[Utterance] {
        &self.utterances[..self.n_train]
    }

    pub fn dev(&self) -> &[Utterance] {
        &self.utterances[self.n_train..self.n_train + self.n_dev]
    }

    pub fn test(&self) -> &[Utterance] {
        &self.utterances[self.n_train + self.n_dev..]
    }

    pub fn get(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => self.train(),
            Split::Dev => self.dev(),
            Split::Test => self.test(),
        }
    }

    /// Keeps the first `count` training utterances; dev and test are untouched.
    pub fn subsample_train(&self, count: usize) -> Result<Self> {
        if count > self.n_train {
            return Err(invalid!(
                "requested {count} training utterances but speaker {} has {}",
                self.speaker_id,
                self.n_train
            ));
        }
        Ok(Self::from_splits(
            self.speaker_id.clone(),
            self.train()[..count].to_vec(),
            self.dev().to_vec(),
            self.test().to_vec(),
        ))
    }

    /// Same utterances with the labels of one split replaced.
    pub fn with_labels(&self, split: Split, labels: &[u32]) -> Result<Self> {
        let range = match split {
            Split::Train => 0..self.n_train,
            Split::Dev => self.n_train..self.n_train + self.n_dev,
            Split::Test => self.n_train + self.n_dev..self.utterances.len(),
        };
        if labels.len() != range.len() {
            return Err(invalid!("{} labels for {} {split:?} utterances", labels.len(), range.len()));
        }
        let mut out = self.clone();
        for (u, &l) in out.utterances[range].iter_mut().zip(labels) {
            u.label = l;
        }
        Ok(out)
    }
}

/// A speaker and its data.
#[derive(Debug, Clone)]
pub struct SpeakerData {
    pub profile: SpeakerProfile,
    pub data: AdaptationDataset,
}

/// Which population a speaker is drawn from; keeps seeds of different
/// populations disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    /// Speakers the base model is trained on.
    Base,
    /// Multi-speaker pool of the target domain used for adapter pretraining.
    Pool,
    /// Held-out target speakers.
    Target,
}

impl Population {
    fn tag(self) -> (&'static str, u64) {
        match self {
            Population::Base => ("base", 1),
            Population::Pool => ("pool", 2),
            Population::Target => ("spk", 3),
        }
    }
}

/// Domain transform shared by all target-domain speakers for `seed`.
pub fn target_domain(task: &TaskConfig, seed: u64) -> SpeakerProfile {
    SpeakerProfile::sample("domain", task.latent_dim, &task.domain, derive_seed(seed, 0, 0))
}

fn derive_seed(seed: u64, population: u64, index: u64) -> u64 {
    Rng::with_stream(seed, (population << 32) | index).next_u64()
}

/// Generates utterances for one speaker. Classes cycle so every class gets an
/// equal share before labelling.
pub fn generate_speaker(
    concept: &Concept,
    domain: Option<&SpeakerProfile>,
    profile: &SpeakerProfile,
    utts: usize,
) -> AdaptationDataset {
    let mut rng = Rng::with_stream(profile.seed, 0xDA7A);
    let utterances = (0..utts)
        .map(|i| {
            let frames = concept.sample_frames(i % concept.classes(), &mut rng);
            let label = concept.label(&frames);
            let tokens = frames
                .iter()
                .map(|z| {
                    let z = domain.map_or_else(|| z.clone(), |d| d.apply(z));
                    concept.tokenise(&profile.apply(&z))
                })
                .collect();
            Utterance { tokens, label }
        })
        .collect();
    AdaptationDataset::split(profile.id.clone(), utterances)
}

/// `n_speakers` speakers of one population. Base speakers see no domain
/// shift; pool and target speakers share the seed's target domain.
pub fn generate_population(
    task: &TaskConfig,
    population: Population,
    n_speakers: usize,
    utts: usize,
    seed: u64,
) -> Result<Vec<SpeakerData>> {
    task.validate()?;
    if n_speakers == 0 {
        return Err(invalid!("need at least one speaker"));
    }
    let concept = Concept::new(task);
    let domain = match population {
        Population::Base => None,
        Population::Pool | Population::Target => Some(target_domain(task, seed)),
    };
    let (prefix, pop) = population.tag();
    Ok((0..n_speakers)
        .map(|i| {
            let profile = SpeakerProfile::sample(
                format!("{prefix}{i:03}"),
                task.latent_dim,
                &task.speaker,
                derive_seed(seed, pop, i as u64),
            );
            let data = generate_speaker(&concept, domain.as_ref(), &profile, utts);
            SpeakerData { profile, data }
        })
        .collect())
}

/// Multi-speaker target-domain pool for adapter pretraining.
pub fn generate_pool(
    task: &TaskConfig,
    n_speakers: usize,
    utts_per_speaker: usize,
    seed: u64,
) -> Result<Vec<SpeakerData>> {
    generate_population(task, Population::Pool, n_speakers, utts_per_speaker, seed)
}

/// Held-out target speakers with 2:1:2 splits.
pub fn generate_adaptation_speakers(
    task: &TaskConfig,
    n: usize,
    utts: usize,
    seed: u64,
) -> Result<Vec<SpeakerData>> {
    if utts < 5 {
        return Err(invalid!("need at least 5 utterances per speaker, got {utts}"));
    }
    generate_population(task, Population::Target, n, utts, seed)
}

/// Concatenated split across speakers.
pub fn merged(speakers: &[SpeakerData], split: Split) -> Vec<Utterance> {
    speakers
        .iter()
        .flat_map(|s| s.data.get(split).iter().cloned())
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    speaker_id: String,
    split: Split,
    tokens: Vec<u32>,
    label: u32,
}

/// Writes one JSON record per utterance, speakers in order, each speaker's
/// utterances as train, dev, test.
pub fn write_datasets(w: &mut impl Write, sets: &[&AdaptationDataset]) -> Result<()> {
    for set in sets {
        for split in [Split::Train, Split::Dev, Split::Test] {
            for u in set.get(split) {
                let rec = Record {
                    speaker_id: set.speaker_id.clone(),
                    split,
                    tokens: u.tokens.clone(),
                    label: u.label,
                };
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

pub fn read_datasets(r: impl BufRead) -> Result<Vec<AdaptationDataset>> {
    let mut out: Vec<(String, [Vec<Utterance>; 3])> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| corrupt!("dataset line {}: {e}", lineno + 1))?;
        if out.last().is_none_or(|(id, _)| *id != rec.speaker_id) {
            if out.iter().any(|(id, _)| *id == rec.speaker_id) {
                return Err(corrupt!("speaker {} is not contiguous", rec.speaker_id));
            }
            out.push((rec.speaker_id.clone(), Default::default()));
        }
        let slot = match rec.split {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        };
        let splits = &mut out.last_mut().expect("pushed above").1;
        if splits[slot + 1..].iter().any(|s| !s.is_empty()) {
            return Err(corrupt!("line {}: splits out of order", lineno + 1));
        }
        splits[slot].push(Utterance {
            tokens: rec.tokens,
            label: rec.label,
        });
    }
    Ok(out
        .into_iter()
        .map(|(id, [train, dev, test])| AdaptationDataset::from_splits(id, train, dev, test))
        .collect())
}
