use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, PqmError, Result};
use crate::lora::{adapter_grads, adapter_input_grad, lora_forward, AdapterSet, LoraAdapter};
use crate::model::argmax;
use crate::nfquant::{dequantise, quantise_matrix, NormalFloatCodebook, QuantisedMatrix};
use crate::speakersim::{TaskConfig, Utterance};
use crate::tensor::{gaussian_fill, matmul, Matrix, Rng};

pub const EMBED: usize = 0;
pub const CONV: usize = 1;
pub const BLOCK0: usize = 2;
pub const BLOCK1: usize = 3;
pub const HEAD: usize = 4;
pub const LAYER_IDS: [&str; 5] = ["embed", "conv", "block0", "block1", "head"];
/// Layers that may carry an adapter.
pub const ATTACHABLE: [&str; 3] = ["block0", "block1", "head"];
pub const CONV_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Embedding,
    Conv1d,
    Linear,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Embedding => 0,
            LayerKind::Conv1d => 1,
            LayerKind::Linear => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LayerKind::Embedding),
            1 => Some(LayerKind::Conv1d),
            2 => Some(LayerKind::Linear),
            _ => None,
        }
    }
}

/// Which layer kinds get quantised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub linear: bool,
    pub conv: bool,
    pub embed: bool,
}

impl LayerSelection {
    pub const ALL: Self = Self {
        linear: true,
        conv: true,
        embed: true,
    };
    pub const NONE: Self = Self {
        linear: false,
        conv: false,
        embed: false,
    };

    pub fn includes(&self, kind: LayerKind) -> bool {
        match kind {
            LayerKind::Embedding => self.embed,
            LayerKind::Conv1d => self.conv,
            LayerKind::Linear => self.linear,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.linear || self.conv || self.embed)
    }
}

impl FromStr for LayerSelection {
    type Err = PqmError;

    /// Parses `linear,conv,embed` (any subset; `none` or empty for nothing).
    fn from_str(s: &str) -> Result<Self> {
        let mut sel = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "linear" => sel.linear = true,
                "conv" => sel.conv = true,
                "embed" => sel.embed = true,
                "all" => sel = Self::ALL,
                "none" => {}
                other => return Err(invalid!("unknown layer kind '{other}' in selection")),
            }
        }
        Ok(sel)
    }
}

impl fmt::Display for LayerSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.linear, "linear"), (self.conv, "conv"), (self.embed, "embed")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, name)| *name)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

/// A layer's weight, either full precision or quantised. Quantised weights
/// carry their dequantised copy so the forward pass does not decode per call.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeight {
    Dense(Matrix),
    Quantised {
        q: QuantisedMatrix,
        dequantised: Matrix,
    },
}

impl LayerWeight {
    pub fn quantised(q: QuantisedMatrix) -> Result<Self> {
        let cb = NormalFloatCodebook::new(q.bits())?;
        let dequantised = dequantise(&q, &cb)?;
        Ok(LayerWeight::Quantised { q, dequantised })
    }

    /// The matrix the forward pass uses.
    pub fn dense(&self) -> &Matrix {
        match self {
            LayerWeight::Dense(m) => m,
            LayerWeight::Quantised { dequantised, .. } => dequantised,
        }
    }

    pub fn is_quantised(&self) -> bool {
        matches!(self, LayerWeight::Quantised { .. })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.dense().shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayer {
    pub kind: LayerKind,
    pub weight: LayerWeight,
    /// Always full precision; empty for the embedding.
    pub bias: Vec<f32>,
}

/// Token embedding → depthwise conv (width 3, same padding) → two
/// linear+tanh blocks → mean over time → linear head.
///
/// Shapes: embedding `vocab × d`, conv kernel `d × 3`, blocks `d × d`,
/// head `classes × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: usize,
    classes: usize,
    d_model: usize,
    layers: Vec<ModelLayer>,
}

/// Width of the standard model used for size accounting. From this width on,
/// linear layers hold at least 90% of the parameters; narrower models are
/// dominated by the vocab×d embedding.
pub const STANDARD_D_MODEL: usize = 320;

/// Convenience constructor with the standard task's vocabulary and classes.
pub fn build_model(d_model: usize, seed: u64) -> Result<ToyModel> {
    let task = TaskConfig::default();
    ToyModel::new(task.vocab, task.classes, d_model, seed)
}

/// Gradients for every weight and bias (full fine-tuning).
#[derive(Debug, Clone)]
pub struct FullGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub enum Gradients {
    Full(FullGrads),
    /// `(gA, gB)` per adapted layer.
    Adapters(BTreeMap<String, (Matrix, Matrix)>),
}

pub(crate) struct Trace {
    offsets: Vec<usize>,
    tokens: Vec<u32>,
    x0: Matrix,
    x1: Matrix,
    h0: Matrix,
    h1: Matrix,
    pooled: Matrix,
    pub(crate) logits: Matrix,
}

impl ToyModel {
    pub fn new(vocab: usize, classes: usize, d_model: usize, seed: u64) -> Result<Self> {
        if d_model < 8 {
            return Err(invalid!("d_model must be at least 8, got {d_model}"));
        }
        if vocab < 2 || classes < 2 {
            return Err(invalid!("need vocab >= 2 and classes >= 2"));
        }
        let mut rng = Rng::with_stream(seed, 0x30DE1);
        let d = d_model;
        let inv_sqrt_d = (1.0 / d as f64).sqrt() as f32;
        let embed = gaussian_fill(Matrix::zeros(vocab, d), 0.0, 1.0, &mut rng)?;
        let mut conv = gaussian_fill(Matrix::zeros(d, CONV_WIDTH), 0.0, 0.1, &mut rng)?;
        for c in 0..d {
            conv.set(c, 1, conv.get(c, 1) + 1.0);
        }
        let block0 = gaussian_fill(Matrix::zeros(d, d), 0.0, inv_sqrt_d, &mut rng)?;
        let block1 = gaussian_fill(Matrix::zeros(d, d), 0.0, inv_sqrt_d, &mut rng)?;
        let head = gaussian_fill(Matrix::zeros(classes, d), 0.0, inv_sqrt_d, &mut rng)?;
        let dense = |kind, m: Matrix, bias_len: usize| ModelLayer {
            kind,
            weight: LayerWeight::Dense(m),
            bias: vec![0.0; bias_len],
        };
        Ok(Self {
            vocab,
            classes,
            d_model,
            layers: vec![
                dense(LayerKind::Embedding, embed, 0),
                dense(LayerKind::Conv1d, conv, d),
                dense(LayerKind::Linear, block0, d),
                dense(LayerKind::Linear, block1, d),
                dense(LayerKind::Linear, head, classes),
            ],
        })
    }

    /// Reassembles a model from loaded layers, checking the fixed architecture.
    pub fn from_layers(vocab: usize, classes: usize, d_model: usize, layers: Vec<ModelLayer>) -> Result<Self> {
        let d = d_model;
        let expected = [
            (LayerKind::Embedding, (vocab, d), 0),
            (LayerKind::Conv1d, (d, CONV_WIDTH), d),
            (LayerKind::Linear, (d, d), d),
            (LayerKind::Linear, (d, d), d),
            (LayerKind::Linear, (classes, d), classes),
        ];
        if layers.len() != expected.len() {
            return Err(dim_err!("expected {} layers, found {}", expected.len(), layers.len()));
        }
        for (i, (layer, (kind, shape, bias))) in layers.iter().zip(expected).enumerate() {
            if layer.kind != kind || layer.weight.shape() != shape || layer.bias.len() != bias {
                return Err(dim_err!(
                    "layer {} is {:?} {:?} with {} biases, expected {:?} {:?} with {}",
                    LAYER_IDS[i],
                    layer.kind,
                    layer.weight.shape(),
                    layer.bias.len(),
                    kind,
                    shape,
                    bias
                ));
            }
        }
        Ok(Self {
            vocab,
            classes,
            d_model,
            layers,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn layers(&self) -> &[ModelLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [ModelLayer] {
        &mut self.layers
    }

    pub fn layer_index(id: &str) -> Option<usize> {
        LAYER_IDS.iter().position(|&l| l == id)
    }

    pub fn is_quantised(&self) -> bool {
        self.layers.iter().any(|l| l.weight.is_quantised())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.dense().len() + l.bias.len()).sum()
    }

    /// Share of parameters (weights and biases) living in linear layers.
    pub fn linear_fraction(&self) -> f64 {
        let linear: usize = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::Linear)
            .map(|l| l.weight.dense().len() + l.bias.len())
            .sum();
        linear as f64 / self.num_params() as f64
    }

    /// Replaces the weights of the selected layer kinds by their block-wise
    /// quantised form. Biases stay full precision.
    pub fn quantise(&self, selection: LayerSelection, block_size: usize, cb: &NormalFloatCodebook) -> Result<ToyModel> {
        if self.is_quantised() {
            return Err(invalid!("model is already quantised"));
        }
        let mut out = self.clone();
        for layer in out.layers.iter_mut() {
            if selection.includes(layer.kind) {
                let q = quantise_matrix(layer.weight.dense(), block_size, cb)?;
                layer.weight = LayerWeight::quantised(q)?;
            }
        }
        Ok(out)
    }

    /// Fresh adapters on the named linear layers.
    pub fn init_adapters(
        &self,
        speaker: &str,
        attach: &[String],
        rank: usize,
        alpha: f32,
        rng: &mut Rng,
    ) -> Result<AdapterSet> {
        let mut set = AdapterSet::new(speaker);
        for id in attach {
            if !ATTACHABLE.contains(&id.as_str()) {
                return Err(invalid!("adapters attach to {ATTACHABLE:?} only, got '{id}'"));
            }
            let idx = Self::layer_index(id).expect("attachable ids are layer ids");
            let (d, k) = self.layers[idx].weight.shape();
            set.adapters.insert(id.clone(), LoraAdapter::init(d, k, rank, alpha, rng)?);
        }
        Ok(set)
    }

    pub fn check_adapters(&self, adapters: &AdapterSet) -> Result<()> {
        for (id, ad) in &adapters.adapters {
            let idx = Self::layer_index(id)
                .filter(|_| ATTACHABLE.contains(&id.as_str()))
                .ok_or_else(|| invalid!("adapter for unknown or non-linear layer '{id}'"))?;
            let shape = self.layers[idx].weight.shape();
            if shape != (ad.out_dim(), ad.in_dim()) {
                return Err(dim_err!(
                    "adapter '{id}' is {}x{} but the layer is {}x{}",
                    ad.out_dim(),
                    ad.in_dim(),
                    shape.0,
                    shape.1
                ));
            }
        }
        Ok(())
    }

    fn check_tokens(&self, utts: &[&Utterance]) -> Result<()> {
        if utts.is_empty() {
            return Err(invalid!("empty batch"));
        }
        for u in utts {
            if u.tokens.is_empty() {
                return Err(invalid!("utterance without tokens"));
            }
            if let Some(t) = u.tokens.iter().find(|&&t| t as usize >= self.vocab) {
                return Err(invalid!("token id {t} outside vocabulary of {}", self.vocab));
            }
        }
        Ok(())
    }

    fn linear(&self, idx: usize, adapters: Option<&AdapterSet>, x: &Matrix) -> Result<Matrix> {
        let layer = &self.layers[idx];
        let w = layer.weight.dense();
        let mut z = match adapters.and_then(|a| a.get(LAYER_IDS[idx])) {
            Some(ad) => lora_forward(w, ad, x)?,
            None => matmul(w, x)?,
        };
        add_row_bias(&mut z, &layer.bias);
        Ok(z)
    }

    pub(crate) fn forward_trace(&self, adapters: Option<&AdapterSet>, utts: &[&Utterance]) -> Result<Trace> {
        self.check_tokens(utts)?;
        if let Some(a) = adapters {
            self.check_adapters(a)?;
        }
        let d = self.d_model;
        let mut offsets = Vec::with_capacity(utts.len() + 1);
        offsets.push(0);
        let mut tokens = Vec::new();
        for u in utts {
            tokens.extend_from_slice(&u.tokens);
            offsets.push(tokens.len());
        }
        let n = tokens.len();

        let embed = self.layers[EMBED].weight.dense();
        let mut x0 = Matrix::zeros(d, n);
        for (col, &t) in tokens.iter().enumerate() {
            for (c, &v) in embed.row(t as usize).iter().enumerate() {
                x0.set(c, col, v);
            }
        }

        let conv = &self.layers[CONV];
        let kernel = conv.weight.dense();
        let mut x1 = Matrix::zeros(d, n);
        for c in 0..d {
            let k = kernel.row(c);
            let src = x0.row(c);
            let bias = f64::from(conv.bias[c]);
            let dst = x1.row_mut(c);
            for w in offsets.windows(2) {
                let (start, end) = (w[0], w[1]);
                for t in start..end {
                    let mut acc = bias;
                    for (j, &kj) in k.iter().enumerate() {
                        let s = t + j;
                        if s > start && s <= end {
                            acc += f64::from(kj) * f64::from(src[s - 1]);
                        }
                    }
                    dst[t] = acc as f32;
                }
            }
        }

        let mut h0 = self.linear(BLOCK0, adapters, &x1)?;
        tanh_inplace(&mut h0);
        let mut h1 = self.linear(BLOCK1, adapters, &h0)?;
        tanh_inplace(&mut h1);

        let mut pooled = Matrix::zeros(d, utts.len());
        for c in 0..d {
            let row = h1.row(c);
            for (u, w) in offsets.windows(2).enumerate() {
                let sum: f64 = row[w[0]..w[1]].iter().map(|&v| f64::from(v)).sum();
                pooled.set(c, u, (sum / (w[1] - w[0]) as f64) as f32);
            }
        }
        let logits = self.linear(HEAD, adapters, &pooled)?;
        Ok(Trace {
            offsets,
            tokens,
            x0,
            x1,
            h0,
            h1,
            pooled,
            logits,
        })
    }

    /// Logits, `classes × batch`.
    pub fn forward(&self, adapters: Option<&AdapterSet>, utts: &[&Utterance]) -> Result<Matrix> {
        Ok(self.forward_trace(adapters, utts)?.logits)
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, adapters: Option<&AdapterSet>, utts: &[&Utterance]) -> Result<f64> {
        let trace = self.forward_trace(adapters, utts)?;
        Ok(softmax_xent(&trace.logits, utts, None))
    }

    /// Mean loss and number of misclassified utterances of a batch.
    pub fn loss_and_errors(&self, adapters: Option<&AdapterSet>, utts: &[&Utterance]) -> Result<(f64, usize)> {
        let trace = self.forward_trace(adapters, utts)?;
        let loss = softmax_xent(&trace.logits, utts, None);
        let logits = &trace.logits;
        let wrong = utts
            .iter()
            .enumerate()
            .filter(|(u, utt)| argmax((0..logits.rows()).map(|c| logits.get(c, *u))) != utt.label)
            .count();
        Ok((loss, wrong))
    }

    /// Loss and gradients. `full` selects full fine-tuning gradients;
    /// otherwise only adapter gradients are produced and the base is frozen.
    pub fn loss_and_grads(
        &self,
        adapters: Option<&AdapterSet>,
        utts: &[&Utterance],
        full: bool,
    ) -> Result<(f64, Gradients)> {
        if full && self.is_quantised() {
            return Err(invalid!("full fine-tuning needs a full-precision model"));
        }
        if !full && adapters.is_none_or(AdapterSet::is_empty) {
            return Err(invalid!("adapter-only training needs at least one adapter"));
        }
        let trace = self.forward_trace(adapters, utts)?;
        let mut g_logits = Matrix::zeros(self.classes, utts.len());
        let loss = softmax_xent(&trace.logits, utts, Some(&mut g_logits));
        let grads = self.backward(adapters, &trace, &g_logits, full)?;
        Ok((loss, grads))
    }

    fn backward(
        &self,
        adapters: Option<&AdapterSet>,
        tr: &Trace,
        g_logits: &Matrix,
        full: bool,
    ) -> Result<Gradients> {
        let d = self.d_model;
        let adapter = |idx: usize| adapters.and_then(|a| a.get(LAYER_IDS[idx]));
        // Lowest layer whose parameters need a gradient.
        let lowest = if full {
            EMBED
        } else {
            [BLOCK0, BLOCK1, HEAD]
                .into_iter()
                .find(|&i| adapter(i).is_some())
                .expect("checked non-empty")
        };

        let mut weight_grads: Vec<Option<Matrix>> = vec![None; LAYER_IDS.len()];
        let mut bias_grads: Vec<Vec<f32>> = vec![Vec::new(); LAYER_IDS.len()];
        let mut adapter_out = BTreeMap::new();

        // Gradient through one linear layer; returns the input gradient if needed.
        let mut linear_back = |idx: usize, x: &Matrix, gz: &Matrix, need_input: bool| -> Result<Option<Matrix>> {
            let w = self.layers[idx].weight.dense();
            let mut low_rank_bt_gy = None;
            if full {
                weight_grads[idx] = Some(matmul(gz, &x.transpose())?);
                bias_grads[idx] = row_sums(gz);
            } else if let Some(ad) = adapter(idx) {
                let (ga, gb, bt_gy) = adapter_grads(ad, x, gz)?;
                adapter_out.insert(LAYER_IDS[idx].to_string(), (ga, gb));
                low_rank_bt_gy = Some(bt_gy);
            }
            if !need_input {
                return Ok(None);
            }
            let mut gx = matmul(&w.transpose(), gz)?;
            if let (Some(ad), Some(bt_gy)) = (adapter(idx), low_rank_bt_gy.as_ref()) {
                gx.add_assign(&adapter_input_grad(ad, bt_gy)?)?;
            } else if let Some(ad) = adapter(idx) {
                let bt_gy = matmul(&ad.b().transpose(), gz)?;
                gx.add_assign(&adapter_input_grad(ad, &bt_gy)?)?;
            }
            Ok(Some(gx))
        };

        let g_pooled = linear_back(HEAD, &tr.pooled, g_logits, lowest < HEAD)?;
        if let Some(g_pooled) = g_pooled {
            let n = tr.tokens.len();
            let mut g_h1 = Matrix::zeros(d, n);
            for c in 0..d {
                let gp = g_pooled.row(c);
                let dst = g_h1.row_mut(c);
                for (u, w) in tr.offsets.windows(2).enumerate() {
                    let share = gp[u] / (w[1] - w[0]) as f32;
                    dst[w[0]..w[1]].iter_mut().for_each(|v| *v = share);
                }
            }
            let g_z1 = tanh_backward(&g_h1, &tr.h1);
            if let Some(g_h0) = linear_back(BLOCK1, &tr.h0, &g_z1, lowest < BLOCK1)? {
                let g_z0 = tanh_backward(&g_h0, &tr.h0);
                if let Some(g_x1) = linear_back(BLOCK0, &tr.x1, &g_z0, lowest < BLOCK0)? {
                    let (g_kernel, g_conv_bias, g_x0) = self.conv_backward(tr, &g_x1);
                    weight_grads[CONV] = Some(g_kernel);
                    bias_grads[CONV] = g_conv_bias;
                    let mut g_embed = vec![0.0f64; self.vocab * d];
                    for (col, &t) in tr.tokens.iter().enumerate() {
                        let row = &mut g_embed[t as usize * d..(t as usize + 1) * d];
                        for (c, r) in row.iter_mut().enumerate() {
                            *r += f64::from(g_x0.get(c, col));
                        }
                    }
                    weight_grads[EMBED] = Some(Matrix::new(
                        self.vocab,
                        d,
                        g_embed.into_iter().map(|v| v as f32).collect(),
                    )?);
                }
            }
        }

        if full {
            let weights = weight_grads
                .into_iter()
                .map(|g| g.expect("full backward reaches every layer"))
                .collect();
            Ok(Gradients::Full(FullGrads {
                weights,
                biases: bias_grads,
            }))
        } else {
            Ok(Gradients::Adapters(adapter_out))
        }
    }

    fn conv_backward(&self, tr: &Trace, g_x1: &Matrix) -> (Matrix, Vec<f32>, Matrix) {
        let d = self.d_model;
        let n = tr.tokens.len();
        let kernel = self.layers[CONV].weight.dense();
        let mut g_kernel = Matrix::zeros(d, CONV_WIDTH);
        let mut g_bias = vec![0.0f32; d];
        let mut g_x0 = Matrix::zeros(d, n);
        for c in 0..d {
            let k = kernel.row(c);
            let gy = g_x1.row(c);
            let src = tr.x0.row(c);
            let mut gk = [0.0f64; CONV_WIDTH];
            let mut gb = 0.0f64;
            let mut gx = vec![0.0f64; n];
            for w in tr.offsets.windows(2) {
                let (start, end) = (w[0], w[1]);
                for t in start..end {
                    let g = f64::from(gy[t]);
                    gb += g;
                    for j in 0..CONV_WIDTH {
                        let s = t + j;
                        if s > start && s <= end {
                            gk[j] += g * f64::from(src[s - 1]);
                            gx[s - 1] += g * f64::from(k[j]);
                        }
                    }
                }
            }
            for (j, v) in gk.iter().enumerate() {
                g_kernel.set(c, j, *v as f32);
            }
            g_bias[c] = gb as f32;
            for (dst, v) in g_x0.row_mut(c).iter_mut().zip(gx) {
                *dst = v as f32;
            }
        }
        (g_kernel, g_bias, g_x0)
    }
}

fn add_row_bias(z: &mut Matrix, bias: &[f32]) {
    for (r, &b) in bias.iter().enumerate() {
        z.row_mut(r).iter_mut().for_each(|v| *v += b);
    }
}

fn tanh_inplace(m: &mut Matrix) {
    m.data_mut().iter_mut().for_each(|v| *v = v.tanh());
}

fn tanh_backward(g_out: &Matrix, out: &Matrix) -> Matrix {
    let mut g = g_out.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
        *gv *= 1.0 - o * o;
    }
    g
}

fn row_sums(m: &Matrix) -> Vec<f32> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| f64::from(v)).sum::<f64>() as f32)
        .collect()
}

/// Mean cross-entropy; optionally writes `d loss / d logits` into `grad`.
fn softmax_xent(logits: &Matrix, utts: &[&Utterance], mut grad: Option<&mut Matrix>) -> f64 {
    let (classes, batch) = logits.shape();
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; classes];
    for (u, utt) in utts.iter().enumerate() {
        let max = (0..classes)
            .map(|c| f64::from(logits.get(c, u)))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (c, p) in probs.iter_mut().enumerate() {
            *p = (f64::from(logits.get(c, u)) - max).exp();
            sum += *p;
        }
        let label = utt.label as usize;
        total += -(probs[label] / sum).ln();
        if let Some(g) = grad.as_deref_mut() {
            for (c, p) in probs.iter().enumerate() {
                let target = if c == label { 1.0 } else { 0.0 };
                g.set(c, u, ((p / sum - target) / batch as f64) as f32);
            }
        }
    }
    total / batch as f64
}
