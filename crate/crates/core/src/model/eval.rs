use crate::error::{invalid, Result};
use crate::lora::AdapterSet;
use crate::model::ToyModel;
use crate::speakersim::Utterance;
use crate::tensor::Matrix;

const EVAL_CHUNK: usize = 256;

/// Index of the largest value; ties go to the lower index.
pub fn argmax(values: impl IntoIterator<Item = f32>) -> u32 {
    let mut best = (f32::NEG_INFINITY, 0u32);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.0 {
            best = (v, i as u32);
        }
    }
    best.1
}

fn column_argmax(logits: &Matrix) -> Vec<u32> {
    (0..logits.cols())
        .map(|u| argmax((0..logits.rows()).map(|c| logits.get(c, u))))
        .collect()
}

fn predict(model: &ToyModel, adapters: Option<&AdapterSet>, utts: &[Utterance]) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(EVAL_CHUNK) {
        let refs: Vec<&Utterance> = chunk.iter().collect();
        out.extend(column_argmax(&model.forward(adapters, &refs)?));
    }
    Ok(out)
}

/// Teacher labels: argmax of the teacher's logits per utterance.
pub fn pseudo_label(teacher: &ToyModel, adapters: Option<&AdapterSet>, utts: &[Utterance]) -> Result<Vec<u32>> {
    if utts.is_empty() {
        return Ok(Vec::new());
    }
    predict(teacher, adapters, utts)
}

/// Percentage of predictions that differ from the labels.
pub fn error_rate(predictions: &[u32], labels: &[u32]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "prediction/label count mismatch");
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    100.0 * wrong as f64 / labels.len() as f64
}

/// Utterance-level classification error in percent.
pub fn evaluate(model: &ToyModel, adapters: Option<&AdapterSet>, utts: &[Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(invalid!("cannot evaluate on an empty set"));
    }
    let preds = predict(model, adapters, utts)?;
    let labels: Vec<u32> = utts.iter().map(|u| u.label).collect();
    Ok(error_rate(&preds, &labels))
}
