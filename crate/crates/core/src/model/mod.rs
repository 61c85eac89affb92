//! A small token-sequence classifier with the three layer kinds that get
//! quantised (embedding, depthwise convolution, linear), hand-derived
//! gradients, and the training / evaluation loops used by every stage.

mod eval;
mod net;
mod optim;
mod train;

pub use eval::{argmax, error_rate, evaluate, pseudo_label};
pub use net::{
    build_model, FullGrads, Gradients, LayerKind, LayerSelection, LayerWeight, ModelLayer,
    ToyModel, ATTACHABLE, BLOCK0, BLOCK1, CONV, CONV_WIDTH, EMBED, HEAD, LAYER_IDS,
    STANDARD_D_MODEL,
};
pub use optim::{Optimiser, OptimiserConfig};
pub use train::{
    train, train_adapters, train_full, LossRecord, Selection, TrainConfig, TrainMode, TrainOutcome,
};

use crate::checkpoint::encode_model;
use crate::error::Result;
use crate::nfquant::{NormalFloatCodebook, QuantStats};

/// Quantises the selected layer kinds and reports the size change measured on
/// the encoded checkpoints, headers and biases included.
pub fn quantise_model(
    model: &ToyModel,
    selection: LayerSelection,
    block_size: usize,
    cb: &NormalFloatCodebook,
) -> Result<(ToyModel, QuantStats)> {
    let q = model.quantise(selection, block_size, cb)?;
    let raw = encode_model(model).len() as u64;
    let packed = encode_model(&q).len() as u64;
    Ok((q, QuantStats::from_bytes(raw, packed)))
}
