//! Personalisation of quantised models: block-wise NormalFloat quantisation of
//! a small sequence classifier, followed by low-rank adapters trained per
//! synthetic speaker.

pub mod error;
pub mod nfquant;
pub mod tensor;

pub use error::{PqmError, Result};
pub mod lora;
pub mod model;
pub mod speakersim;
pub mod checkpoint;
pub mod pipeline;
