//! The three stages (quantise, pretrain pooled adapters, adapt per speaker),
//! the comparison systems around them, and their reports.

mod commands;
mod config;
mod report;
mod stages;

pub use commands::*;
pub use config::*;
pub use report::*;
pub use stages::*;
