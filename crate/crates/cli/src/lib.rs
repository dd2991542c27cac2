//! Command-line front end: dataset generation, language model pretraining,
//! editor training, sequential-edit evaluation and attention export.

pub mod commands;
pub mod config;

pub use commands::{cmd_datagen, cmd_eval, cmd_export_attn, cmd_pretrain, cmd_train, Context};
pub use config::{EditorKind, RunConfig};
