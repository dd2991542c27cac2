//! Sequential knowledge editing through a dynamic auxiliary fusion network.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape and Adam.
//! - [`lm`]: a small decoder-only language model with editable FFN matrices.
//! - [`signal`]: per-token rank-1 gradient signals of the editable matrices.
//! - [`net`]: the auxiliary network mapping signals to weight deltas.
//! - [`trainer`]: curriculum meta-training of the auxiliary network.
//! - [`editor`]: sequential editing runtime plus fine-tuning and null baselines.
//! - [`eval`]: reliability, generality and locality over an edit stream.
//! - [`datagen`]: a synthetic knowledge graph and templated editing datasets.

pub mod ckpt;
pub mod datagen;
pub mod editor;
mod error;
pub mod eval;
pub mod lm;
pub mod net;
pub mod signal;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
