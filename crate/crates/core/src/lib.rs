//! Attention with bounded-memory control: a fixed number of memory slots,
//! written to under a per-token control vector and read with softmax
//! attention, covering softmax recovery, Linformer-style projection,
//! clustering, sliding and dilated windows, local-to-global, random and
//! compressive control, and the learned ABC_MLP.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod strategies;
pub mod verify;

pub use error::{Error, Result};
