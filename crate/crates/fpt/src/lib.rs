//! A small, single-threaded deep learning lab for studying frozen
//! pretrained transformers on synthetic and image-patch sequence tasks.
//!
//! The pieces, bottom to top:
//! - [`tensor`]: dense f32 tensors and a reverse-mode autodiff tape
//! - [`models`]: a decoder-only transformer and an LSTM stack, with every
//!   parameter tagged by group (input, output, layernorm, positions,
//!   attention, feedforward)
//! - [`policy`]: freeze policies over those groups, init schemes, counting
//! - [`tasks`]: bit memory, bit XOR, ListOps, image patches, labeled text
//! - [`harness`]: Adam, the train loop, convergence measurement
//! - [`checkpoint`]: a bit-exact on-disk container with checksums
//! - [`analysis`]: attention extraction, reservoir readouts, sweeps, reports

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod harness;
pub mod tasks;
pub mod models;
pub mod policy;
pub mod tensor;
