//! Experiment infrastructure: datasets, the training loop, checkpoints and
//! connectivity export.

pub mod checkpoint;
pub mod connectivity;
pub mod data;
pub mod train;
