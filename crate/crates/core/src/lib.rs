//! Multiple-output spiking neurons with complex-diagonal state-space
//! dynamics and a learnable reset feedback, together with the classical
//! neurons they generalize, a surrogate-gradient BPTT training stack and
//! the cost/ablation analyses used to study them.

pub mod analysis;
pub mod classic;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod init;
pub mod network;
pub mod neuron;
pub mod numeric;
pub mod params;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
