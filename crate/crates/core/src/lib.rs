//! Multi-task contrastive affect learning: data model, pair sampling,
//! losses, network, training and few-shot label propagation.

pub mod augment;
pub mod checkpoint;
pub mod datamodel;
pub mod error;
pub mod fsl;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod sampler;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
