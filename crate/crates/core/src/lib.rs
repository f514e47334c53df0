//! Point-cloud place recognition: a PointNet-style encoder with GeM pooling,
//! momentum-contrast pretraining, triplet finetuning, and nearest-neighbour
//! retrieval with inverse-distance descriptor enhancement.

pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod pipeline;
pub mod pointcloud;
pub mod pretrain;
pub mod retrieval;
pub mod rng;

pub use error::{Error, Result};
