//! Descriptor stores, exact nearest-neighbour search, inverse-distance
//! post-enhancement and recall evaluation.

mod enhance;
mod eval;
mod knn;
mod store;

pub use enhance::{enhance_all, enhance_descriptor, enhancement_weights, EnhanceConfig, EnhanceMode};
pub use eval::{evaluate, top1pct_cutoff, EvalReport};
pub use knn::{knn, Neighbor};
pub use store::{load_descriptors, save_descriptors, DescriptorEntry, DescriptorStore, Origin, DESCRIPTOR_MAGIC};
