//! The self-training framework: configuration, the shared training loop,
//! the lineage stages, the artifact store and the pipeline/grid runner.

pub mod config;
pub mod data;
pub mod pipeline;
pub mod pseudo;
pub mod stages;
pub mod store;
pub mod train;
