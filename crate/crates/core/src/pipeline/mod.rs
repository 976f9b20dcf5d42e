//! Data generation, dataset ingestion and persistence.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod synth;
