//! Evaluation: metrics, robust geometry estimation and reports.

pub mod geometry;
pub mod metrics;
pub mod report;
pub mod run;
