//! Semi-dense feature matching with learned patch pruning.

pub mod backbone;
pub mod error;
pub mod eval;
pub mod grid;
pub mod image;
pub mod matcher;
pub mod mi;
pub mod model;
pub mod mpm;
pub mod nn;
pub mod pipeline;
pub mod rope;
pub mod sadpa;
pub mod supervision;
pub mod train;

pub use error::{PrismError, Result};
pub use model::{ModelConfig, PrismModel};
