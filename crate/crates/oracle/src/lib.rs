//! Independent reference implementations and the check suites that compare
//! `prism-core` against them.

pub mod attention;
pub mod geometry;
pub mod gradients;
pub mod information;
pub mod persistence;
pub mod reference;
pub mod report;
pub mod structure;
mod util;

pub use report::{Check, Suite};

use prism_core::Result;

/// Every suite in a fixed order.
pub fn run_all() -> Result<Vec<Suite>> {
    Ok(vec![
        gradients::suite()?,
        attention::sadpa_suite()?,
        attention::dual_softmax_suite()?,
        attention::mnn_suite()?,
        attention::rope_suite()?,
        information::suite()?,
        structure::suite()?,
        geometry::suite()?,
        persistence::suite()?,
    ])
}
