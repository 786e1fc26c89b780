//! Region-aware Wasserstein distances between persistence diagrams and branch
//! decomposition trees of scalar fields on regular grids.

pub mod compression;
pub mod ensemble;
pub mod error;
pub mod field;
pub mod region;
pub mod topology;
pub mod wasserstein;

pub use error::{Error, Result};
