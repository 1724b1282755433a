//! Mesh-based graph U-net for post-processing EIT reconstructions.

// Negated comparisons are used so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod datagen;
pub mod error;
pub mod forward;
pub mod gnn;
pub mod graph;
pub mod inverse;
pub mod mesh;
pub mod plot;
pub mod metrics;
pub mod registry;
pub mod sparse;
pub mod verify;

pub use error::{Error, Result};
