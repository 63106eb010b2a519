//! Core library for cortex-conditioned volume synthesis: mesh geometry and
//! signed distance conditions, Brownian-bridge diffusion algebra, a PCA shape
//! model, image metrics and a synthetic phantom generator.

// `!(x > 0.0)` is the idiom here for rejecting NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod shapemodel;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{ConditionSet, TriMesh};
pub use volume::{Grid, Volume};
