//! Reverse-mode tensor engine and the volumetric U-Net denoiser built on it:
//! parameters, training (Adam, EMA, plateau decay), checkpoints and gradient checks.

// `!(x > 0.0)` is the idiom here for rejecting NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
mod conv;
mod direct;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;
pub mod unet;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use model::{Model, NetDenoiser};
pub use params::ParamStore;
pub use tape::{Tape, Tensor, Var};
pub use train::{train, TrainConfig, TrainPair, Trainer};
pub use unet::DenoiserConfig;
