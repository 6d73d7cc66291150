//! Minimal reverse-mode differentiation in double precision.
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] walks it in
//! reverse and returns gradients for every [`ParamStore`] entry that was
//! recorded with [`Tape::param`]. [`adam_step`] applies the update and
//! [`save_checkpoint`] / [`load_checkpoint`] persist parameters together
//! with optimizer state.
//!
//! Convolutions use NHWC layout (`[batch, height, width, channels]`) with
//! `[k, k, in, out]` kernels.

mod adam;
mod checkpoint;
mod conv;
mod error;
mod gemm;
mod params;
mod tape;
mod tensor;

pub mod gradcheck;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use error::{Error, Result};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var, LOG_FLOOR, NORM_FLOOR};
pub use tensor::Tensor;
