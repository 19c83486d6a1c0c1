//! Latent-space inversion of 3D fluvial deposit models.
//!
//! The crate provides a small reverse-mode tensor engine ([`tensor`]),
//! differentiable deposit generators ([`generator`]), rock-physics and
//! seismic forward models ([`geophysics`]), well surveys ([`survey`]),
//! inversion algorithms ([`inversion`]), validation metrics ([`metrics`]),
//! file formats ([`io`]), experiment configuration ([`config`]) and the
//! staged experiment workflow ([`workflow`]).

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Tape, Tensor, Var};
pub mod generator;
pub mod rng;
pub mod geophysics;
pub mod io;
pub mod survey;
pub mod inversion;
pub mod metrics;
pub mod config;
pub mod workflow;
