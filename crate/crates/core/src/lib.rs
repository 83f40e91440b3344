//! WOLONet: a mel-conditioned GAN vocoder whose generator is built from Wave
//! Outlooker blocks, location-variant depthwise kernels predicted per time step
//! and aggregated by overlap-add.
//!
//! The crate is self-contained: [`tensor`] provides a small reverse-mode
//! autodiff core, [`dsp`] the log-mel frontend and audio I/O, [`wolo`] the
//! attention block, [`generator`] and [`discriminator`] the two networks,
//! [`losses`] the least-squares GAN objective, [`trainer`] the optimisation
//! loop and [`eval`] complexity accounting and MCD.

pub mod checkpoint;
pub mod discriminator;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod wolo;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
