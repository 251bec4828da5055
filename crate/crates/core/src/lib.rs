//! Dynamic generative memory for class-incremental learning.
//!
//! A label-conditional GAN whose generator layers carry learnable binary
//! masks. Masks learned for a task reserve generator capacity, the reserved
//! parameters are frozen through gradient gating, and layers grow after each
//! task so that free capacity stays constant. The discriminator doubles as
//! the classifier and is trained on real data of the current task plus
//! replayed samples of all earlier tasks.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod expansion;
pub mod masks;
pub mod memory;
pub mod report;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{DgmError, Result};
