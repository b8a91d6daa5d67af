//! Multiplication-free MLPs for point-cloud classification.
//!
//! Linear layers come in three families: ordinary multiply (`mul`),
//! power-of-two weights applied as bit shifts (`shift`), and negative L1
//! distance (`adder`). The `sa` model variant alternates shift and adder
//! layers.

pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod models;
pub mod optim;
pub mod shiftquant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
