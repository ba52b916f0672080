//! Video frame interpolation by flow warping plus residual synthesis, trained
//! with an instance-level adversarial discriminator that inspects RoI-aligned
//! patches zoomed to a fixed size.
//!
//! Everything runs on a small `f64` tape autodiff ([`autograd`]) so that
//! gradients can be checked against finite differences at double precision.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod flow_net;
pub mod losses;
pub mod nn;
pub mod params;
pub mod roi;
pub mod synthesis;
pub mod tensor;
pub mod trainer;
pub mod warping;

pub use error::{Error, Result};
pub use tensor::Tensor;
