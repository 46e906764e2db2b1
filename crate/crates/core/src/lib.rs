//! Vision-language tracking with channel-selector fusion, an asymmetric
//! two-stream supernet, single-path one-shot training with evolutionary
//! architecture search, and a deterministic synthetic benchmark world.
//!
//! Everything runs on CPU. Training and inference use f32; gradient checks
//! instantiate the same code at f64.

pub mod blocks;
pub mod crop;
pub mod error;
pub mod genome;
pub mod lang;
pub mod metrics;
pub mod modamixer;
pub mod geom;
pub mod search;
pub mod store;
pub mod supernet;
pub mod synth;
pub mod tracker;
pub mod tensor;

pub use error::{Error, Result};
