//! Landmark-driven 4D facial expression synthesis: SRVF motion curves,
//! a Wasserstein GAN on the curve hypersphere, a spiral-convolution
//! mesh decoder, and a PCA baseline.

pub mod curve;
pub mod error;
pub mod mesh;

pub use error::{Error, Result};
pub mod autodiff;
pub mod checkpoint;
pub mod rng;
pub mod synth;
pub mod decoder;
pub mod baseline;
pub mod gan;
pub mod pipeline;
