//! Local feature extraction toolkit built around a rotation- and
//! translation-equivariant keypoint detector and a lightweight dense
//! descriptor network.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff
//! tensors ([`tensor`]), cyclic-group steerable convolution layers
//! ([`equivariant`]), the detector and descriptor networks ([`detector`],
//! [`descriptor`]), the sequential-sampling reward trainer ([`reinforce`]),
//! planar geometry and synthetic data generation ([`geometry`]), and the
//! matching metrics used for evaluation ([`metrics`]).

pub mod config;
pub mod descriptor;
pub mod detector;
pub mod equivariant;
pub mod error;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod plot;
pub mod reinforce;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::{ParamSet, Tape, TensorId};
