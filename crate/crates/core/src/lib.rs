//! Multi-frame optical flow with separable spatiotemporal encoders, a 3D
//! convolutional GRU refinement loop, and space-time attention.
//!
//! Everything runs on a small reverse-mode autodiff tape
//! ([`autodiff::Tape`]) over dense tensors, generic over `f32`/`f64` so the
//! same graphs can be gradient-checked in double precision.

pub mod attention;
pub mod autodiff;
pub mod checks;
pub mod checkpoint;
pub mod config;
pub mod correlation;
pub mod encoders;
pub mod error;
pub mod flow_io;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod update;

pub use autodiff::{ConvAxis, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
