//! Video lane detection with temporal context aggregation.
//!
//! A small convolutional encoder produces per-frame feature maps that are
//! refined by three attention branches: self-attention over the current
//! frame, cross-attention against the previous frame's key/value pair
//! (short-term), and cross-attention of a persistent query that accumulates
//! context from the start of the video (long-term). The refined features are
//! decoded into a lane probability map and per-cell coefficients over a
//! low-rank lane shape basis; candidates are reconstructed and filtered with
//! NMS. The recurrent carry between frames is constant-size regardless of
//! video length.
//!
//! Everything is plain f64 on CPU with tape-based reverse-mode autodiff, so
//! gradients are checkable against finite differences at full precision.

pub mod array;
pub mod attention;
pub mod bootstrap;
pub mod check;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod infer;
pub mod lane;
pub mod lanehead;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ppm;
pub mod tca;
pub mod rng;
pub mod synth;
pub mod train;
pub mod viz;
pub mod tape;

pub use array::RealArray;
pub use error::{Error, Result};
