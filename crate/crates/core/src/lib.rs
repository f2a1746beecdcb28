//! Collaborative neural rendering of characters from unordered reference sheets.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: tensors, reverse-mode autodiff and AdamW.
//! * [`geom`]: landmark baking, posing, cameras and z-buffer rasterization of
//!   dense-pose images.
//! * [`synth`]: procedural characters, poses, backgrounds and training samples.
//! * [`network`]: the weight-shared multi-view renderer and the pose detector.
//! * [`training`]: losses, the joint training loop, evaluation and ablations.

pub mod error;
pub mod geom;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{AdamW, AdamWConfig, OptState, Real, Tape, Tensor, Var};
