//! Keypoint-driven image animation.
//!
//! Unsupervised keypoints are detected as soft-argmax moments of learned
//! confidence maps, re-rendered as Gaussians, turned into a dense backward
//! flow by a part-mask motion network, and used to deform the encoder
//! features of an image generator. Everything is trained self-supervised on
//! frame pairs with a least-squares adversarial loss plus discriminator
//! feature matching.

pub mod adversarial;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod generator;
pub mod inference;
pub mod keypoints;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod nn;
pub mod repro;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod video;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Grads, Graph, Precision, Tensor, Var};
pub use model::{Ablation, Model, ModelConfig, Params};
