//! Exemplar-free class-incremental environmental sound classification.
//!
//! Audio clips become 40-coefficient MFCC maps, a temporal residual CNN turns
//! those into feature vectors, and each new task is learned with feature
//! distillation, a learned feature-transformation network and replay of
//! Gaussian class prototypes instead of stored audio.

pub mod aft;
pub mod audio;
pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod feature_space;
pub mod report;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
