//! Class-incremental learning with a frozen backbone, per-task bottleneck
//! adapters, thresholded synapse gates that route each test sample to the
//! adapters it belongs to, and a cosine prototype classifier.
//!
//! The pipeline per incremental task `t`:
//!
//! 1. a new adapter `E_t` is trained on top of the frozen backbone `E_0`, then frozen;
//! 2. prototypes for task `t`'s classes are built from `h_0 + h_t`;
//! 3. a new gate `S_t` learns to score `h_0 + h_1 + ... + h_t` as "current task"
//!    versus stored embeddings of earlier tasks, then is frozen;
//! 4. at inference every gate fires or stays silent, and the classifier sees
//!    `h_0 + sum(m_i * h_i)`.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod format;
pub mod gate;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod prototype;
pub mod report;
pub mod seed;
pub mod tape;
pub mod tensor;
mod train;

pub use error::{Error, Result, ValidationError};
pub use tensor::Tensor;
