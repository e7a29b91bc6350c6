//! Training and evaluation of reinforcement-learning recommendation policies
//! on environments built from logged interaction data.
//!
//! The crate is organized around the stages of the interaction loop:
//!
//! - [`tensor`]: dense f64 tensors, a reverse-mode autodiff tape, SGD/Adam.
//! - [`data`]: interaction logs, dataset descriptors, a synthetic generator.
//! - [`reward`]: the matrix-factorization reward model that completes the
//!   user-item matrix and doubles as a simulated user.
//! - [`env`]: step/reset recommendation environments with quit and
//!   repeat-removal mechanics, plus small benchmark environments.
//! - [`tracker`]: five interchangeable encoders turning (user, history)
//!   observations into fixed-length state vectors.
//! - [`policy`]: action selection with logit masking, continuous-to-discrete
//!   action mapping, and update rules for on-policy, off-policy, and batch
//!   algorithms.
//! - [`buffer`] and [`collector`]: streaming multi-environment trajectory
//!   storage and the interaction loop that fills it.
//! - [`exec`]: the trainer and evaluator executors and the metric suite.
//! - [`checkpoint`]: flat binary serialization of named parameter arrays.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod reward;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
