//! Unsupervised solver for Raven-style progressive-matrix puzzles.
//!
//! Problems are reorganized into ten three-panel rows, scored by a small
//! convolutional network against a constant two-hot pseudo target, and
//! solved by picking the candidate row that scores highest.

pub mod checkpoint;
pub mod config;
mod error;
pub mod eval;
pub mod net;
pub mod pack;
pub mod problem;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
