//! Multi-scale shared-window attention ("T3") over a 3-D latent token grid.
//!
//! The crate is organized around the retrofit idea: one set of projection
//! matrices `W_Q, W_K, W_V, W_O` drives both a reference full-attention
//! kernel and the windowed multi-scale kernel, so switching computation
//! modes never touches parameters.
//!
//! Modules:
//! - [`tensor`]: minimal dense row-major tensor core (matmul, softmax, RNG)
//! - [`grid`]: disjoint multi-scale tilings of the T×H×W grid and layer schedules
//! - [`attn`]: reference multi-head full attention, forward and analytic backward
//! - [`t3`]: the windowed multi-scale kernel plus its masked-attention oracle
//! - [`cost`]: analytic parameter/MACs accounting and an instrumented counter
//! - [`retrofit`]: weight persistence, mode switching, toy distillation
//! - [`config`]: run configuration and schedule blueprint files

pub mod attn;
pub mod config;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod retrofit;
pub mod t3;
pub mod tensor;

pub use error::T3Error;
