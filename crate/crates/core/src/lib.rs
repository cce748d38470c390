//! Computation-aware task-oriented communication: static and multi-exit
//! encoders trained end to end through a simulated wireless channel, with
//! FLOPs accounting and budgeted early-exit scheduling.

pub mod dynamic;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod link;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod scheduler;
pub mod static_model;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Seeded random source used everywhere randomness is needed.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    <SeededRng as rand::SeedableRng>::seed_from_u64(seed)
}
