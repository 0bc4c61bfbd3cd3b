//! A variational autoencoder whose top-level latent is a stochastic address
//! into an external memory, trained with the VIMCO multi-sample estimator.

pub mod data;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod memory;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// The single seeded generator threaded through every sampler.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    <Rng as rand::SeedableRng>::seed_from_u64(seed)
}
