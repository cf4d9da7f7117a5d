//! Dense math, reverse-mode gradients for small MLPs, Adam, and the
//! distribution and loss primitives shared by the learners.

mod adam;
mod distributions;
mod mlp;

pub use adam::{AdamState, DEFAULT_LR};
pub use distributions::{
    clamp_log_std, clamp_unit_action, expectile_loss, expectile_loss_grad, log1m_tanh_sq,
    softplus, squashed_gaussian_logprob, ExpectileFactor, ACTION_EPS, HALF_LOG_2PI, LOG_STD_MAX,
    LOG_STD_MIN,
};
pub use mlp::{polyak_update, Activation, Dense, GradTape, Gradients, Mlp};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

/// Every random stream in the crate is an explicitly seeded ChaCha8.
pub type Rng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn rng_from(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("value out of range: {0}")]
    Domain(String),
}
