//! Offline-boosted actor-critic.
//!
//! An off-policy max-entropy actor-critic that concurrently learns the value
//! of the best policy supported by its own replay buffer (via expectile
//! regression) and, state by state, constrains the actor toward buffer
//! actions whenever that offline value beats the online one.
//!
//! Modules:
//! - [`numerics`]: MLPs with reverse-mode gradients, Adam, squashed Gaussians, expectile loss
//! - [`envs`]: pendulum, point-mass (dense/sparse), chain MDP, action-noise wrapper
//! - [`replay`]: FIFO replay buffer with uniform sampling and a binary snapshot format
//! - [`critic`]: twin Q-networks for the online policy and the offline optimal pair
//! - [`actor`]: squashed-Gaussian policy, gated updates, entropy temperature
//! - [`agent`]: the training loop, evaluation, configuration and checkpoints
//! - [`tabular`]: exact finite-MDP counterparts used as oracles
//! - [`harness`]: experiment plans, ablations, noise suites and curve export

// `!(x > 0.0)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod actor;
pub mod agent;
pub mod critic;
pub mod envs;
pub mod harness;
pub mod numerics;
pub mod replay;
pub mod tabular;
