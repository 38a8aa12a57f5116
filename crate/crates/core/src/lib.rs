//! Diffusion-based distributed multitask actor-critic.
//!
//! Networked agents, each owning one task from a parametrized family, learn
//! a single policy that maximizes the average value across tasks. Every
//! agent adapts its critic and actor on local Monte Carlo rollouts and then
//! convexly combines parameters with its neighbors through a
//! doubly-stochastic combination matrix.
//!
//! Modules:
//! - [`tabular`]: averaged MDP, Bellman operators, LP Lagrangian and the
//!   exact dual-ascent actor-critic, plus value iteration.
//! - [`envs`]: cart-pole balance, pendulum and swing-up task families and a
//!   tabular gridworld.
//! - [`net`]: geometric topologies and Metropolis combination weights.
//! - [`nn`]: dense networks with manual backprop, Gaussian policy head, ADAM.
//! - [`diffdac`]: rollouts, returns, adapt/combine updates, the distributed
//!   run loop and the centralized baseline.
//! - [`harness`]: experiment configs, presets, metrics, plotting and the
//!   tabular oracle check.

pub mod diffdac;
pub mod envs;
pub mod error;
pub mod harness;
pub mod net;
pub mod nn;
pub mod stats;
pub mod tabular;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for a `(seed, stream...)` pair. Distinct stream tags
/// give statistically independent generators.
pub fn seeded_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for &tag in stream {
        h = splitmix(h ^ splitmix(tag.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
