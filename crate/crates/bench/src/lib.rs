//! Shared fixtures for the benchmarks.

use eemax_core::chanmodel::{generate, Dataset, ScenarioConfig};
use eemax_core::inet::{NetParams, NetShape};

/// `count` channel draws for `users` users with the default scenario.
pub fn dataset(users: usize, count: usize) -> Dataset {
    let sc = ScenarioConfig {
        num_users: users,
        ..Default::default()
    };
    generate(&sc, count, 7).expect("default scenario is valid")
}

/// Network with random hidden weights and a nonzero read-out, so every
/// layer contributes to the forward cost.
pub fn network() -> NetParams {
    let mut rng = eemax_core::chanmodel::sample_rng(11, 0);
    let mut p = NetParams::init(NetShape::default(), 0.3, &mut rng).expect("default shape is valid");
    p.final_layer.weight.data_mut().iter_mut().for_each(|w| *w = 0.01);
    p
}
