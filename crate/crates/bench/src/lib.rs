//! Fixtures shared by the benchmarks.

use tsqlora::{gen_gaussian_mixture, Dataset, ModelSpec, ModelState};

/// The default CLI setting: 32 inputs, three hidden layers of 32, 10 classes.
pub fn default_spec() -> ModelSpec {
    ModelSpec::mlp(vec![32, 32, 32, 32, 10])
}

pub fn pool(n: usize) -> Dataset {
    gen_gaussian_mixture(0, n, 32, 10, 0.2).expect("valid generator settings")
}

/// A model whose `B` factors are non-zero so gradients reach every factor.
pub fn live_state(r_init: usize) -> ModelState {
    let spec = default_spec();
    let mut state = ModelState::init(&spec, r_init, 4 * r_init, 7).expect("valid spec");
    let batch = pool(64).as_batch();
    for _ in 0..5 {
        let (_, g) = state.gradient(&batch, false).expect("gradient");
        state.sgd_step(&g, 0.5).expect("sgd");
    }
    state
}
