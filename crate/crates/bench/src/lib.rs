//! Fixtures shared by the benchmarks.

use chainplan::rng::{gaussian_vec, seeded};
use chainplan::{Denoiser, EmaPair, FactorChain, ModelConfig, NoiseSchedule, ScheduleConfig, Tensor};

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(ScheduleConfig::default()).expect("default schedule")
}

/// An untrained pair with the default architecture for `frames`-frame 2D
/// chunks. Timing does not depend on the weights.
pub fn pair(frames: usize, schedule: &NoiseSchedule) -> EmaPair {
    let model = Denoiser::new(ModelConfig::new(frames, 2), schedule, &mut seeded(0)).expect("model");
    EmaPair::new(model, 0.999, 1e-4).expect("pair")
}

/// The three-chunk loop used for the arc task.
pub fn flower() -> FactorChain {
    FactorChain::new(3, 3, 2, vec![0.0, 0.0], vec![0.0, 0.0]).expect("chain")
}

pub fn batch(rows: usize, width: usize, seed: u64) -> Tensor {
    Tensor::new(gaussian_vec(&mut seeded(seed), rows * width), vec![rows, width]).expect("batch")
}
