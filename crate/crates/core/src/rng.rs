//! Seedable, portable random streams.
//!
//! Every random draw in the crate goes through [`PlanRng`], which is ChaCha
//! with 8 rounds (`rand_chacha::ChaCha8Rng`). Gaussian variates use the
//! ziggurat sampler from `rand_distr::StandardNormal`. Both are specified
//! bit-for-bit independently of the host platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type PlanRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> PlanRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a (seed, stream) pair.
pub fn substream(seed: u64, stream: u64) -> PlanRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}
