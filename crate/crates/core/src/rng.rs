//! Seeded random streams.
//!
//! Every stochastic quantity is drawn from `ChaCha8Rng::seed_from_u64(seed)`
//! with a fixed stream id per purpose, so draws for one purpose never shift
//! when another purpose consumes more or fewer values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    /// Base, spline and scale weights (shared by KAN and Hybrid).
    KanInit = 1,
    /// Fractal ordinates and contraction parameters.
    FractalInit = 2,
    MlpInit = 3,
    /// Random sample locations (2D targets).
    Sampling = 4,
    /// Additive training-target noise.
    Noise = 5,
    /// Fractional Brownian motion increments.
    Fbm = 6,
    Terrain = 7,
    Heat = 8,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
