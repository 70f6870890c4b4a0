//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha::ChaCha8Rng`)
//! keyed by the run seed. Independent consumers use separate ChaCha stream ids
//! so that adding draws in one place never shifts the draws seen by another:
//!
//! | stream | consumer                                                    |
//! |--------|-------------------------------------------------------------|
//! | 0      | weight init, shared layers, in parameter declaration order  |
//! | 1      | mini-batch shuffling, one permutation per epoch             |
//! | 2      | dropout masks, in forward execution order                   |
//! | 3      | temporal-encoding parameters (Time2Vec phases, projection)  |
//! | 4      | synthetic data generators used by tests and benches        |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Dropout = 2,
    Encoding = 3,
    Synthetic = 4,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Uniform draw in `[low, high)`.
pub fn uniform(rng: &mut StreamRng, low: f64, high: f64) -> f64 {
    low + (high - low) * rng.random::<f64>()
}

/// Standard normal draw (Box-Muller, one value per call).
pub fn standard_normal(rng: &mut StreamRng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut StreamRng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
