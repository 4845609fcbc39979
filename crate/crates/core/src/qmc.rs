//! Low-discrepancy sequences and keyed random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

/// Radical inverse of `index` in the given base.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    r
}

/// Halton point with a Cranley-Patterson rotation; coordinates in `[0, 1)`.
#[derive(Clone, Debug)]
pub struct Halton {
    shift: Vec<f64>,
    first_prime: usize,
}

impl Halton {
    pub fn new(dim: usize, seed: u64, stage: &str) -> Self {
        Self::skipping(dim, 0, seed, stage)
    }

    /// Halton sequence on the primes after the first `skip`.
    pub fn skipping(dim: usize, skip: usize, seed: u64, stage: &str) -> Self {
        assert!(dim + skip <= PRIMES.len(), "Halton dimension limited to {}", PRIMES.len() - skip);
        let shift = (0..dim).map(|j| if seed == 0 { 0.0 } else { unit_hash(stream_key(seed, stage, j as u64)) }).collect();
        Self { shift, first_prime: skip }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn point(&self, index: u64) -> Vec<f64> {
        self.shift
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let v = radical_inverse(index + 1, PRIMES[self.first_prime + j]) + s;
                v - v.floor()
            })
            .collect()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Key for the random stream `(seed, stage, index)`.
pub fn stream_key(seed: u64, stage: &str, index: u64) -> u64 {
    let mut h = splitmix(seed);
    for b in stage.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

pub fn unit_hash(key: u64) -> f64 {
    (splitmix(key) >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic generator for the stream `(seed, stage, index)`.
pub fn stream_rng(seed: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(seed, stage, index))
}
