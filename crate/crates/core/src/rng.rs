//! Counter-based random streams.
//!
//! Every random draw in the simulator comes from a ChaCha stream seeded by a
//! hash of `(seed, domain, a, b)`, so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Distinct values keep unrelated draws independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Shapes = 1,
    Points = 2,
    Cameras = 3,
    Descriptors = 4,
    Dropout = 5,
    DescriptorNoise = 6,
    FineNoise = 7,
    Outliers = 8,
    QueryCameras = 9,
    FeatureFloor = 10,
    Weights = 11,
    Ransac = 12,
    Sampling = 13,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix_key(seed: u64, domain: Domain, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ domain as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b.rotate_left(17))
}

pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_key(seed, domain, a, b))
}
