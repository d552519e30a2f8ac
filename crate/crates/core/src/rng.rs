//! Counter-addressed random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream keyed by
//! `(seed, counter)`. A replication or bootstrap draw therefore owns its
//! stream outright, and results never depend on scheduling order or on the
//! number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Returns the stream identified by `(seed, counter)`.
pub fn stream(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

/// SplitMix64 finaliser; used to derive child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of child `index` under `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(mix64(base) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

/// Fills `out` with independent standard normals from stream `(seed, counter)`.
pub fn fill_standard_normal(seed: u64, counter: u64, out: &mut [f64]) {
    let mut rng = stream(seed, counter);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}
