//! Seed derivation. Every random stream in a run comes from one root seed,
//! keyed by a component name and a counter, so results never depend on the
//! order in which streams are created or on worker scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, component: &str, counter: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in component.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix(splitmix(seed ^ h).wrapping_add(counter))
}

pub fn stream(seed: u64, component: &str, counter: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, component, counter))
}

/// Seed for per-sample work within an epoch: keyed by (seed, component, epoch, index).
pub fn sample_seed(seed: u64, component: &str, epoch: u64, index: u64) -> u64 {
    derive_seed(derive_seed(seed, component, epoch), "sample", index)
}

pub fn sample_stream(seed: u64, component: &str, epoch: u64, index: u64) -> Rng {
    Rng::seed_from_u64(sample_seed(seed, component, epoch, index))
}
