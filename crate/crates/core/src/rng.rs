//! Deterministic seed derivation.
//!
//! Every consumer of randomness (data order, mixup coefficients, attack
//! random starts, initialization) gets its own stream derived from the root
//! seed and a label, so changing how one consumer draws numbers never shifts
//! another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Child seed for `label` and `index` under `root`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = splitmix(root);
    for b in label.bytes() {
        h = splitmix(h ^ b as u64);
    }
    splitmix(h ^ index.wrapping_mul(0xA24B_AED4_963E_E407))
}

pub fn rng_for(root: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label, index))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
