//! Seeded RNG plumbing. Every random draw in the crate flows through a
//! [`MowRng`] derived from a root seed and a domain label, so whole runs
//! replay bit-identically.

use rand::{Rng as _, SeedableRng};

pub type MowRng = rand_chacha::ChaCha12Rng;

/// Splitmix64 finalizer; good avalanche for seed derivation.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive a sub-seed from a root seed and a domain label.
pub fn derive_seed(root: u64, domain: &str) -> u64 {
    // FNV-1a over the label, mixed with the root.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in domain.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(root ^ splitmix64(h))
}

/// A fresh stream for `domain`, deterministic in `(root, domain)`.
pub fn seeded(root: u64, domain: &str) -> MowRng {
    MowRng::seed_from_u64(derive_seed(root, domain))
}

/// Standard normal draw (Box-Muller); equally distributed on every platform.
pub fn randn(rng: &mut MowRng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let v: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u.ln()).sqrt();
        let z = r * (2.0 * std::f64::consts::PI * v).cos();
        if z.is_finite() {
            return z;
        }
    }
}

/// Serializable snapshot of a ChaCha stream (seed + position).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

pub fn save_state(rng: &MowRng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore_state(state: &RngState) -> MowRng {
    let mut rng = MowRng::from_seed(state.seed);
    rng.set_word_pos(state.word_pos);
    rng
}
