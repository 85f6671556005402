//! Deterministic seed derivation.
//!
//! Parallel work units (chains, grid cells, MC batches) each get a seed derived
//! from the master seed and a unit index, so results are independent of
//! scheduling order.

/// SplitMix64 output function.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from `master` for work unit `index`.
pub fn derive(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x517c_c1b7_2722_0a95)))
}

/// Two-level derivation for nested work units.
pub fn derive2(master: u64, outer: u64, inner: u64) -> u64 {
    derive(derive(master, outer), inner)
}

/// The crate-standard RNG, seeded.
pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
