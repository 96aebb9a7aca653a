//! Deterministic seed derivation for per-item random streams.

/// Mixes a base seed with two stream identifiers (splitmix64 finalizers), so
/// e.g. every (shape, slice) pair gets an independent, order-free stream.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    };
    mix(mix(mix(base.wrapping_add(0x9e3779b97f4a7c15)) ^ a) ^ b.wrapping_add(0x632be59bd9b4e019))
}
