//! Counter-based random numbers for Monte-Carlo runs.
//!
//! Every draw is a pure function of `(seed, path, step, slot)`, so ensembles
//! are bitwise reproducible regardless of how paths are sharded across
//! workers.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic u64 at a (seed, path, step, slot) coordinate.
#[inline]
pub fn u64_at(seed: u64, path: u64, step: u64, slot: u64) -> u64 {
    // Fold the coordinates through successive splitmix rounds; each round
    // fully avalanches, so distinct coordinates give independent streams.
    let mut z = splitmix(seed);
    z = splitmix(z ^ path.wrapping_mul(0xd6e8_feb8_6659_fd93));
    z = splitmix(z ^ step.wrapping_mul(0xca5a_8263_9512_157f));
    splitmix(z ^ slot)
}

/// Uniform draw in (0, 1]; never returns 0 so `ln` is always finite.
#[inline]
pub fn uniform_at(seed: u64, path: u64, step: u64, slot: u64) -> f64 {
    let bits = u64_at(seed, path, step, slot) >> 11; // 53 bits
    (bits as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw via Box-Muller (cosine branch).
#[inline]
pub fn normal_at(seed: u64, path: u64, step: u64, slot: u64) -> f64 {
    let u1 = uniform_at(seed, path, step, 2 * slot);
    let u2 = uniform_at(seed, path, step, 2 * slot + 1);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
