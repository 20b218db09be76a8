//! Seeded generator streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream keyed by a seed
//! and a fixed stream index, so equal seeds never correlate different
//! consumers. Gaussian variates come from `rand_distr::StandardNormal`
//! (ziggurat) scaled by the target standard deviation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_DATA: u64 = 1;
pub const STREAM_FLIP: u64 = 2;
pub const STREAM_INIT: u64 = 3;
/// Test draws use `STREAM_TEST_BASE + shard`.
pub const STREAM_TEST_BASE: u64 = 1 << 32;
/// Random-instance generators used by diagnostics (gradient spot checks).
pub const STREAM_DIAG: u64 = 4;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn sci(x: f64) -> String {
    format!("{x:.16e}")
}
