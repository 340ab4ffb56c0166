//! Seeded RNG substreams.
//!
//! Every random step in the pipeline draws from a substream derived from the
//! master seed and a human-readable label (for example
//! `"itemimp/chain/3"`). Labels are recorded in run reports so any draw can
//! be traced back, and the derivation is independent of execution order, so
//! parallel and serial runs produce identical output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Derive a named substream from the master seed.
pub fn substream(master_seed: u64, label: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix(master_seed, label))
}

/// Stable 64-bit mix of the master seed and a label.
///
/// FNV-1a over the label bytes folded with the seed, finished with the
/// SplitMix64 avalanche. Not cryptographic; only stability and dispersion
/// matter here.
fn mix(master_seed: u64, label: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

    let mut hash = FNV_OFFSET ^ master_seed;
    for byte in label.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    splitmix64(hash)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
