//! Deterministic sub-seed derivation.
//!
//! Every random choice in the pipeline pulls its seed from the run seed plus
//! a stream of context words (epoch, dialogue index, operator tag), so any
//! two runs with the same config produce identical randomness.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &word in stream {
        state = splitmix64(state ^ word.wrapping_mul(GOLDEN));
    }
    state
}
