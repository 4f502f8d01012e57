//! Sub-seed derivation. Every random consumer draws from
//! `top_level_seed + offset` with the fixed offsets below.

pub const DATA: u64 = 0;
pub const INIT: u64 = 1;
pub const BATCHES: u64 = 2;
pub const NOISE: u64 = 3;
pub const DOWNSAMPLE: u64 = 4;

pub fn derive(seed: u64, offset: u64) -> u64 {
    seed.wrapping_add(offset)
}
