//! Seed splitting.
//!
//! A single root seed fans out into independent streams. Each stream seed is
//! `splitmix64(root ^ splitmix64(tag) ^ splitmix64(index + 1))`, where `tag` is a
//! fixed per-stream constant and `index` distinguishes repeated draws within a
//! stream (iteration number, trial number). The resulting `u64` seeds a
//! ChaCha8 generator, which is portable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Corruption,
    BalancedSample,
    TrainInit,
    TrainShuffle,
    ValidationSample,
    CheckpointSample,
    RandomBaseline,
    Synthetic,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Corruption => 0x636f_7272_7570_7401,
            Stream::BalancedSample => 0x6261_6c61_6e63_6502,
            Stream::TrainInit => 0x7472_6169_6e69_6e03,
            Stream::TrainShuffle => 0x7368_7566_666c_6504,
            Stream::ValidationSample => 0x7661_6c73_616d_7005,
            Stream::CheckpointSample => 0x636b_7074_7361_6d06,
            Stream::RandomBaseline => 0x7261_6e64_6f6d_6207,
            Stream::Synthetic => 0x7379_6e74_6865_7408,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(stream.tag()) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng(root: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, stream, index))
}
