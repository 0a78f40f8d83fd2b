//! Named, independently seeded random streams.
//!
//! Each consumer of randomness (partitioning, init, shuffling, adversity)
//! derives its generator from `(run seed, stream, keys...)`, so reseeding one
//! stream never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Partition,
    Init,
    Shuffle,
    Adversity,
    Poison,
    PacketLoss,
    Drop,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Partition => 0x7061_7274,
            Stream::Init => 0x696e_6974,
            Stream::Shuffle => 0x7368_7566,
            Stream::Adversity => 0x6164_7673,
            Stream::Poison => 0x706f_6973,
            Stream::PacketLoss => 0x6c6f_7373,
            Stream::Drop => 0x6472_6f70,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed ^ splitmix64(stream.tag()));
    for &k in keys {
        state = splitmix64(state ^ splitmix64(k.wrapping_add(0x51_7cc1_b727_220a)));
    }
    ChaCha8Rng::seed_from_u64(state)
}
