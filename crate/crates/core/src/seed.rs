//! Counter-based random stream derivation.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(master_seed, purpose, indices...)`. Streams never depend on the order in
//! which they are created, so work split across any number of threads draws
//! exactly the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn stream(&self, purpose: Purpose, indices: &[u64]) -> Stream {
        derive_stream(self, purpose, indices)
    }

    /// A child spec whose streams are disjoint from this one's.
    pub fn child(&self, purpose: Purpose, indices: &[u64]) -> SeedSpec {
        SeedSpec::new(mix_key(self.master_seed, purpose, indices)[0])
    }
}

/// What a stream is used for. The tag is part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Environment,
    Filter,
    PolicyInit,
    RandomInit,
    Sample,
    Rollout,
    Imagine,
    Replay,
    ModelFit,
    CriticInit,
    ActorInit,
    ModelInit,
    Act,
    Evaluation,
    Test,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Environment => 0x454e_5649,
            Purpose::Filter => 0x4649_4c54,
            Purpose::PolicyInit => 0x504f_4c49,
            Purpose::RandomInit => 0x5241_4e44,
            Purpose::Sample => 0x5341_4d50,
            Purpose::Rollout => 0x524f_4c4c,
            Purpose::Imagine => 0x494d_4147,
            Purpose::Replay => 0x5245_504c,
            Purpose::ModelFit => 0x4d4f_4446,
            Purpose::CriticInit => 0x4352_4954,
            Purpose::ActorInit => 0x4143_544f,
            Purpose::ModelInit => 0x4d4f_4449,
            Purpose::Act => 0x4143_5420,
            Purpose::Evaluation => 0x4556_414c,
            Purpose::Test => 0x5445_5354,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix_key(seed: u64, purpose: Purpose, indices: &[u64]) -> [u64; 4] {
    let mut acc = splitmix64(seed ^ splitmix64(purpose.tag()));
    // length is folded in so that [1] and [1, 0] are different keys
    acc = splitmix64(acc ^ (indices.len() as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    for &i in indices {
        acc = splitmix64(acc ^ splitmix64(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    let mut out = [0u64; 4];
    for (j, slot) in out.iter_mut().enumerate() {
        acc = splitmix64(acc.wrapping_add(j as u64));
        *slot = acc;
    }
    out
}

/// Deterministic stream for `(spec, purpose, indices)`.
pub fn derive_stream(spec: &SeedSpec, purpose: Purpose, indices: &[u64]) -> Stream {
    let words = mix_key(spec.master_seed, purpose, indices);
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
