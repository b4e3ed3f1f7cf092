//! Keyed random streams.
//!
//! Every random decision in a simulation run is drawn from a stream whose key
//! is derived from `(master_seed, replicate, stage, index)` by repeated
//! mixing. Keys are plain integers, so any single replicate, imputation chain
//! or bootstrap resample can be re-run in isolation and the results never
//! depend on how work was scheduled across threads.
//!
//! ```text
//! root(master_seed)
//!   └─ derive(REPLICATE, r)
//!        ├─ derive(GENERATE, attempt)
//!        ├─ derive(MISSINGNESS, attempt)
//!        └─ derive(STRATEGY, hash(strategy id))
//!             ├─ derive(IMPUTATION, 0) ─ derive(CHAIN, k)
//!             ├─ derive(MATCHING, k)
//!             └─ derive(BOOTSTRAP, b)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every stream.
pub type SimRng = ChaCha8Rng;

/// Stage tags used as the first component of [`StreamKey::derive`].
pub mod stage {
    pub const REPLICATE: u64 = 1;
    pub const GENERATE: u64 = 2;
    pub const MISSINGNESS: u64 = 3;
    pub const STRATEGY: u64 = 4;
    pub const IMPUTATION: u64 = 5;
    pub const CHAIN: u64 = 6;
    pub const MATCHING: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
    pub const RESAMPLE: u64 = 9;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn root(master_seed: u64) -> Self {
        StreamKey(splitmix64(master_seed))
    }

    /// Child key for `(stage, index)`. Distinct pairs give unrelated keys.
    pub fn derive(self, stage: u64, index: u64) -> Self {
        let a = splitmix64(self.0 ^ splitmix64(stage.wrapping_mul(0xD6E8_FEB8_6659_FD93)));
        StreamKey(splitmix64(a ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F))))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> SimRng {
        SimRng::seed_from_u64(self.0)
    }
}

/// Stable 64-bit FNV-1a hash, used to key strategy streams by their id.
pub fn stable_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
