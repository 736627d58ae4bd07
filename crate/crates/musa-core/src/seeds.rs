//! Seed derivation.
//!
//! All randomness in a run flows from one root seed. Each purpose gets a
//! fixed offset so that, e.g., changing the batch seed never perturbs the
//! network initialization:
//!
//! - geometry (wall pool, surface sampling): root + 1
//! - placement (centers, skeleton seeds):    root + 2
//! - batch (collocation, per-CV draws):      root + 3
//! - init (network parameters):              root + 4
//!
//! Per-item streams (one per control volume, one per skeleton seed, ...)
//! are derived from the purpose seed with [`substream`].

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub root: u64,
}

impl SeedPlan {
    pub fn new(root: u64) -> Self {
        SeedPlan { root }
    }

    pub fn geometry(&self) -> u64 {
        self.root.wrapping_add(1)
    }

    pub fn placement(&self) -> u64 {
        self.root.wrapping_add(2)
    }

    pub fn batch(&self) -> u64 {
        self.root.wrapping_add(3)
    }

    pub fn init(&self) -> u64 {
        self.root.wrapping_add(4)
    }
}

/// SplitMix64 step; the standard 64-bit mixer.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed for item `index` under `purpose_seed`.
pub fn substream(purpose_seed: u64, index: u64) -> u64 {
    splitmix64(purpose_seed ^ splitmix64(index))
}

/// Deterministic RNG used throughout the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
