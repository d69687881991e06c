//! Counter-based RNG substreams.
//!
//! Every simulation stage derives its own seed from a master seed and a tuple
//! of integer tags via SplitMix64 mixing. Trials therefore get statistically
//! independent streams that do not depend on scheduling or thread count, which
//! is what makes parallel experiment runs byte-reproducible.

use rand::rngs::StdRng;
use rand::SeedableRng;

/// Pipeline stages that consume randomness. Each (master, tags..., stage)
/// tuple maps to an independent substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Partition,
    Bootstrap,
    Heldout,
    Fit,
    Mc,
}

impl Stage {
    pub fn tag(self) -> u64 {
        match self {
            Stage::Data => 0x01,
            Stage::Partition => 0x02,
            Stage::Bootstrap => 0x03,
            Stage::Heldout => 0x04,
            Stage::Fit => 0x05,
            Stage::Mc => 0x06,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with integer tags into a single substream seed.
pub fn substream_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x6a09_e667_f3bc_c908;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
        out ^= splitmix64(&mut state);
    }
    out
}

/// RNG for a (master seed, n, trial, stage) substream.
pub fn trial_rng(master: u64, n: u64, trial: u64, stage: Stage) -> StdRng {
    StdRng::seed_from_u64(substream_seed(master, &[n, trial, stage.tag()]))
}

/// RNG keyed by an arbitrary tag tuple.
pub fn tagged_rng(master: u64, tags: &[u64]) -> StdRng {
    StdRng::seed_from_u64(substream_seed(master, tags))
}
