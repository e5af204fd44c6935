//! Counter-based random streams.
//!
//! Every conditional draw gets its own generator keyed by
//! `(seed, sweep, block, entity)`, so a sweep produces the same numbers no
//! matter how the per-user and per-item work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub(crate) enum Block {
    Init = 1,
    Classes = 2,
    Utilities = 3,
    UserFactors = 4,
    ItemFactors = 5,
    Coefficients = 6,
    ItemEffects = 7,
    BasisCoefs = 8,
    Weights = 9,
    Scales = 10,
    Rubrics = 11,
    Refresh = 12,
    Regenerate = 13,
}

pub(crate) fn stream(seed: u64, sweep: u64, block: Block, entity: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&sweep.to_le_bytes());
    key[16..24].copy_from_slice(&(block as u64).to_le_bytes());
    key[24..].copy_from_slice(&entity.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
