//! Seed derivation. Every random stream in a run is a pure function of the
//! global seed and a tuple of integer coordinates, never of thread
//! scheduling or wall-clock time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for different purposes independent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Sampling = 2,
    Corpus = 3,
    Partition = 4,
    Stream = 5,
    SubPartition = 6,
    Eval = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a purpose tag and coordinates into a new 64-bit seed.
pub fn derive(seed: u64, purpose: Purpose, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ (purpose as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x1000_0000_01B3)));
    }
    h
}

pub fn rng(seed: u64, purpose: Purpose, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, purpose, coords))
}
