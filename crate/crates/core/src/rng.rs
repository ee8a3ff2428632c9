//! Every random draw descends from one root seed through a named stream, so
//! each consumer can be replayed on its own.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Features = 1,
    Init = 2,
    Sampling = 3,
    Negatives = 4,
    Clustering = 5,
    Split = 6,
    Synth = 7,
}

pub fn stream(root: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(which as u64);
    rng
}

/// A stream keyed additionally by `keys`, e.g. one per evaluation case.
pub fn derived(root: u64, which: Stream, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(root);
    for &k in keys {
        h = splitmix(h ^ k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    rng.set_stream(which as u64);
    rng
}

/// A 64-bit seed mixed from `root` and `keys`.
pub fn derive_seed(root: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(root), |h, &k| splitmix(h ^ k))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
