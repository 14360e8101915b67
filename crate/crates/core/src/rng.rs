//! Seed derivation. Every random draw in training comes from a ChaCha8
//! stream keyed by `(seed, purpose, epoch)` and selected by a stream id, so
//! any epoch can be replayed without carrying generator state forward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Oracle = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, purpose: Purpose, epoch: u64, stream: u64) -> Rng {
    let key = splitmix(splitmix(seed ^ splitmix(purpose as u64)) ^ epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}

pub fn seeded(seed: u64) -> Rng {
    derive(seed, Purpose::Init, 0, 0)
}
