//! Seeded random streams.
//!
//! All randomness flows through ChaCha8 generators. Independent streams for
//! per-sample work are derived by hashing `(seed, indices...)`, so the result
//! of a sample never depends on which worker processed it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with a path of indices into a new 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn derived(seed: u64, path: &[u64]) -> Rng {
    seeded(derive_seed(seed, path))
}

/// Snapshot of a generator as 7 `u64` words:
/// 4 seed words, the stream id, and the 128-bit word position (low, high).
pub fn snapshot(rng: &Rng) -> [u64; 7] {
    let seed = rng.get_seed();
    let mut out = [0u64; 7];
    for (i, chunk) in seed.chunks_exact(8).enumerate() {
        out[i] = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    out[4] = rng.get_stream();
    let pos = rng.get_word_pos();
    out[5] = pos as u64;
    out[6] = (pos >> 64) as u64;
    out
}

pub fn restore(words: &[u64]) -> Result<Rng> {
    if words.len() != 7 {
        return Err(Error::BadConfig(format!(
            "rng snapshot needs 7 words, got {}",
            words.len()
        )));
    }
    let mut seed = [0u8; 32];
    for (i, w) in words[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(words[4]);
    rng.set_word_pos(words[5] as u128 | ((words[6] as u128) << 64));
    Ok(rng)
}
