//! Seed derivation and reproducible random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream whose seed is
//! derived from the master seed and a path of labels, e.g.
//! `("round", 3, "client", 17, "subsample")`. Adding a new component with a new
//! label never shifts the streams of existing components.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// One component of a seed-derivation path.
#[derive(Clone, Copy, Debug)]
pub enum Label<'a> {
    Str(&'a str),
    Index(u64),
}

impl<'a> From<&'a str> for Label<'a> {
    fn from(s: &'a str) -> Self {
        Label::Str(s)
    }
}

impl From<u64> for Label<'_> {
    fn from(i: u64) -> Self {
        Label::Index(i)
    }
}

impl From<usize> for Label<'_> {
    fn from(i: usize) -> Self {
        Label::Index(i as u64)
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn absorb(state: u64, word: u64) -> u64 {
    splitmix64(state ^ splitmix64(word))
}

/// Derives a child seed from `parent` and a label path.
pub fn derive_seed(parent: u64, path: &[Label<'_>]) -> u64 {
    let mut h = splitmix64(parent);
    for label in path {
        match *label {
            Label::Str(s) => {
                // tag + length keep ("ab","c") distinct from ("a","bc")
                h = absorb(h, 0x5354_5200 ^ s.len() as u64);
                for chunk in s.as_bytes().chunks(8) {
                    let mut buf = [0u8; 8];
                    buf[..chunk.len()].copy_from_slice(chunk);
                    h = absorb(h, u64::from_le_bytes(buf));
                }
            }
            Label::Index(i) => {
                h = absorb(h, 0x4944_5800);
                h = absorb(h, i);
            }
        }
    }
    h
}

/// Opens the random stream for `seed`.
pub fn stream(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

/// Shorthand for `stream(derive_seed(parent, path))`.
pub fn stream_for(parent: u64, path: &[Label<'_>]) -> StreamRng {
    stream(derive_seed(parent, path))
}

#[macro_export]
#[doc(hidden)]
macro_rules! labels {
    ($($l:expr),* $(,)?) => {
        &[$($crate::rng::Label::from($l)),*]
    };
}
