//! Seed derivation tree.
//!
//! Every random stream in a run is keyed off the master seed by mixing in a
//! path of tags (round, language, prompt, ...). Streams never share a
//! generator, so adding a consumer in one branch does not perturb another.
//!
//! ```text
//! master
//! ├── "policy-init"                      seed policy weights
//! ├── "scenario" / language / prompt     judge targets
//! ├── "judge-noise" / round / prompt / k judge noise
//! ├── "generate" / round / prompt        candidate sampling
//! ├── "batch-order" / round              minibatch schedule
//! ├── "ema" / round / language / matrix  power-iteration init
//! ├── "consensus" / round                projection order
//! └── "random-filter" / round            random baseline scores
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, used to turn string tags into stable integers.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derive a child seed from `parent` and an ordered path of tags.
pub fn derive(parent: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(parent), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// Derive a child seed where the first tag is a stream name.
pub fn derive_named(parent: u64, name: &str, tags: &[u64]) -> u64 {
    let mut path = Vec::with_capacity(tags.len() + 1);
    path.push(hash_str(name));
    path.extend_from_slice(tags);
    derive(parent, &path)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
