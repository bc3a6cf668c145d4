//! Named, mutually independent random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub type StreamRng = ChaCha8Rng;

/// Every stream a run may ask for.
pub const STREAM_NAMES: [&str; 6] = [
    "env",
    "init",
    "action_noise",
    "augment",
    "sample",
    "intervention",
];

fn digest_seed(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

fn check(name: &str) -> Result<()> {
    if STREAM_NAMES.contains(&name) {
        Ok(())
    } else {
        Err(LabError::Config(format!(
            "unknown rng stream '{name}' (expected one of {STREAM_NAMES:?})"
        )))
    }
}

/// Generator seeded by `sha256(root_seed ‖ name)`.
pub fn rng_stream(root_seed: u64, name: &str) -> Result<StreamRng> {
    check(name)?;
    Ok(ChaCha8Rng::from_seed(digest_seed(&[
        &root_seed.to_le_bytes(),
        name.as_bytes(),
    ])))
}

/// A child of stream `name` keyed by `index`, for one-off draws (evaluation
/// batches, evaluation episodes) that must not perturb the parent stream.
pub fn rng_substream(root_seed: u64, name: &str, index: u64) -> Result<StreamRng> {
    check(name)?;
    Ok(ChaCha8Rng::from_seed(digest_seed(&[
        &root_seed.to_le_bytes(),
        name.as_bytes(),
        &index.to_le_bytes(),
    ])))
}
