//! Every random draw descends from one root seed through named sub-streams,
//! so re-running one stage never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const CORPUS: &str = "corpus";
pub const GAN_INIT: &str = "gan-init";
pub const GAN_BATCHES: &str = "gan-batches";
pub const S2D_INIT: &str = "s2d-init";
pub const S2D_BATCHES: &str = "s2d-batches";

pub type StreamRng = ChaCha8Rng;

/// Generator for sub-stream `name` of `root`.
pub fn stream(root: u64, name: &str) -> StreamRng {
    ChaCha8Rng::from_seed(stream_seed(root, name))
}

/// Derives a child `u64` seed, e.g. one per generated sequence.
pub fn child_seed(root: u64, name: &str, index: u64) -> u64 {
    let s = stream_seed(root, &format!("{name}/{index}"));
    u64::from_le_bytes(s[..8].try_into().unwrap())
}

fn stream_seed(root: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}
