//! Counter-keyed random streams.
//!
//! A stream is a ChaCha8 generator whose key is a digest of the master seed
//! and a domain label, and whose 64-bit stream id packs a block (sample size
//! or grid index) with a replicate index. Any replicate can be regenerated in
//! isolation, independent of scheduling.

use rand::rngs::ChaCha8Rng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub const POWER: &str = "power";
pub const CALIBRATION: &str = "calibration";

pub fn stream(master_seed: u64, domain: &str, block: u32, index: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"smartsize/v1");
    h.update(master_seed.to_le_bytes());
    h.update(domain.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream((u64::from(block) << 32) | u64::from(index));
    rng
}

/// Stream for replicate `rep` of a power point at sample size `n`.
pub fn replicate_stream(master_seed: u64, n: usize, rep: usize) -> ChaCha8Rng {
    stream(master_seed, POWER, block(n), block(rep))
}

/// Stream for dataset `rep` at calibration grid point `grid_index`.
pub fn calibration_stream(master_seed: u64, grid_index: usize, rep: usize) -> ChaCha8Rng {
    stream(master_seed, CALIBRATION, block(grid_index), block(rep))
}

fn block(v: usize) -> u32 {
    u32::try_from(v).expect("stream counters are limited to 32 bits")
}
