//! Named sub-seeds and the deterministic RNG used everywhere.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for a named stage from the root seed, so
/// stages can be re-run on their own and still see the same randomness.
pub fn sub_seed(root: u64, stage: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&root.to_le_bytes());
    h.write(stage.as_bytes());
    h.finish()
}

/// 64-bit FNV-1a of raw bytes. Stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// `Write` sink that hashes everything written to it.
#[derive(Default)]
pub struct HashingWriter(FnvHasher);

impl HashingWriter {
    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}

impl std::io::Write for HashingWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}
