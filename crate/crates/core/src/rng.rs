//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha8 stream whose 64-bit seed is the
//! first eight bytes (little endian) of
//! `SHA-256(master_seed_le || kind_tag || 0x00 || key)`. A stream therefore
//! depends only on the master seed, the purpose and the key (usually a
//! sample id), never on scheduling or on how many draws other streams made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Purpose of a derived stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Init,
    Shuffle,
    TextAugment,
    ImageAugment,
    Generate,
    Render,
    TestNoise,
}

impl StreamKind {
    pub fn tag(self) -> &'static str {
        match self {
            StreamKind::Init => "init",
            StreamKind::Shuffle => "shuffle",
            StreamKind::TextAugment => "text-augment",
            StreamKind::ImageAugment => "image-augment",
            StreamKind::Generate => "generate",
            StreamKind::Render => "render",
            StreamKind::TestNoise => "test-noise",
        }
    }
}

pub fn derive_seed(master: u64, kind: StreamKind, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(kind.tag().as_bytes());
    h.update([0u8]);
    h.update(key.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))
}

pub fn derive(master: u64, kind: StreamKind, key: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, kind, key))
}

/// Master seed for one training epoch, so each epoch draws fresh augmentations.
pub fn epoch_seed(master: u64, epoch: usize) -> u64 {
    derive_seed(master, StreamKind::Shuffle, &format!("epoch-{epoch}"))
}
