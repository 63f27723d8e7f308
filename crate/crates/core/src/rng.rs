//! Seeded, splittable random streams.
//!
//! Every consumer of randomness receives its own [`RngStream`], identified by a
//! `(seed, stream_id)` pair. Streams with the same pair replay the same
//! sequence; distinct stream ids are independent ChaCha8 streams under the
//! same key. Pipelines derive stream ids from what they are randomizing
//! (purpose, test sample, partner class) so results do not depend on the order
//! or the thread in which work is executed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Occupies the top byte of a derived stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Mixup = 1,
    Tta = 2,
    Mcdo = 3,
    Training = 4,
    Dataset = 5,
    Split = 6,
}

const SAMPLE_BITS: u32 = 40;
const CLASS_BITS: u32 = 16;

/// Packs `(purpose, sample id, class)` into one stream id.
///
/// Sample ids are taken modulo 2^40 and classes modulo 2^16.
pub fn stream_id(purpose: Purpose, sample_id: u64, class: usize) -> u64 {
    let sample = sample_id & ((1u64 << SAMPLE_BITS) - 1);
    let class = (class as u64) & ((1u64 << CLASS_BITS) - 1);
    ((purpose as u64) << 56) | (sample << CLASS_BITS) | class
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn for_purpose(seed: u64, purpose: Purpose, sample_id: u64, class: usize) -> Self {
        Self::new(seed, stream_id(purpose, sample_id, class))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
