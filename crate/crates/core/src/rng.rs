//! Addressable random streams.
//!
//! Every random draw in the workbench comes from a stream identified by
//! `(master_seed, stream_id)`. Work items derive their own stream from their
//! index, so results never depend on scheduling or thread count.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream-id namespaces. The high bits select the purpose, the low 40 bits
/// carry an index within it.
pub mod domain {
    pub const DATASET: u32 = 0;
    pub const GOAL_SPLIT: u32 = 1;
    pub const EVAL_ENVS: u32 = 2;
    pub const EVAL_CONTEXT: u32 = 3;
    pub const EVAL_ACTIONS: u32 = 4;
    pub const INIT: u32 = 5;
    pub const SHUFFLE: u32 = 6;
    pub const ORACLE: u32 = 7;
}

pub fn stream_id(domain: u32, index: u64) -> u64 {
    debug_assert!(index < 1 << 40);
    ((domain as u64) << 40) | index
}

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self { master_seed, stream_id, inner }
    }

    pub fn in_domain(master_seed: u64, domain: u32, index: u64) -> Self {
        Self::new(master_seed, stream_id(domain, index))
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
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
