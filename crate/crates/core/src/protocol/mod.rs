//! The APM-BRB node.
//!
//! A [`Node`] owns all of one process's protocol state. It reacts to one
//! [`Wire`] input at a time and writes its sends and delivery events to an
//! outbox. Nodes built with a [`SendPlan`] also run the sending routine;
//! nodes without one only participate (sign, serve fetches, deliver).

use std::collections::{HashMap, HashSet};
use std::hash::{BuildHasherDefault, Hasher};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{CertScheme, Digest, NodeSigner};
use crate::sampling::{CommitteeParams, CommitteeTable};
use crate::{NodeId, Round};

mod delivery;
mod fetch;
pub mod message;
mod node;

pub use message::{BroadcastMessage, FetchMode, FetchRequest, MessageBody, Trigger, Wire};
pub use node::{Node, NodeStats};

/// Hasher for keys that are already uniformly distributed (digests).
#[derive(Default, Clone, Copy)]
pub struct PassThroughHasher(u64);

impl Hasher for PassThroughHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = self.0.rotate_left(8) ^ b as u64;
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 ^= v;
    }
}

pub type DigestMap<V> = HashMap<Digest, V, BuildHasherDefault<PassThroughHasher>>;
pub type DigestSet = HashSet<Digest, BuildHasherDefault<PassThroughHasher>>;

/// Static configuration of one node.
#[derive(Clone, Debug)]
pub struct NodeConfig {
    pub id: NodeId,
    pub params: CommitteeParams,
    pub committees: Arc<CommitteeTable>,
    pub scheme: Arc<dyn CertScheme>,
    pub signer: NodeSigner,
    /// Mutation switch for sensitivity testing: accept conflicting
    /// same-round messages instead of ignoring them. Never set in normal
    /// operation.
    pub skip_equivocation_guard: bool,
}

/// What an honest sender broadcasts: rounds `1..=rounds`, each with a
/// pseudo-random payload of `payload_len` bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendPlan {
    pub rounds: Round,
    pub payload_len: usize,
    pub payload_seed: u64,
}

impl SendPlan {
    pub fn payload(&self, sender: NodeId, round: Round) -> Arc<[u8]> {
        payload_bytes(self.payload_seed, sender, round, self.payload_len, 0)
    }
}

/// Deterministic payload bytes; `variant` separates alternative payloads
/// for the same slot.
pub fn payload_bytes(seed: u64, sender: NodeId, round: Round, len: usize, variant: u64) -> Arc<[u8]> {
    let mix = seed
        ^ (sender.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ round.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ variant.wrapping_mul(0x1656_67B1_9E37_79F9);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let mut buf = vec![0u8; len];
    rng.fill_bytes(&mut buf);
    buf.into()
}
