//! Amortized probabilistic multi-shot Byzantine reliable broadcast (APM-BRB).
//!
//! Every node broadcasts one message per round to a small committee sampled
//! from a public seed. Committee members endorse the message with signature
//! shares; a simple-majority certificate over round `r` is embedded in the
//! sender's round `r + 1` message, so each sender grows a certified chain.
//! A message is delivered once a chain of `phi` further certificates
//! extends it (the common path), or earlier when every node's next-round
//! message references it (the optimistic path).
//!
//! The crate is organised bottom-up:
//!
//! * [`crypto`] hashing, per-node signing and committee certificates behind a
//!   pluggable [`crypto::CertScheme`], with a deterministic keyed-hash provider.
//! * [`sampling`] parameter derivation, the public committee sampler and the
//!   probabilistic oracles used to validate the parameters.
//! * [`protocol`] the node state machine.
//! * [`netsim`] a deterministic discrete-event simulator of the random
//!   asynchronous network with Byzantine behaviours and an adversarial
//!   scheduler.
//! * [`bracha`] the classic echo/vote broadcast used as a baseline.
//! * [`harness`] experiment configuration, cost accounting, invariant
//!   checking and the acceptance suite driven by the `apm-brb` binary.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod bracha;
pub mod crypto;
pub mod harness;
pub mod netsim;
pub mod protocol;
pub mod sampling;

/// Identifier of a node, in `1..=n`.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    /// Zero-based position, for indexing per-node arrays.
    #[inline]
    pub fn index(self) -> usize {
        debug_assert!(self.0 >= 1, "node ids start at 1");
        (self.0 - 1) as usize
    }

    #[inline]
    pub fn from_index(index: usize) -> Self {
        NodeId(index as u32 + 1)
    }

    /// All ids of an `n`-node system in ascending order.
    pub fn all(n: usize) -> impl Iterator<Item = NodeId> + Clone {
        (1..=n as u32).map(NodeId)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// Protocol round, starting at 1.
pub type Round = u64;
