//! Run-level checks of agreement, validity, totality and completion
//! sequentiality.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::Digest;
use crate::netsim::{Event, RunOutcome};
use crate::protocol::Node;
use crate::{NodeId, Round};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub agreement: Vec<String>,
    pub validity: Vec<String>,
    pub totality: Vec<String>,
    pub sequentiality: Vec<String>,
    /// Violations raised by nodes themselves, and timeouts.
    pub runtime: Vec<String>,
}

impl InvariantReport {
    pub fn ok(&self) -> bool {
        self.agreement.is_empty()
            && self.validity.is_empty()
            && self.totality.is_empty()
            && self.sequentiality.is_empty()
            && self.runtime.is_empty()
    }

    pub fn merge_counts(&self, into: &mut ViolationCounts) {
        into.agreement += self.agreement.len() as u64;
        into.validity += self.validity.len() as u64;
        into.totality += self.totality.len() as u64;
        into.sequentiality += self.sequentiality.len() as u64;
        into.runtime += self.runtime.len() as u64;
    }

    pub fn first(&self) -> Option<&String> {
        [&self.agreement, &self.validity, &self.totality, &self.sequentiality, &self.runtime]
            .into_iter()
            .find_map(|v| v.first())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub agreement: u64,
    pub validity: u64,
    pub totality: u64,
    pub sequentiality: u64,
    pub runtime: u64,
}

impl ViolationCounts {
    pub fn total(&self) -> u64 {
        self.agreement + self.validity + self.totality + self.sequentiality + self.runtime
    }
}

/// Checks the event-level properties. `valid_upto` is the highest round of
/// an honest sender that must be delivered everywhere.
pub fn check_events(events: &[(u64, Event)], honest: &[bool], valid_upto: Round, outcome: &RunOutcome) -> InvariantReport {
    let mut rep = InvariantReport::default();
    if outcome.timed_out {
        rep.runtime.push(format!("step cap reached after {} steps", outcome.steps));
    }
    let mut broadcast: BTreeMap<(NodeId, Round), Digest> = BTreeMap::new();
    let mut delivered: BTreeMap<(NodeId, Round), BTreeMap<NodeId, Digest>> = BTreeMap::new();
    for (_, e) in events {
        match e {
            Event::Broadcast { sender, round, digest } => {
                broadcast.insert((*sender, *round), *digest);
            }
            Event::Deliver(d) => {
                delivered.entry((d.sender, d.round)).or_default().insert(d.node, d.digest);
            }
            Event::Violation { node, what } => rep.runtime.push(format!("{node}: {what}")),
        }
    }
    let honest_ids: Vec<NodeId> =
        honest.iter().enumerate().filter(|(_, h)| **h).map(|(i, _)| NodeId::from_index(i)).collect();
    for ((s, r), by_node) in &delivered {
        let digests: BTreeSet<&Digest> = by_node.values().collect();
        if digests.len() > 1 {
            rep.agreement.push(format!("{s} round {r}: {} distinct digests delivered", digests.len()));
        }
        if by_node.len() < honest_ids.len() {
            let missing: Vec<String> =
                honest_ids.iter().filter(|id| !by_node.contains_key(id)).map(|id| id.to_string()).collect();
            rep.totality.push(format!("{s} round {r}: not delivered by {}", missing.join(",")));
        }
        if honest[s.index()] {
            if let Some(b) = broadcast.get(&(*s, *r)) {
                if digests.iter().any(|d| *d != b) {
                    rep.validity.push(format!("{s} round {r}: delivered digest differs from broadcast"));
                }
            }
        }
    }
    for s in &honest_ids {
        for r in 1..=valid_upto {
            if !broadcast.contains_key(&(*s, r)) {
                rep.validity.push(format!("honest {s} never broadcast round {r}"));
                break;
            }
            let got = delivered.get(&(*s, r)).map_or(0, |m| m.len());
            if got < honest_ids.len() {
                rep.validity.push(format!("{s} round {r}: delivered by {got}/{} honest nodes", honest_ids.len()));
            }
        }
    }
    rep
}

/// Completion sequentiality against live node state: every delivered
/// round above 1 has its predecessor delivered, materialisable, and linked
/// by digest.
pub fn check_sequentiality(node: &Node, n: usize, rep: &mut InvariantReport) {
    for s in NodeId::all(n) {
        let prefix = node.delivered_prefix(s);
        if let Some((r, _)) = node.delivered_rounds(s).find(|(r, _)| *r > prefix) {
            rep.sequentiality.push(format!("{}: {s} round {r} delivered without round {}", node.id(), prefix + 1));
        }
        for u in 2..=prefix {
            let (Some(m), Some(prev)) = (node.materialize(s, u), node.materialize(s, u - 1)) else {
                rep.sequentiality.push(format!("{}: {s} round {u} or its predecessor not materialisable", node.id()));
                break;
            };
            if m.prev_digest() != Some(*prev.digest()) {
                rep.sequentiality.push(format!("{}: {s} round {u} does not link to delivered round {}", node.id(), u - 1));
                break;
            }
        }
    }
}
