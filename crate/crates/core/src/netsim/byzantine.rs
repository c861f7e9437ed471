//! Byzantine behaviours. Each wraps (or replaces) an honest [`Node`] and is
//! kept entirely outside the honest code path.

use std::any::Any;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CostKind, CostTag, Outbox, Process};
use crate::crypto::{Certificate, Digest, SignatureShare};
use crate::protocol::{payload_bytes, BroadcastMessage, FetchMode, FetchRequest, MessageBody, Node, SendPlan, Wire};
use crate::{NodeId, Round};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "behavior", rename_all = "snake_case")]
pub enum Behavior {
    /// Sends nothing at all.
    Silent,
    /// Runs the protocol but only talks to `targets`.
    SelectiveSend { targets: Vec<NodeId> },
    /// Runs the protocol but ships its own messages with forged
    /// certificates and emits invalid shares.
    GarbageCerts,
    /// Builds two conflicting messages per round and tries to grow both.
    Equivocator,
    /// Follows the protocol; only its bits are excluded from honest cost.
    Cooperative,
}

/// Which nodes are corrupted and how.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultProfile {
    pub byzantine: Vec<(NodeId, Behavior)>,
}

impl FaultProfile {
    pub fn none() -> Self {
        FaultProfile::default()
    }

    pub fn behavior_of(&self, id: NodeId) -> Option<&Behavior> {
        self.byzantine.iter().find(|(b, _)| *b == id).map(|(_, b)| b)
    }

    pub fn is_byzantine(&self, id: NodeId) -> bool {
        self.behavior_of(id).is_some()
    }
}

/// A corrupted process.
pub struct ByzantineNode {
    id: NodeId,
    kind: Kind,
}

enum Kind {
    Silent,
    Selective { inner: Box<Node>, targets: Vec<bool> },
    Garbage { inner: Box<Node>, rng: Box<ChaCha8Rng>, forged: Vec<(Digest, Arc<BroadcastMessage>)> },
    Equivocator(Box<Equivocator>),
}

impl ByzantineNode {
    /// `inner` must be built with the node's real configuration; `plan` is
    /// what the node would broadcast if it were honest.
    pub fn new(behavior: &Behavior, inner: Node, plan: SendPlan, seed: u64) -> Self {
        let id = inner.id();
        let n = inner.config().params.n;
        let kind = match behavior {
            Behavior::Silent => Kind::Silent,
            Behavior::Cooperative => panic!("cooperative nodes are plain nodes marked byzantine"),
            Behavior::SelectiveSend { targets } => {
                let mut mask = vec![false; n];
                for t in targets {
                    mask[t.index()] = true;
                }
                Kind::Selective { inner: Box::new(inner), targets: mask }
            }
            Behavior::GarbageCerts => {
                Kind::Garbage { inner: Box::new(inner), rng: Box::new(ChaCha8Rng::seed_from_u64(seed)), forged: Vec::new() }
            }
            Behavior::Equivocator => Kind::Equivocator(Box::new(Equivocator::new(inner, plan))),
        };
        ByzantineNode { id, kind }
    }

    fn after(&mut self, out: &mut Outbox<Wire>) {
        match &mut self.kind {
            Kind::Silent | Kind::Equivocator(_) => {}
            Kind::Selective { targets, .. } => out.sends.retain(|(to, ..)| targets[to.index()]),
            Kind::Garbage { inner, rng, forged } => {
                let me = inner.id();
                let k = inner.config().scheme.k_bytes();
                for (_, wire, bytes, _) in out.sends.iter_mut() {
                    let changed = match wire {
                        Wire::Broadcast(m) if m.sender() == me => {
                            *m = forge(inner, rng, forged, m);
                            true
                        }
                        Wire::FetchReply { msg, cert, .. } if msg.sender() == me => {
                            *msg = forge(inner, rng, forged, msg);
                            if let Some(c) = cert {
                                *c = garbage_cert(rng, *msg.digest(), me, msg.round(), c.shares().len());
                            }
                            true
                        }
                        Wire::ChainReply(m) if m.sender() == me => {
                            *m = forge(inner, rng, forged, m);
                            true
                        }
                        Wire::Share { share, .. } => {
                            share.share_bytes = random_digest(rng, share.share_bytes.len());
                            true
                        }
                        _ => false,
                    };
                    if changed {
                        *bytes = wire.accounted_len(k) as u64;
                    }
                }
            }
        }
    }
}

fn random_digest(rng: &mut ChaCha8Rng, len: usize) -> Digest {
    let mut b = [0u8; 32];
    rng.fill_bytes(&mut b);
    Digest::from_slice(&b[..len]).expect("valid length")
}

fn garbage_cert(rng: &mut ChaCha8Rng, digest: Digest, sender: NodeId, round: Round, width: usize) -> Certificate {
    let shares = (1..=width.max(1) as u32).map(|j| (NodeId(j), random_digest(rng, digest.len()))).collect();
    Certificate::from_parts(digest, sender, round, shares)
}

/// Re-signed copy of an own message with every certificate replaced by
/// garbage. The same honest message always maps to the same forgery.
fn forge(
    inner: &Node,
    rng: &mut ChaCha8Rng,
    forged: &mut Vec<(Digest, Arc<BroadcastMessage>)>,
    m: &Arc<BroadcastMessage>,
) -> Arc<BroadcastMessage> {
    if let Some((_, f)) = forged.iter().find(|(d, _)| d == m.digest()) {
        return f.clone();
    }
    let width = inner.config().params.threshold();
    let b = m.body();
    let prev_cert = b.prev_cert.as_ref().map(|c| garbage_cert(rng, *c.message_digest(), c.sender(), c.round(), width));
    let prev_set = b
        .prev_set
        .iter()
        .map(|c| garbage_cert(rng, *c.message_digest(), c.sender(), c.round(), width))
        .collect();
    let triggers = b
        .triggers
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let r = b.round + 7;
            let d = random_digest(rng, m.digest().len());
            Some((garbage_cert(rng, d, NodeId::from_index(j), r, width), r))
        })
        .collect();
    let body = MessageBody { prev_cert, prev_set, triggers, ..b.clone() };
    let cfg = inner.config();
    let f = BroadcastMessage::new(cfg.scheme.as_ref(), &cfg.signer, body);
    forged.push((*m.digest(), f.clone()));
    f
}

impl Process<Wire> for ByzantineNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn init(&mut self, out: &mut Outbox<Wire>) {
        match &mut self.kind {
            Kind::Silent => {}
            Kind::Selective { inner, .. } | Kind::Garbage { inner, .. } => inner.init(out),
            Kind::Equivocator(e) => e.advance(out),
        }
        self.after(out);
    }

    fn handle(&mut self, from: NodeId, msg: Wire, out: &mut Outbox<Wire>) {
        match &mut self.kind {
            Kind::Silent => {}
            Kind::Selective { inner, .. } | Kind::Garbage { inner, .. } => inner.handle_wire(from, msg, out),
            Kind::Equivocator(e) => e.handle(from, msg, out),
        }
        self.after(out);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Maintains up to two chains and shows each half of every committee a
/// different one.
struct Equivocator {
    inner: Node,
    plan: SendPlan,
    /// `versions[r-1]` holds the two round-`r` messages.
    versions: Vec<[Arc<BroadcastMessage>; 2]>,
    parked: Vec<(NodeId, FetchRequest)>,
}

impl Equivocator {
    fn new(inner: Node, plan: SendPlan) -> Self {
        Equivocator { inner, plan, versions: Vec::new(), parked: Vec::new() }
    }

    fn me(&self) -> NodeId {
        self.inner.id()
    }

    fn handle(&mut self, from: NodeId, wire: Wire, out: &mut Outbox<Wire>) {
        match &wire {
            Wire::Broadcast(m) if m.sender() == self.me() => return,
            Wire::Fetch(req) if req.mode == FetchMode::Sender && req.sender == self.me() => {
                self.parked.push((from, *req));
            }
            _ => self.inner.handle_wire(from, wire, out),
        }
        self.advance(out);
        self.serve(out);
    }

    fn certified(&self, m: &BroadcastMessage) -> Option<Certificate> {
        self.inner.cert_of(m.digest()).cloned()
    }

    fn advance(&mut self, out: &mut Outbox<Wire>) {
        loop {
            let r = self.versions.len() as Round;
            if r >= self.plan.rounds {
                return;
            }
            let bodies = if r == 0 {
                [self.body(1, None, Vec::new(), 0), self.body(1, None, Vec::new(), 1)]
            } else {
                let [a, b] = &self.versions[(r - 1) as usize];
                let (ca, cb) = (self.certified(a), self.certified(b));
                let Some(prev_set) = self.prev_set(r) else {
                    return;
                };
                match (ca, cb) {
                    (Some(ca), Some(cb)) => {
                        [self.body(r + 1, Some(ca), prev_set.clone(), 0), self.body(r + 1, Some(cb), prev_set, 1)]
                    }
                    (Some(c), None) | (None, Some(c)) => {
                        [self.body(r + 1, Some(c.clone()), prev_set.clone(), 0), self.body(r + 1, Some(c), prev_set, 1)]
                    }
                    (None, None) => return,
                }
            };
            let cfg = self.inner.config().clone();
            let msgs = bodies.map(|b| BroadcastMessage::new(cfg.scheme.as_ref(), &cfg.signer, b));
            let round = r + 1;
            let committee = cfg.committees.get(self.me(), round);
            let half = committee.len() / 2;
            let k = cfg.scheme.k_bytes();
            for m in &msgs {
                self.inner.remember(m.clone(), out);
            }
            for (pos, &j) in committee.members().iter().enumerate() {
                if j == self.me() {
                    continue;
                }
                let wire = Wire::Broadcast(msgs[usize::from(pos >= half)].clone());
                let bytes = wire.accounted_len(k) as u64;
                out.send(j, wire, bytes, CostTag { kind: CostKind::CommitteeSend, sender: self.me(), round });
            }
            if committee.contains(self.me()) {
                for m in &msgs {
                    let share: SignatureShare = cfg.signer.share(m.digest());
                    let wire = Wire::Share { sender: self.me(), round, share };
                    for j in NodeId::all(cfg.params.n) {
                        if j != self.me() {
                            let bytes = wire.accounted_len(k) as u64;
                            out.send(j, wire.clone(), bytes, CostTag { kind: CostKind::Share, sender: self.me(), round });
                        }
                    }
                    self.inner.handle_wire(self.me(), wire, out);
                }
            }
            self.versions.push(msgs);
        }
    }

    fn body(&self, round: Round, prev_cert: Option<Certificate>, prev_set: Vec<Certificate>, variant: u64) -> MessageBody {
        MessageBody {
            sender: self.me(),
            round,
            payload: payload_bytes(self.plan.payload_seed, self.me(), round, self.plan.payload_len, variant),
            prev_cert,
            prev_set,
            triggers: self.inner.triggers().to_vec(),
        }
    }

    /// Certificates of round `r` from the first `2f+1` other senders the
    /// inner node has seen certified.
    fn prev_set(&self, r: Round) -> Option<Vec<Certificate>> {
        let params = &self.inner.config().params;
        let set: Vec<Certificate> = NodeId::all(params.n)
            .filter(|&j| j != self.me())
            .filter_map(|j| self.inner.certified(j, r).and_then(|d| self.inner.cert_of(&d).cloned()))
            .take(params.quorum())
            .collect();
        (set.len() == params.quorum()).then_some(set)
    }

    /// Answers reqMsg queries about itself; odd requesters get chain B.
    fn serve(&mut self, out: &mut Outbox<Wire>) {
        let k = self.inner.config().scheme.k_bytes();
        let parked = std::mem::take(&mut self.parked);
        for (to, req) in parked {
            let Some(pair) = self.versions.get((req.round - 1) as usize) else {
                self.parked.push((to, req));
                continue;
            };
            let prefer = (to.0 % 2) as usize;
            let pick = [prefer, 1 - prefer]
                .into_iter()
                .map(|v| pair[v].clone())
                .find(|m| !req.want_cert || self.certified(m).is_some());
            let Some(msg) = pick else {
                self.parked.push((to, req));
                continue;
            };
            let cert = if req.want_cert { self.certified(&msg) } else { None };
            let wire = Wire::FetchReply { request: req, msg, cert };
            let bytes = wire.accounted_len(k) as u64;
            out.send(to, wire, bytes, CostTag { kind: CostKind::ReqReply, sender: self.me(), round: req.round });
        }
    }
}
