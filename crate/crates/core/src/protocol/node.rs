use std::any::Any;
use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use super::message::{BroadcastMessage, MessageBody, Trigger, Wire};
use super::{DigestMap, DigestSet, NodeConfig, SendPlan};
use crate::crypto::{Certificate, Digest, SignatureShare};
use crate::netsim::{CostKind, CostTag, DeliveryPath, Event, Outbox, Process};
use crate::sampling::Committee;
use crate::{NodeId, Round};

pub(super) type Out = Outbox<Wire>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum MemberState {
    AwaitingSync,
    Signed,
    Rejected,
}

#[derive(Default)]
pub(super) struct ShareAcc {
    pub shares: Vec<SignatureShare>,
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum Phase {
    AwaitOwnCert,
    Collecting,
    Done,
}

pub(super) struct SendState {
    pub plan: SendPlan,
    /// Last round broadcast.
    pub round: Round,
    pub phase: Phase,
    /// Round whose reqMsg tasks are being awaited.
    pub req_round: Round,
    pub completed: Vec<NodeId>,
    pub complete: Vec<bool>,
}

impl SendState {
    pub fn finished(&self) -> bool {
        self.phase == Phase::Done
    }
}

/// A pending backward chain walk.
pub(super) struct Walk {
    pub sender: NodeId,
    pub round: Round,
    pub digest: Digest,
    pub deliver_max: Round,
    pub path: DeliveryPath,
    pub trigger_round: Round,
    pub collected: Vec<Arc<BroadcastMessage>>,
}

pub(super) enum Waiter {
    Walk(Walk),
    Collect { round: Round, digest: Digest },
}

pub(super) enum Work {
    Cert(Certificate),
    Resume(Waiter),
    SendNext,
}

pub(super) struct MSet {
    pub msgs: Vec<Option<Arc<BroadcastMessage>>>,
    pub count: usize,
    pub fired: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NodeStats {
    pub shares_signed: u64,
    pub certs_formed: u64,
    pub chain_queries: u64,
    pub rejected_messages: u64,
    pub violations: u64,
    pub condition2_fired: u64,
    pub quorum_fired: u64,
}

pub struct Node {
    pub(super) cfg: NodeConfig,
    pub(super) n: usize,
    pub(super) threshold: usize,
    pub(super) quorum: usize,
    pub(super) k: usize,
    pub(super) promises: Vec<Vec<Arc<BroadcastMessage>>>,
    pub(super) store: DigestMap<Arc<BroadcastMessage>>,
    pub(super) certs: DigestMap<Certificate>,
    pub(super) certified: HashMap<(NodeId, Round), Digest>,
    pub(super) cert_ok: DigestSet,
    pub(super) cert_bad: DigestSet,
    pub(super) first_seen: HashMap<(NodeId, Round), Digest>,
    pub(super) member: DigestMap<MemberState>,
    pub(super) awaiting_sync: HashMap<NodeId, Vec<Arc<BroadcastMessage>>>,
    pub(super) shares: DigestMap<ShareAcc>,
    pub(super) signed: Vec<(NodeId, Round, Digest)>,
    pub(super) fetch: Vec<super::fetch::FetchState>,
    pub(super) parked_fetch: HashMap<(NodeId, Round), Vec<(NodeId, super::FetchRequest)>>,
    pub(super) parked_chain: DigestMap<Vec<NodeId>>,
    pub(super) triggers: Vec<Trigger>,
    pub(super) processed: DigestSet,
    pub(super) delivered: Vec<Vec<Option<Digest>>>,
    pub(super) delivered_count: usize,
    pub(super) prev_counts: HashMap<Round, DigestMap<u32>>,
    pub(super) m_sets: HashMap<Round, MSet>,
    pub(super) waiters: DigestMap<Vec<Waiter>>,
    pub(super) chain_queried: DigestSet,
    pub(super) deferred: HashMap<(NodeId, Round), Vec<Digest>>,
    pub(super) work: VecDeque<Work>,
    pub(super) loopback: VecDeque<Wire>,
    pub(super) send: Option<SendState>,
    pub(super) stats: NodeStats,
}

impl Node {
    /// A node that broadcasts according to `plan` (or only participates
    /// when `plan` is `None`).
    pub fn new(cfg: NodeConfig, plan: Option<SendPlan>) -> Self {
        let n = cfg.params.n;
        let k = cfg.scheme.k_bytes();
        assert_eq!(cfg.signer.id(), cfg.id, "signer must belong to the node");
        Node {
            threshold: cfg.params.threshold(),
            quorum: cfg.params.quorum(),
            n,
            k,
            promises: vec![Vec::new(); n],
            store: DigestMap::default(),
            certs: DigestMap::default(),
            certified: HashMap::new(),
            cert_ok: DigestSet::default(),
            cert_bad: DigestSet::default(),
            first_seen: HashMap::new(),
            member: DigestMap::default(),
            awaiting_sync: HashMap::new(),
            shares: DigestMap::default(),
            signed: Vec::new(),
            fetch: (0..n).map(|_| Default::default()).collect(),
            parked_fetch: HashMap::new(),
            parked_chain: DigestMap::default(),
            triggers: vec![None; n],
            processed: DigestSet::default(),
            delivered: vec![Vec::new(); n],
            delivered_count: 0,
            prev_counts: HashMap::new(),
            m_sets: HashMap::new(),
            waiters: DigestMap::default(),
            chain_queried: DigestSet::default(),
            deferred: HashMap::new(),
            work: VecDeque::new(),
            loopback: VecDeque::new(),
            send: plan.map(|plan| SendState {
                plan,
                round: 0,
                phase: Phase::AwaitOwnCert,
                req_round: 0,
                completed: Vec::new(),
                complete: vec![false; n],
            }),
            stats: NodeStats::default(),
            cfg,
        }
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn config(&self) -> &NodeConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &NodeStats {
        &self.stats
    }

    pub fn delivered(&self, sender: NodeId, round: Round) -> Option<Digest> {
        self.delivered[sender.index()].get((round as usize).wrapping_sub(1)).copied().flatten()
    }

    pub fn delivered_count(&self) -> usize {
        self.delivered_count
    }

    /// Delivered `(round, digest)` pairs of `sender`, ascending.
    pub fn delivered_rounds(&self, sender: NodeId) -> impl Iterator<Item = (Round, Digest)> + '_ {
        self.delivered[sender.index()].iter().enumerate().filter_map(|(i, d)| d.map(|d| (i as Round + 1, d)))
    }

    /// Highest `u` such that rounds `1..=u` of `sender` are all delivered.
    pub fn delivered_prefix(&self, sender: NodeId) -> Round {
        self.delivered[sender.index()].iter().take_while(|d| d.is_some()).count() as Round
    }

    pub fn promises(&self, sender: NodeId) -> &[Arc<BroadcastMessage>] {
        &self.promises[sender.index()]
    }

    pub fn message(&self, digest: &Digest) -> Option<&Arc<BroadcastMessage>> {
        self.store.get(digest)
    }

    pub fn cert_of(&self, digest: &Digest) -> Option<&Certificate> {
        self.certs.get(digest)
    }

    /// First digest of `(sender, round)` this node saw certified.
    pub fn certified(&self, sender: NodeId, round: Round) -> Option<Digest> {
        self.certified.get(&(sender, round)).copied()
    }

    pub fn triggers(&self) -> &[Trigger] {
        &self.triggers
    }

    /// Every `(sender, round, digest)` this node has issued a share for.
    pub fn signed_log(&self) -> &[(NodeId, Round, Digest)] {
        &self.signed
    }

    /// Last round this node broadcast (0 before the first).
    pub fn current_round(&self) -> Round {
        self.send.as_ref().map_or(0, |s| s.round)
    }

    pub fn finished_sending(&self) -> bool {
        self.send.as_ref().is_none_or(|s| s.finished())
    }

    /// The delivered message of `(sender, round)`, materialised from local
    /// state.
    pub fn materialize(&self, sender: NodeId, round: Round) -> Option<Arc<BroadcastMessage>> {
        self.delivered(sender, round).and_then(|d| self.store.get(&d).cloned())
    }

    pub(super) fn committee(&self, sender: NodeId, round: Round) -> Committee {
        self.cfg.committees.get(sender, round)
    }

    /// Sends `wire` to `to`; self-addressed traffic is handled locally.
    pub(super) fn send_wire(
        &mut self,
        out: &mut Out,
        to: NodeId,
        wire: Wire,
        kind: CostKind,
        sender: NodeId,
        round: Round,
    ) {
        if to == self.id() {
            self.loopback.push_back(wire);
            return;
        }
        let bytes = wire.accounted_len(self.k) as u64;
        out.send(to, wire, bytes, CostTag { kind, sender, round });
    }

    pub(super) fn violation(&mut self, out: &mut Out, what: String) {
        self.stats.violations += 1;
        out.event(Event::Violation { node: self.id(), what });
    }

    /// Applies one input and everything it causes locally.
    pub fn handle_wire(&mut self, from: NodeId, wire: Wire, out: &mut Out) {
        self.dispatch(from, wire, out);
        self.drain(out);
    }

    /// Stores a message this node obtained outside the wire (its own).
    pub fn remember(&mut self, msg: Arc<BroadcastMessage>, out: &mut Out) {
        self.learn_message(msg, out);
        self.drain(out);
    }

    fn dispatch(&mut self, from: NodeId, wire: Wire, out: &mut Out) {
        match wire {
            Wire::Broadcast(m) => self.on_broadcast(m, out),
            Wire::Share { sender, round, share } => self.on_share(sender, round, share, out),
            Wire::Fetch(req) => self.on_fetch(from, req, out),
            Wire::FetchReply { request, msg, cert } => self.on_fetch_reply(request, msg, cert, out),
            Wire::ChainQuery { sender, round, digest } => {
                self.on_chain_query(from, sender, round, digest, out)
            }
            Wire::ChainReply(m) => {
                self.accept_message(&m, out);
            }
        }
    }

    pub(super) fn drain(&mut self, out: &mut Out) {
        loop {
            if let Some(w) = self.loopback.pop_front() {
                let me = self.id();
                self.dispatch(me, w, out);
            } else if let Some(job) = self.work.pop_front() {
                match job {
                    Work::Cert(c) => self.process_certificate(c, out),
                    Work::Resume(w) => self.resume(w, out),
                    Work::SendNext => self.drive_sender(out),
                }
            } else {
                break;
            }
        }
    }

    /// Checks the sender signature of a message not seen before and stores
    /// it. Returns false if the message is not authentic.
    pub(super) fn accept_message(&mut self, m: &Arc<BroadcastMessage>, out: &mut Out) -> bool {
        if self.store.contains_key(m.digest()) {
            return true;
        }
        if !m.signature_valid(self.cfg.scheme.as_ref()) || m.sender().0 as usize > self.n {
            return false;
        }
        self.learn_message(m.clone(), out);
        true
    }

    pub(super) fn learn_message(&mut self, m: Arc<BroadcastMessage>, out: &mut Out) {
        let d = *m.digest();
        if self.store.insert(d, m.clone()).is_some() {
            return;
        }
        if let Some(ws) = self.waiters.remove(&d) {
            self.work.extend(ws.into_iter().map(Work::Resume));
        }
        if let Some(reqs) = self.parked_chain.remove(&d) {
            for to in reqs {
                let wire = Wire::ChainReply(m.clone());
                self.send_wire(out, to, wire, CostKind::ChainReply, m.sender(), m.round());
            }
        }
    }

    // ---- committee member side -------------------------------------------

    fn on_broadcast(&mut self, m: Arc<BroadcastMessage>, out: &mut Out) {
        if !self.accept_message(&m, out) {
            return;
        }
        let (i, r, d) = (m.sender(), m.round(), *m.digest());
        if r == 0 || self.member.contains_key(&d) || !self.committee(i, r).contains(self.id()) {
            return;
        }
        let guard = !self.cfg.skip_equivocation_guard;
        match self.first_seen.get(&(i, r)) {
            Some(first) if *first != d && guard => {
                self.member.insert(d, MemberState::Rejected);
                return;
            }
            Some(_) => {}
            None => {
                self.first_seen.insert((i, r), d);
            }
        }
        if !self.structure_valid(&m) {
            self.stats.rejected_messages += 1;
            self.member.insert(d, MemberState::Rejected);
            return;
        }
        self.learn_embedded(&m, out);
        if guard && r > 1 && self.promises[i.index()].len() < (r - 1) as usize {
            self.member.insert(d, MemberState::AwaitingSync);
            self.awaiting_sync.entry(i).or_default().push(m);
            self.start_sync(i, r - 1, out);
            return;
        }
        self.try_sign(m, out);
    }

    /// Round-1 messages carry no certificates; later ones carry a valid
    /// `prev_cert` for the sender's previous round and `2f+1` valid
    /// previous-round certificates of distinct senders.
    fn structure_valid(&mut self, m: &BroadcastMessage) -> bool {
        let (i, r) = (m.sender(), m.round());
        if m.triggers().len() != self.n {
            return false;
        }
        if r == 1 {
            return m.prev_cert().is_none() && m.prev_set().is_empty();
        }
        let Some(pc) = m.prev_cert() else {
            return false;
        };
        if pc.committee_tag() != (i, r - 1) || !self.check_cert(pc) {
            return false;
        }
        let set = m.prev_set();
        if set.len() != self.quorum || set.windows(2).any(|w| w[0].sender() >= w[1].sender()) {
            return false;
        }
        set.iter().all(|c| c.round() == r - 1 && c.sender().0 as usize <= self.n && self.check_cert(c))
    }

    fn learn_embedded(&mut self, m: &BroadcastMessage, out: &mut Out) {
        for c in m.prev_cert().into_iter().chain(m.prev_set()) {
            self.learn_cert(c.clone(), out);
        }
    }

    pub(super) fn try_sign(&mut self, m: Arc<BroadcastMessage>, out: &mut Out) {
        let (i, r, d) = (m.sender(), m.round(), *m.digest());
        let guard = !self.cfg.skip_equivocation_guard;
        let p = &self.promises[i.index()];
        let chained = r == 1 || p.get((r - 2) as usize).map(|x| *x.digest()) == m.prev_digest();
        if guard {
            let conflicting = p.get((r - 1) as usize).is_some_and(|x| *x.digest() != d);
            if !chained || conflicting {
                self.member.insert(d, MemberState::Rejected);
                return;
            }
        }
        self.member.insert(d, MemberState::Signed);
        if chained && p.len() == (r - 1) as usize {
            self.write_promise(m.clone(), out);
        }
        if i != self.id() {
            let committee = self.committee(i, r);
            for &j in committee.members() {
                if j != self.id() {
                    self.send_wire(out, j, Wire::Broadcast(m.clone()), CostKind::Resend, i, r);
                }
            }
        }
        let share = self.cfg.signer.share(&d);
        self.signed.push((i, r, d));
        self.stats.shares_signed += 1;
        for j in crate::NodeId::all(self.n) {
            self.send_wire(out, j, Wire::Share { sender: i, round: r, share }, CostKind::Share, i, r);
        }
    }

    /// Appends to `promises[sender]`; entries are never replaced.
    pub(super) fn write_promise(&mut self, m: Arc<BroadcastMessage>, out: &mut Out) {
        let (i, r) = (m.sender(), m.round());
        let list = &mut self.promises[i.index()];
        assert_eq!(list.len() as Round, r - 1, "promises are written sequentially");
        list.push(m);
        self.flush_parked_fetch(i, r, out);
        if let Some(pending) = self.awaiting_sync.remove(&i) {
            let have = self.promises[i.index()].len() as Round;
            let (ready, waiting): (Vec<_>, Vec<_>) =
                pending.into_iter().partition(|p| p.round() - 1 <= have);
            if !waiting.is_empty() {
                self.awaiting_sync.entry(i).or_default().extend(waiting);
            }
            for p in ready {
                self.try_sign(p, out);
            }
        }
        if let Some(ds) = self.deferred.remove(&(i, r)) {
            for d in ds {
                if !self.store.contains_key(&d) {
                    self.chain_query(i, r, d, out);
                }
            }
        }
        self.check_req(i);
        self.advance_fetch(i, out);
    }

    fn on_share(&mut self, sender: NodeId, round: Round, share: SignatureShare, out: &mut Out) {
        let d = share.message_digest;
        if self.shares.get(&d).is_some_and(|a| a.done) || self.certs.contains_key(&d) {
            return;
        }
        if round == 0 || sender.0 as usize > self.n {
            return;
        }
        let committee = self.committee(sender, round);
        if !committee.contains(share.signer) {
            return;
        }
        let acc = self.shares.entry(d).or_default();
        if acc.shares.iter().any(|s| s.signer == share.signer) {
            return;
        }
        if !self.cfg.scheme.verify_share(&share) {
            return;
        }
        acc.shares.push(share);
        if acc.shares.len() < self.threshold {
            return;
        }
        acc.done = true;
        // Every share was verified on arrival, so assembling cannot fail.
        let parts = std::mem::take(&mut acc.shares).into_iter().map(|s| (s.signer, s.share_bytes)).collect();
        self.stats.certs_formed += 1;
        self.learn_cert(Certificate::from_parts(d, sender, round, parts), out);
    }

    // ---- sending routine -------------------------------------------------

    pub(super) fn check_req(&mut self, j: NodeId) {
        let Some(s) = self.send.as_ref() else {
            return;
        };
        if s.phase != Phase::Collecting || s.complete[j.index()] {
            return;
        }
        let y = s.req_round as usize;
        let done = self.promises[j.index()]
            .get(y - 1)
            .is_some_and(|m| self.certs.contains_key(m.digest()));
        if done {
            let s = self.send.as_mut().expect("checked");
            s.complete[j.index()] = true;
            s.completed.push(j);
            if s.completed.len() == self.quorum {
                self.work.push_back(Work::SendNext);
            }
        }
    }

    pub(super) fn drive_sender(&mut self, out: &mut Out) {
        loop {
            let Some(s) = self.send.as_mut() else {
                return;
            };
            match s.phase {
                Phase::Done => return,
                Phase::AwaitOwnCert => {
                    let r = s.round;
                    let own = *self.promises[self.id().index()][(r - 1) as usize].digest();
                    if !self.certs.contains_key(&own) {
                        return;
                    }
                    let s = self.send.as_mut().expect("present");
                    s.phase = Phase::Collecting;
                    s.req_round = r;
                    s.completed.clear();
                    s.complete.iter_mut().for_each(|c| *c = false);
                    for j in NodeId::all(self.n) {
                        self.start_req(j, r, out);
                    }
                    for j in NodeId::all(self.n) {
                        self.check_req(j);
                    }
                }
                Phase::Collecting => {
                    if s.completed.len() < self.quorum {
                        return;
                    }
                    let next = s.req_round + 1;
                    self.broadcast_round(next, out);
                }
            }
        }
    }

    /// Builds, records and sends `m_r` of this node.
    pub(super) fn broadcast_round(&mut self, r: Round, out: &mut Out) {
        let me = self.id();
        let s = self.send.as_ref().expect("sending node");
        let plan = s.plan;
        let (prev_cert, prev_set) = if r == 1 {
            (None, Vec::new())
        } else {
            let own = self.promises[me.index()][(r - 2) as usize].digest();
            let prev_cert = self.certs[own].clone();
            let prev_set = s.completed[..self.quorum]
                .iter()
                .map(|j| self.certs[self.promises[j.index()][(r - 2) as usize].digest()].clone())
                .collect();
            (Some(prev_cert), prev_set)
        };
        let body = MessageBody {
            sender: me,
            round: r,
            payload: plan.payload(me, r),
            prev_cert,
            prev_set,
            triggers: self.triggers.clone(),
        };
        let m = BroadcastMessage::new(self.cfg.scheme.as_ref(), &self.cfg.signer, body);
        self.learn_message(m.clone(), out);
        self.write_promise(m.clone(), out);
        out.event(Event::Broadcast { sender: me, round: r, digest: *m.digest() });
        let s = self.send.as_mut().expect("sending node");
        s.round = r;
        s.phase = if r >= plan.rounds { Phase::Done } else { Phase::AwaitOwnCert };
        if s.finished() {
            self.flush_deferred(out);
        }
        let committee = self.committee(me, r);
        for &j in committee.members() {
            self.send_wire(out, j, Wire::Broadcast(m.clone()), CostKind::CommitteeSend, me, r);
        }
    }
}

impl Process<Wire> for Node {
    fn id(&self) -> NodeId {
        self.cfg.id
    }

    fn init(&mut self, out: &mut Out) {
        if self.send.as_ref().is_some_and(|s| s.plan.rounds >= 1 && s.round == 0) {
            self.broadcast_round(1, out);
            self.drain(out);
        }
    }

    fn handle(&mut self, from: NodeId, msg: Wire, out: &mut Out) {
        self.handle_wire(from, msg, out);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.cfg.id)
            .field("round", &self.current_round())
            .field("delivered", &self.delivered_count)
            .finish_non_exhaustive()
    }
}
