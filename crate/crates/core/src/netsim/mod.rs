//! Deterministic discrete-event simulation of the random asynchronous
//! network.
//!
//! Processes never share state; they exchange envelopes through a pool of
//! in-flight messages from which the [`scheduler`] picks the next delivery.
//! Every submitted envelope is eventually delivered (there is no loss or
//! duplication), except when a run hits its step cap, which is reported.

use std::any::Any;

use serde::{Deserialize, Serialize};

use crate::crypto::Digest;
use crate::{NodeId, Round};

pub mod byzantine;
pub mod scheduler;
pub mod transcript;

pub use scheduler::SchedulerPolicy;
use scheduler::Pool;

/// What an envelope is charged as.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CostKind {
    ReqQuery,
    ReqReply,
    CommitteeSend,
    SyncQuery,
    SyncReply,
    Resend,
    Share,
    ChainQuery,
    ChainReply,
    BrachaSend,
    BrachaEcho,
    BrachaVote,
}

impl CostKind {
    pub const ALL: [CostKind; 12] = [
        CostKind::ReqQuery,
        CostKind::ReqReply,
        CostKind::CommitteeSend,
        CostKind::SyncQuery,
        CostKind::SyncReply,
        CostKind::Resend,
        CostKind::Share,
        CostKind::ChainQuery,
        CostKind::ChainReply,
        CostKind::BrachaSend,
        CostKind::BrachaEcho,
        CostKind::BrachaVote,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CostKind::ReqQuery => "req_query",
            CostKind::ReqReply => "req_reply",
            CostKind::CommitteeSend => "committee_send",
            CostKind::SyncQuery => "sync_query",
            CostKind::SyncReply => "sync_reply",
            CostKind::Resend => "resend",
            CostKind::Share => "share",
            CostKind::ChainQuery => "chain_query",
            CostKind::ChainReply => "chain_reply",
            CostKind::BrachaSend => "bracha_send",
            CostKind::BrachaEcho => "bracha_echo",
            CostKind::BrachaVote => "bracha_vote",
        }
    }
}

/// Cost attribution: the kind, and the broadcast instance `(sender, round)`
/// whose dissemination caused the envelope.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CostTag {
    pub kind: CostKind,
    pub sender: NodeId,
    pub round: Round,
}

#[derive(Clone, Debug)]
pub struct Envelope<M> {
    pub from: NodeId,
    pub to: NodeId,
    pub msg: M,
    pub bytes: u64,
    pub tag: CostTag,
    pub sent_step: u64,
}

impl<M> Envelope<M> {
    pub fn bits(&self) -> u64 {
        self.bytes * 8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeliveryPath {
    Condition1,
    Condition2,
    Quorum,
    Bracha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeliveryEvent {
    pub node: NodeId,
    pub sender: NodeId,
    pub round: Round,
    pub digest: Digest,
    pub prev: Option<Digest>,
    pub path: DeliveryPath,
    /// Round of the certificate (Condition 1) or of the message set
    /// (Condition 2, quorum) that caused the delivery.
    pub trigger_round: Round,
    /// The delivering node's own broadcast round at that moment.
    pub node_round: Round,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Event {
    Broadcast { sender: NodeId, round: Round, digest: Digest },
    Deliver(DeliveryEvent),
    Violation { node: NodeId, what: String },
}

/// What a process emits while handling one input.
pub struct Outbox<M> {
    pub(crate) sends: Vec<(NodeId, M, u64, CostTag)>,
    pub(crate) events: Vec<Event>,
}

impl<M> Default for Outbox<M> {
    fn default() -> Self {
        Outbox { sends: Vec::new(), events: Vec::new() }
    }
}

impl<M> Outbox<M> {
    pub fn send(&mut self, to: NodeId, msg: M, bytes: u64, tag: CostTag) {
        self.sends.push((to, msg, bytes, tag));
    }

    pub fn event(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn sends(&self) -> impl Iterator<Item = (NodeId, &M, u64, CostTag)> {
        self.sends.iter().map(|(to, m, b, t)| (*to, m, *b, *t))
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn take_sends(&mut self) -> Vec<(NodeId, M, u64, CostTag)> {
        std::mem::take(&mut self.sends)
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn is_empty(&self) -> bool {
        self.sends.is_empty() && self.events.is_empty()
    }
}

/// A single-owner state machine stepped by the simulator.
pub trait Process<M> {
    fn id(&self) -> NodeId;
    fn init(&mut self, out: &mut Outbox<M>);
    fn handle(&mut self, from: NodeId, msg: M, out: &mut Outbox<M>);
    fn as_any(&self) -> &dyn Any;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Traffic {
    pub bytes: u64,
    pub envelopes: u64,
}

impl Traffic {
    fn add(&mut self, bytes: u64) {
        self.bytes += bytes;
        self.envelopes += 1;
    }
}

/// Traffic emitted by honest processes. Self-addressed envelopes are free.
#[derive(Clone, Debug, Default)]
pub struct TrafficLedger {
    pub total: Traffic,
    pub byzantine: Traffic,
    pub self_addressed: u64,
    by_kind: [Traffic; CostKind::ALL.len()],
    /// `[sender index][round] -> per-kind traffic`.
    by_instance: Vec<Vec<[Traffic; CostKind::ALL.len()]>>,
}

impl TrafficLedger {
    fn record(&mut self, from: NodeId, to: NodeId, bytes: u64, tag: CostTag, honest: bool) {
        if from == to {
            self.self_addressed += 1;
            return;
        }
        if !honest {
            self.byzantine.add(bytes);
            return;
        }
        self.total.add(bytes);
        let k = tag.kind as usize;
        self.by_kind[k].add(bytes);
        let s = tag.sender.index();
        if self.by_instance.len() <= s {
            self.by_instance.resize_with(s + 1, Vec::new);
        }
        let rounds = &mut self.by_instance[s];
        let r = tag.round as usize;
        if rounds.len() <= r {
            rounds.resize(r + 1, Default::default());
        }
        rounds[r][k].add(bytes);
    }

    pub fn kind(&self, kind: CostKind) -> Traffic {
        self.by_kind[kind as usize]
    }

    pub fn kind_bytes(&self, kind: CostKind) -> u64 {
        self.kind(kind).bytes
    }

    /// Non-empty `(sender, round, kind, traffic)` entries.
    pub fn instances(&self) -> impl Iterator<Item = (NodeId, Round, CostKind, Traffic)> + '_ {
        self.by_instance.iter().enumerate().flat_map(|(s, rounds)| {
            rounds.iter().enumerate().flat_map(move |(r, kinds)| {
                kinds
                    .iter()
                    .zip(CostKind::ALL)
                    .filter(|(t, _)| t.envelopes > 0)
                    .map(move |(t, k)| (NodeId::from_index(s), r as Round, k, *t))
            })
        })
    }

    /// Honest bytes attributed to broadcast round `round`, over all senders.
    pub fn round_bytes(&self, round: Round) -> u64 {
        self.instances().filter(|(_, r, _, _)| *r == round).map(|(.., t)| t.bytes).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub steps: u64,
    pub quiescent: bool,
    pub timed_out: bool,
    /// Step at which an adversarial scheduler ran out of favoured traffic
    /// and skipped ahead to its budget.
    pub fast_forwarded_at: Option<u64>,
}

pub type Observer<M> = Box<dyn FnMut(u64, &Envelope<M>)>;

pub struct Simulation<M> {
    procs: Vec<Box<dyn Process<M>>>,
    honest: Vec<bool>,
    pool: Pool<M>,
    step: u64,
    events: Vec<(u64, Event)>,
    traffic: TrafficLedger,
    observer: Option<Observer<M>>,
    outbox: Outbox<M>,
    initialised: bool,
}

impl<M> Simulation<M> {
    /// `procs[i]` must have id `i + 1`; `honest[i]` marks honest processes.
    pub fn new(
        procs: Vec<Box<dyn Process<M>>>,
        honest: Vec<bool>,
        policy: SchedulerPolicy,
        rng_seed: u64,
    ) -> Self {
        assert_eq!(procs.len(), honest.len());
        for (i, p) in procs.iter().enumerate() {
            assert_eq!(p.id(), NodeId::from_index(i), "process ids must be 1..=n in order");
        }
        let n = procs.len();
        Simulation {
            procs,
            honest,
            pool: Pool::new(policy, n, rng_seed),
            step: 0,
            events: Vec::new(),
            traffic: TrafficLedger::default(),
            observer: None,
            outbox: Outbox::default(),
            initialised: false,
        }
    }

    pub fn set_observer(&mut self, f: Observer<M>) {
        self.observer = Some(f);
    }

    fn flush(&mut self, from: NodeId) {
        let honest = self.honest[from.index()];
        for (to, msg, bytes, tag) in self.outbox.sends.drain(..) {
            self.traffic.record(from, to, bytes, tag, honest);
            self.pool.push(Envelope { from, to, msg, bytes, tag, sent_step: self.step });
        }
        for e in self.outbox.events.drain(..) {
            if honest {
                self.events.push((self.step, e));
            }
        }
    }

    fn init(&mut self) {
        if self.initialised {
            return;
        }
        self.initialised = true;
        for i in 0..self.procs.len() {
            let mut out = std::mem::take(&mut self.outbox);
            self.procs[i].init(&mut out);
            self.outbox = out;
            self.flush(NodeId::from_index(i));
        }
    }

    /// Delivers one envelope. Returns false when nothing is in flight.
    pub fn step_once(&mut self) -> bool {
        self.init();
        let Some(env) = self.pool.pop(&mut self.step) else {
            return false;
        };
        self.step += 1;
        if let Some(obs) = self.observer.as_mut() {
            obs(self.step, &env);
        }
        let to = env.to;
        let mut out = std::mem::take(&mut self.outbox);
        self.procs[to.index()].handle(env.from, env.msg, &mut out);
        self.outbox = out;
        self.flush(to);
        true
    }

    /// Runs until quiescence or until `max_steps` deliveries have happened.
    pub fn run(&mut self, max_steps: u64) -> RunOutcome {
        self.init();
        while self.step < max_steps {
            if !self.step_once() {
                break;
            }
        }
        let quiescent = self.pool.is_empty();
        RunOutcome {
            steps: self.step,
            quiescent,
            timed_out: !quiescent,
            fast_forwarded_at: self.pool.fast_forwarded_at(),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.pool.len()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn events(&self) -> &[(u64, Event)] {
        &self.events
    }

    pub fn traffic(&self) -> &TrafficLedger {
        &self.traffic
    }

    pub fn honest(&self) -> &[bool] {
        &self.honest
    }

    pub fn process(&self, id: NodeId) -> &dyn Process<M> {
        self.procs[id.index()].as_ref()
    }

    /// Downcasts process `id` to a concrete type.
    pub fn inspect<T: 'static>(&self, id: NodeId) -> Option<&T> {
        self.procs[id.index()].as_any().downcast_ref::<T>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Forwards a token around a ring `hops` times.
    struct Ring {
        id: NodeId,
        n: usize,
        seen: u32,
    }

    impl Process<u32> for Ring {
        fn id(&self) -> NodeId {
            self.id
        }
        fn init(&mut self, out: &mut Outbox<u32>) {
            if self.id == NodeId(1) {
                let tag = CostTag { kind: CostKind::BrachaSend, sender: self.id, round: 1 };
                out.send(NodeId(2), 0, 10, tag);
            }
        }
        fn handle(&mut self, _from: NodeId, hops: u32, out: &mut Outbox<u32>) {
            self.seen += 1;
            if hops < 20 {
                let next = NodeId((self.id.0 % self.n as u32) + 1);
                let tag = CostTag { kind: CostKind::BrachaSend, sender: NodeId(1), round: 1 };
                out.send(next, hops + 1, 10, tag);
            }
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
    }

    fn ring(policy: SchedulerPolicy) -> Simulation<u32> {
        let procs: Vec<Box<dyn Process<u32>>> =
            (1..=3).map(|i| Box::new(Ring { id: NodeId(i), n: 3, seen: 0 }) as _).collect();
        Simulation::new(procs, vec![true; 3], policy, 7)
    }

    #[test]
    fn ring_runs_to_quiescence() {
        for policy in [SchedulerPolicy::RandomAsync, SchedulerPolicy::RoundRobin] {
            let mut sim = ring(policy);
            let out = sim.run(1000);
            assert!(out.quiescent && !out.timed_out);
            assert_eq!(out.steps, 21);
            assert_eq!(sim.traffic().total.bytes, 210);
            let seen: u32 = (1..=3).map(|i| sim.inspect::<Ring>(NodeId(i)).unwrap().seen).sum();
            assert_eq!(seen, 21);
        }
    }

    #[test]
    fn step_cap_reports_timeout() {
        let mut sim = ring(SchedulerPolicy::RandomAsync);
        let out = sim.run(5);
        assert!(out.timed_out && !out.quiescent);
        assert_eq!(out.steps, 5);
    }
}
