//! Bracha's reliable broadcast (send / echo / vote), run once per round on
//! the same simulator. Every message carries the full payload.

use std::any::Any;
use std::collections::HashMap;
use std::sync::Arc;

use crate::crypto::{sha256, Digest};
use crate::netsim::{CostKind, CostTag, DeliveryEvent, DeliveryPath, Event, Outbox, Process};
use crate::protocol::{payload_bytes, SendPlan};
use crate::{NodeId, Round};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Send,
    Echo,
    Vote,
}

#[derive(Clone, Debug)]
pub struct BrachaWire {
    pub phase: Phase,
    pub sender: NodeId,
    pub round: Round,
    pub payload: Arc<[u8]>,
}

impl BrachaWire {
    /// Kind byte, varint ids, length-prefixed payload.
    pub fn accounted_len(&self) -> usize {
        fn varint(mut v: u64) -> usize {
            let mut n = 1;
            while v >= 0x80 {
                v >>= 7;
                n += 1;
            }
            n
        }
        1 + varint(self.sender.0 as u64) + varint(self.round) + varint(self.payload.len() as u64) + self.payload.len()
    }

    fn digest(&self) -> Digest {
        Digest::from_slice(&sha256(&[&self.payload])).expect("32 bytes")
    }
}

#[derive(Default)]
struct Instance {
    echoes: HashMap<Digest, Vec<NodeId>>,
    votes: HashMap<Digest, Vec<NodeId>>,
    echoed: bool,
    voted: bool,
    delivered: Option<Digest>,
}

pub struct BrachaNode {
    id: NodeId,
    n: usize,
    f: usize,
    plan: Option<SendPlan>,
    instances: HashMap<(NodeId, Round), Instance>,
    delivered: usize,
}

fn payload_for(plan: &SendPlan, sender: NodeId, round: Round, variant: u64) -> Arc<[u8]> {
    payload_bytes(plan.payload_seed, sender, round, plan.payload_len, variant)
}

fn send_all(out: &mut Outbox<BrachaWire>, n: usize, wire: BrachaWire) {
    let kind = match wire.phase {
        Phase::Send => CostKind::BrachaSend,
        Phase::Echo => CostKind::BrachaEcho,
        Phase::Vote => CostKind::BrachaVote,
    };
    let bytes = wire.accounted_len() as u64;
    let tag = CostTag { kind, sender: wire.sender, round: wire.round };
    for to in NodeId::all(n) {
        out.send(to, wire.clone(), bytes, tag);
    }
}

impl BrachaNode {
    pub fn new(id: NodeId, n: usize, f: usize, plan: Option<SendPlan>) -> Self {
        BrachaNode { id, n, f, plan, instances: HashMap::new(), delivered: 0 }
    }

    pub fn delivered_count(&self) -> usize {
        self.delivered
    }

    pub fn delivered(&self, sender: NodeId, round: Round) -> Option<Digest> {
        self.instances.get(&(sender, round)).and_then(|i| i.delivered)
    }

    fn on_wire(&mut self, from: NodeId, w: BrachaWire, out: &mut Outbox<BrachaWire>) {
        let (n, f) = (self.n, self.f);
        let d = w.digest();
        let inst = self.instances.entry((w.sender, w.round)).or_default();
        let mut echo = false;
        let mut vote = false;
        let mut deliver = false;
        match w.phase {
            Phase::Send => {
                if from == w.sender && !inst.echoed {
                    inst.echoed = true;
                    echo = true;
                }
            }
            Phase::Echo => {
                let list = inst.echoes.entry(d).or_default();
                if !list.contains(&from) {
                    list.push(from);
                    if list.len() >= n - f && !inst.voted {
                        inst.voted = true;
                        vote = true;
                    }
                }
            }
            Phase::Vote => {
                let list = inst.votes.entry(d).or_default();
                if !list.contains(&from) {
                    list.push(from);
                    let c = list.len();
                    if c > f && !inst.voted {
                        inst.voted = true;
                        vote = true;
                    }
                    if c >= n - f && inst.delivered.is_none() {
                        inst.delivered = Some(d);
                        deliver = true;
                    }
                }
            }
        }
        if echo {
            send_all(out, n, BrachaWire { phase: Phase::Echo, ..w.clone() });
        }
        if vote {
            send_all(out, n, BrachaWire { phase: Phase::Vote, ..w.clone() });
        }
        if deliver {
            self.delivered += 1;
            out.event(Event::Deliver(DeliveryEvent {
                node: self.id,
                sender: w.sender,
                round: w.round,
                digest: d,
                prev: None,
                path: DeliveryPath::Bracha,
                trigger_round: w.round,
                node_round: 0,
            }));
        }
    }
}

impl Process<BrachaWire> for BrachaNode {
    fn id(&self) -> NodeId {
        self.id
    }

    fn init(&mut self, out: &mut Outbox<BrachaWire>) {
        let Some(plan) = self.plan else {
            return;
        };
        for r in 1..=plan.rounds {
            let payload = payload_for(&plan, self.id, r, 0);
            let digest = Digest::from_slice(&sha256(&[&payload])).expect("32 bytes");
            out.event(Event::Broadcast { sender: self.id, round: r, digest });
            send_all(out, self.n, BrachaWire { phase: Phase::Send, sender: self.id, round: r, payload });
        }
    }

    fn handle(&mut self, from: NodeId, msg: BrachaWire, out: &mut Outbox<BrachaWire>) {
        self.on_wire(from, msg, out);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Sends nothing.
pub struct BrachaSilent(pub NodeId);

impl Process<BrachaWire> for BrachaSilent {
    fn id(&self) -> NodeId {
        self.0
    }
    fn init(&mut self, _: &mut Outbox<BrachaWire>) {}
    fn handle(&mut self, _: NodeId, _: BrachaWire, _: &mut Outbox<BrachaWire>) {}
    fn as_any(&self) -> &dyn Any {
        self
    }
}

/// Sends payload A to the lower half of the nodes and B to the upper half,
/// then echoes and votes for both. Participates in other instances
/// honestly.
pub struct BrachaEquivocator {
    inner: BrachaNode,
    plan: SendPlan,
}

impl BrachaEquivocator {
    pub fn new(id: NodeId, n: usize, f: usize, plan: SendPlan) -> Self {
        BrachaEquivocator { inner: BrachaNode::new(id, n, f, None), plan }
    }
}

impl Process<BrachaWire> for BrachaEquivocator {
    fn id(&self) -> NodeId {
        self.inner.id
    }

    fn init(&mut self, out: &mut Outbox<BrachaWire>) {
        let (id, n) = (self.inner.id, self.inner.n);
        for r in 1..=self.plan.rounds {
            for variant in 0..2u64 {
                let payload = payload_for(&self.plan, id, r, variant);
                for phase in [Phase::Send, Phase::Echo, Phase::Vote] {
                    let wire = BrachaWire { phase, sender: id, round: r, payload: payload.clone() };
                    let bytes = wire.accounted_len() as u64;
                    let kind = match phase {
                        Phase::Send => CostKind::BrachaSend,
                        Phase::Echo => CostKind::BrachaEcho,
                        Phase::Vote => CostKind::BrachaVote,
                    };
                    for to in NodeId::all(n) {
                        let lower = to.index() < n / 2;
                        if lower == (variant == 0) || phase != Phase::Send {
                            out.send(to, wire.clone(), bytes, CostTag { kind, sender: id, round: r });
                        }
                    }
                }
            }
        }
    }

    fn handle(&mut self, from: NodeId, msg: BrachaWire, out: &mut Outbox<BrachaWire>) {
        if msg.sender != self.inner.id {
            self.inner.on_wire(from, msg, out);
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::{SchedulerPolicy, Simulation};

    fn plan(rounds: Round) -> SendPlan {
        SendPlan { rounds, payload_len: 64, payload_seed: 3 }
    }

    #[test]
    fn fault_free_instance_uses_36_envelopes_at_n4() {
        let mut procs: Vec<Box<dyn Process<BrachaWire>>> = Vec::new();
        procs.push(Box::new(BrachaNode::new(NodeId(1), 4, 1, Some(plan(1)))));
        for i in 2..=4 {
            procs.push(Box::new(BrachaNode::new(NodeId(i), 4, 1, None)));
        }
        let mut sim = Simulation::new(procs, vec![true; 4], SchedulerPolicy::RandomAsync, 9);
        let out = sim.run(10_000);
        assert!(out.quiescent);
        assert_eq!(out.steps, 36);
        for i in NodeId::all(4) {
            assert_eq!(sim.inspect::<BrachaNode>(i).unwrap().delivered_count(), 1);
        }
    }

    #[test]
    fn equivocating_sender_never_splits_honest_nodes() {
        for seed in 0..100 {
            let mut procs: Vec<Box<dyn Process<BrachaWire>>> = Vec::new();
            procs.push(Box::new(BrachaEquivocator::new(NodeId(1), 4, 1, plan(2))));
            for i in 2..=4 {
                procs.push(Box::new(BrachaNode::new(NodeId(i), 4, 1, Some(plan(1)))));
            }
            let mut sim = Simulation::new(procs, vec![false, true, true, true], SchedulerPolicy::RandomAsync, seed);
            assert!(sim.run(100_000).quiescent);
            for r in 1..=2 {
                let got: Vec<_> = (2..=4)
                    .filter_map(|i| sim.inspect::<BrachaNode>(NodeId(i)).unwrap().delivered(NodeId(1), r))
                    .collect();
                assert!(got.windows(2).all(|w| w[0] == w[1]), "seed {seed} round {r}");
            }
        }
    }

    #[test]
    fn silent_sender_delivers_nothing_and_quiesces() {
        let mut procs: Vec<Box<dyn Process<BrachaWire>>> = vec![Box::new(BrachaSilent(NodeId(1)))];
        for i in 2..=4 {
            procs.push(Box::new(BrachaNode::new(NodeId(i), 4, 1, None)));
        }
        let mut sim = Simulation::new(procs, vec![false, true, true, true], SchedulerPolicy::RandomAsync, 1);
        assert!(sim.run(1000).quiescent);
        assert!(sim.events().is_empty());
    }
}
