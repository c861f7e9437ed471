//! Certificate handling and the three delivery paths.

use std::collections::hash_map::Entry;
use std::sync::Arc;

use super::message::BroadcastMessage;
use super::node::{MSet, Node, Out, Waiter, Walk, Work};
use crate::crypto::{Certificate, Digest};
use crate::netsim::{DeliveryEvent, DeliveryPath, Event};
use crate::{NodeId, Round};

impl Node {
    /// Cryptographic validity of `cert` for the committee it names.
    pub(super) fn check_cert(&mut self, cert: &Certificate) -> bool {
        let fp = *cert.fingerprint();
        if self.cert_ok.contains(&fp) {
            return true;
        }
        if self.cert_bad.contains(&fp) {
            return false;
        }
        // A certificate for a message already proven certified by the same
        // committee proves nothing new.
        if self.certs.get(cert.message_digest()).is_some_and(|c| c.committee_tag() == cert.committee_tag()) {
            return true;
        }
        let ok = cert.round() > 0 && cert.sender().0 as usize <= self.n && cert.sender().0 > 0 && {
            let committee = self.committee(cert.sender(), cert.round());
            self.cfg.scheme.verify_cert(cert, cert.message_digest(), &committee, self.threshold)
        };
        if ok {
            self.cert_ok.insert(fp);
        } else {
            self.cert_bad.insert(fp);
        }
        ok
    }

    /// Records a validated certificate and queues it for processing.
    pub(super) fn learn_cert(&mut self, cert: Certificate, out: &mut Out) {
        let d = *cert.message_digest();
        if self.certs.contains_key(&d) {
            return;
        }
        self.cert_ok.insert(*cert.fingerprint());
        self.certs.insert(d, cert.clone());
        let (i, r) = cert.committee_tag();
        if let Entry::Vacant(e) = self.certified.entry((i, r)) {
            e.insert(d);
            self.collect_m(i, r, d, out);
        }
        self.flush_parked_fetch(i, r, out);
        self.check_req(i);
        if i == self.id() {
            self.work.push_back(Work::SendNext);
        }
        self.work.push_back(Work::Cert(cert));
    }

    pub(super) fn process_certificate(&mut self, cert: Certificate, out: &mut Out) {
        let d = *cert.message_digest();
        if !self.processed.insert(d) {
            return;
        }
        let (i, r) = cert.committee_tag();
        let phi = self.cfg.params.phi;
        if r < phi {
            return;
        }
        let slot = &mut self.triggers[i.index()];
        if slot.as_ref().is_none_or(|(_, t)| *t < r) {
            *slot = Some((cert, r));
        }
        if r == phi {
            return;
        }
        let walk = Walk {
            sender: i,
            round: r,
            digest: d,
            deliver_max: r - phi,
            path: DeliveryPath::Condition1,
            trigger_round: r,
            collected: Vec::new(),
        };
        self.run_walk(walk, out);
    }

    /// Follows `prev_cert` links down from `walk.round`, delivering every
    /// message at or below `deliver_max` once the chain is materialised.
    pub(super) fn run_walk(&mut self, mut w: Walk, out: &mut Out) {
        let i = w.sender;
        loop {
            let v = w.round;
            if v <= w.deliver_max {
                match self.delivered(i, v) {
                    Some(x) if x == w.digest => break,
                    Some(x) => {
                        let what = format!("{i} round {v}: chain reaches {} but {} was delivered", w.digest, x);
                        self.violation(out, what);
                        return;
                    }
                    None => {}
                }
            }
            let Some(m) = self.store.get(&w.digest).cloned() else {
                let d = w.digest;
                self.waiters.entry(d).or_default().push(Waiter::Walk(w));
                self.want(i, v, d, out);
                return;
            };
            if m.sender() != i || m.round() != v {
                return;
            }
            if v <= w.deliver_max {
                w.collected.push(m.clone());
            }
            if v == 1 {
                break;
            }
            let Some(pc) = m.prev_cert() else {
                return;
            };
            if pc.committee_tag() != (i, v - 1) || !self.check_cert(pc) {
                return;
            }
            let pc = pc.clone();
            w.digest = *pc.message_digest();
            w.round = v - 1;
            self.learn_cert(pc, out);
        }
        for m in std::mem::take(&mut w.collected) {
            self.deliver(m, w.path, w.trigger_round, out);
        }
    }

    fn deliver(&mut self, m: Arc<BroadcastMessage>, path: DeliveryPath, trigger_round: Round, out: &mut Out) {
        let (i, u, d) = (m.sender(), m.round(), *m.digest());
        let row = &mut self.delivered[i.index()];
        if row.len() < u as usize {
            row.resize(u as usize, None);
        }
        match row[(u - 1) as usize] {
            Some(x) if x == d => return,
            Some(x) => {
                let what = format!("{i} round {u}: conflicting delivery of {d} after {x}");
                self.violation(out, what);
                return;
            }
            None => row[(u - 1) as usize] = Some(d),
        }
        self.delivered_count += 1;
        out.event(Event::Deliver(DeliveryEvent {
            node: self.id(),
            sender: i,
            round: u,
            digest: d,
            prev: m.prev_digest(),
            path,
            trigger_round,
            node_round: self.current_round(),
        }));
        for (j, t) in m.triggers().iter().enumerate() {
            let Some((c, rr)) = t else {
                continue;
            };
            if c.sender() != NodeId::from_index(j) || c.round() != *rr || self.certs.contains_key(c.message_digest()) {
                continue;
            }
            if self.check_cert(c) {
                self.learn_cert(c.clone(), out);
            }
        }
        if u > 1 {
            self.count_quorum(&m, out);
        }
    }

    /// Totality companion: a `prev_set` entry referenced by `2f+1`
    /// delivered messages of one round is walked and delivered.
    fn count_quorum(&mut self, m: &BroadcastMessage, out: &mut Out) {
        let u = m.round();
        let counts = self.prev_counts.entry(u).or_default();
        let mut reached = Vec::new();
        for c in m.prev_set() {
            let k = counts.entry(*c.message_digest()).or_insert(0);
            *k += 1;
            if *k as usize == self.quorum {
                reached.push(c.clone());
            }
        }
        for c in reached {
            if c.round() != u - 1 || !self.check_cert(&c) {
                continue;
            }
            self.stats.quorum_fired += 1;
            let walk = Walk {
                sender: c.sender(),
                round: u - 1,
                digest: *c.message_digest(),
                deliver_max: u - 1,
                path: DeliveryPath::Quorum,
                trigger_round: u,
                collected: Vec::new(),
            };
            self.learn_cert(c, out);
            self.run_walk(walk, out);
        }
    }

    /// Condition 2: walks every `prev_set` entry common to all of `msgs`
    /// (one certified message per sender for round `r`).
    fn walk_common(&mut self, msgs: &[Arc<BroadcastMessage>], r: Round, out: &mut Out) {
        for c in common_prev(msgs) {
            if c.round() != r - 1 || !self.check_cert(&c) {
                continue;
            }
            let walk = Walk {
                sender: c.sender(),
                round: r - 1,
                digest: *c.message_digest(),
                deliver_max: r - 1,
                path: DeliveryPath::Condition2,
                trigger_round: r,
                collected: Vec::new(),
            };
            self.learn_cert(c, out);
            self.run_walk(walk, out);
        }
    }

    /// Adds the first certified message of `(sender, round)` to M_round.
    fn collect_m(&mut self, sender: NodeId, round: Round, digest: Digest, out: &mut Out) {
        if round < 2 || self.m_sets.get(&round).is_some_and(|m| m.fired) {
            return;
        }
        match self.store.get(&digest).cloned() {
            Some(m) => self.m_insert(m, out),
            None => {
                self.waiters.entry(digest).or_default().push(Waiter::Collect { round, digest });
                self.want(sender, round, digest, out);
            }
        }
    }

    fn m_insert(&mut self, m: Arc<BroadcastMessage>, out: &mut Out) {
        let (i, r) = (m.sender(), m.round());
        let n = self.n;
        let set = self.m_sets.entry(r).or_insert_with(|| MSet { msgs: vec![None; n], count: 0, fired: false });
        if set.fired || set.msgs[i.index()].is_some() {
            return;
        }
        set.msgs[i.index()] = Some(m);
        set.count += 1;
        if set.count < n {
            return;
        }
        set.fired = true;
        let msgs: Vec<_> = std::mem::take(&mut set.msgs).into_iter().flatten().collect();
        self.stats.condition2_fired += 1;
        self.walk_common(&msgs, r, out);
    }

    pub(super) fn resume(&mut self, w: Waiter, out: &mut Out) {
        match w {
            Waiter::Walk(w) => self.run_walk(w, out),
            Waiter::Collect { round, digest } => {
                if let Some(m) = self.store.get(&digest).cloned() {
                    if m.round() == round {
                        self.m_insert(m, out);
                    }
                }
            }
        }
    }

    /// Requests a message this node needs but does not hold. If a pending
    /// reqMsg task will fetch that slot anyway, the request is deferred
    /// until the slot is filled.
    fn want(&mut self, sender: NodeId, round: Round, digest: Digest, out: &mut Out) {
        if self.chain_queried.contains(&digest) {
            return;
        }
        let will_fetch = sender != self.id()
            && self.send.as_ref().is_some_and(|s| !s.finished() && round < s.plan.rounds)
            && (self.promises[sender.index()].len() as Round) < round;
        if will_fetch {
            let list = self.deferred.entry((sender, round)).or_default();
            if !list.contains(&digest) {
                list.push(digest);
            }
            return;
        }
        self.chain_query(sender, round, digest, out);
    }

    pub(super) fn flush_deferred(&mut self, out: &mut Out) {
        let mut all: Vec<_> = std::mem::take(&mut self.deferred).into_iter().collect();
        all.sort_by_key(|(k, _)| *k);
        for ((i, v), ds) in all {
            for d in ds {
                if !self.store.contains_key(&d) {
                    self.chain_query(i, v, d, out);
                }
            }
        }
    }
}

/// `prev_set` entries present in every message, by `(sender, digest)`.
fn common_prev(msgs: &[Arc<BroadcastMessage>]) -> Vec<Certificate> {
    let Some((first, rest)) = msgs.split_first() else {
        return Vec::new();
    };
    first
        .prev_set()
        .iter()
        .filter(|c| {
            let key = (c.sender(), *c.message_digest());
            rest.iter().all(|m| {
                m.prev_set().binary_search_by(|x| (x.sender(), *x.message_digest()).cmp(&key)).is_ok()
            })
        })
        .cloned()
        .collect()
}
