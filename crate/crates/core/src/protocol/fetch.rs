//! reqMsg / syncMsg fetching and the responder side of chain queries.

use std::sync::Arc;

use super::message::{BroadcastMessage, FetchMode, FetchRequest, Wire};
use super::node::{Node, Out};
use crate::crypto::{Certificate, Digest};
use crate::netsim::CostKind;
use crate::{NodeId, Round};

/// Outstanding fetch targets for one sender. Fetching is sequential: only
/// the round right after the local `promises` tip is ever requested.
#[derive(Default)]
pub(crate) struct FetchState {
    pub req_target: Round,
    pub req_sent: Option<Round>,
    pub sync_target: Round,
    pub sync_sent: Option<Round>,
}

impl Node {
    /// syncMsg: fetch `promises[sender][1..=target]` from committees.
    pub(super) fn start_sync(&mut self, sender: NodeId, target: Round, out: &mut Out) {
        let st = &mut self.fetch[sender.index()];
        st.sync_target = st.sync_target.max(target);
        self.advance_fetch(sender, out);
    }

    /// reqMsg: fetch `promises[sender][1..=target]` from the sender itself,
    /// with the certificate of the last one.
    pub(super) fn start_req(&mut self, sender: NodeId, target: Round, out: &mut Out) {
        if sender == self.id() {
            return;
        }
        let st = &mut self.fetch[sender.index()];
        st.req_target = st.req_target.max(target);
        self.advance_fetch(sender, out);
    }

    pub(super) fn advance_fetch(&mut self, sender: NodeId, out: &mut Out) {
        if sender == self.id() {
            return;
        }
        let tip = self.promises[sender.index()].len() as Round;
        let y = tip + 1;
        let st = &mut self.fetch[sender.index()];
        let sync = st.sync_target > tip && st.sync_sent != Some(y);
        if sync {
            st.sync_sent = Some(y);
        }
        let req = st.req_target > tip && st.req_sent.is_none_or(|s| s < y);
        let want_cert = y == st.req_target;
        if req {
            st.req_sent = Some(y);
        }
        if sync {
            let wire = Wire::Fetch(FetchRequest { sender, round: y, mode: FetchMode::Committee, want_cert: false });
            let committee = self.committee(sender, y);
            for &j in committee.members() {
                if j != self.id() {
                    self.send_wire(out, j, wire.clone(), CostKind::SyncQuery, sender, y);
                }
            }
        }
        if req {
            let wire = Wire::Fetch(FetchRequest { sender, round: y, mode: FetchMode::Sender, want_cert });
            self.send_wire(out, sender, wire, CostKind::ReqQuery, sender, y);
        }
    }

    pub(super) fn on_fetch(&mut self, from: NodeId, req: FetchRequest, out: &mut Out) {
        if req.round == 0 || req.sender.0 as usize > self.n || from == self.id() {
            return;
        }
        if req.mode == FetchMode::Sender && req.sender != self.id() {
            return;
        }
        if !self.try_answer(from, req, out) {
            self.parked_fetch.entry((req.sender, req.round)).or_default().push((from, req));
        }
    }

    fn try_answer(&mut self, to: NodeId, req: FetchRequest, out: &mut Out) -> bool {
        let Some(msg) = self.promises[req.sender.index()].get((req.round - 1) as usize).cloned() else {
            return false;
        };
        let cert = if req.want_cert {
            match self.certs.get(msg.digest()) {
                Some(c) => Some(c.clone()),
                None => return false,
            }
        } else {
            None
        };
        let kind = match req.mode {
            FetchMode::Sender => CostKind::ReqReply,
            FetchMode::Committee => CostKind::SyncReply,
        };
        self.send_wire(out, to, Wire::FetchReply { request: req, msg, cert }, kind, req.sender, req.round);
        true
    }

    pub(super) fn flush_parked_fetch(&mut self, sender: NodeId, round: Round, out: &mut Out) {
        let Some(parked) = self.parked_fetch.remove(&(sender, round)) else {
            return;
        };
        let mut keep = Vec::new();
        for (to, req) in parked {
            if !self.try_answer(to, req, out) {
                keep.push((to, req));
            }
        }
        if !keep.is_empty() {
            self.parked_fetch.entry((sender, round)).or_default().extend(keep);
        }
    }

    pub(super) fn on_fetch_reply(
        &mut self,
        request: FetchRequest,
        msg: Arc<BroadcastMessage>,
        cert: Option<Certificate>,
        out: &mut Out,
    ) {
        let (i, y) = (request.sender, request.round);
        if msg.sender() != i || msg.round() != y || y == 0 || i.0 as usize > self.n {
            return;
        }
        if !self.accept_message(&msg, out) {
            return;
        }
        if let Some(c) = cert {
            if c.message_digest() == msg.digest() && c.committee_tag() == (i, y) && self.check_cert(&c) {
                self.learn_cert(c, out);
            }
        }
        self.try_extend_promises(&msg, out);
    }

    /// Appends `msg` to `promises` if it links to the current tip through
    /// a valid certificate.
    fn try_extend_promises(&mut self, msg: &Arc<BroadcastMessage>, out: &mut Out) {
        let (i, y) = (msg.sender(), msg.round());
        let tip = &self.promises[i.index()];
        if tip.len() as Round != y - 1 {
            return;
        }
        if y > 1 {
            let Some(pc) = msg.prev_cert() else {
                return;
            };
            if Some(pc.message_digest()) != tip.last().map(|m| m.digest())
                || pc.committee_tag() != (i, y - 1)
                || !self.check_cert(pc)
            {
                return;
            }
            self.learn_cert(pc.clone(), out);
        } else if msg.prev_cert().is_some() || !msg.prev_set().is_empty() {
            return;
        }
        self.write_promise(msg.clone(), out);
    }

    pub(super) fn chain_query(&mut self, sender: NodeId, round: Round, digest: Digest, out: &mut Out) {
        if !self.chain_queried.insert(digest) {
            return;
        }
        self.stats.chain_queries += 1;
        let committee = self.committee(sender, round);
        for &j in committee.members() {
            if j != self.id() {
                self.send_wire(out, j, Wire::ChainQuery { sender, round, digest }, CostKind::ChainQuery, sender, round);
            }
        }
    }

    pub(super) fn on_chain_query(&mut self, from: NodeId, sender: NodeId, round: Round, digest: Digest, out: &mut Out) {
        if from == self.id() {
            return;
        }
        match self.store.get(&digest) {
            Some(m) if m.sender() == sender && m.round() == round => {
                let wire = Wire::ChainReply(m.clone());
                self.send_wire(out, from, wire, CostKind::ChainReply, sender, round);
            }
            Some(_) => {}
            None => {
                let list = self.parked_chain.entry(digest).or_default();
                if !list.contains(&from) {
                    list.push(from);
                }
            }
        }
    }
}
