//! Broadcast messages and the wire vocabulary, with canonical encodings.
//!
//! Two encodings exist. The accounted encoding is what the cost accountant
//! charges and what message digests are computed over: every certificate
//! appears as its `k`-byte fingerprint. The full encoding is lossless and
//! carries certificates share by share.

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::crypto::{CertScheme, Certificate, Digest, NodeSigner, Signature};
use crate::{NodeId, Round};

pub type Trigger = Option<(Certificate, Round)>;

/// Unsigned content of a broadcast message.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageBody {
    pub sender: NodeId,
    pub round: Round,
    pub payload: Arc<[u8]>,
    pub prev_cert: Option<Certificate>,
    pub prev_set: Vec<Certificate>,
    pub triggers: Vec<Trigger>,
}

/// `m_r^i`: signed by its sender, immutable, digest computed at creation.
#[derive(Clone, PartialEq, Eq)]
pub struct BroadcastMessage {
    body: MessageBody,
    signature: Signature,
    digest: Digest,
    accounted_len: usize,
}

impl fmt::Debug for BroadcastMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Msg({}@{} {:?})", self.body.sender, self.body.round, self.digest)
    }
}

impl BroadcastMessage {
    /// Signs `body` with `signer`; the body's sender should be the signer.
    pub fn new(scheme: &dyn CertScheme, signer: &NodeSigner, body: MessageBody) -> Arc<Self> {
        let body = canonical(body);
        let digest = body_digest(scheme, &body);
        let signature = signer.sign(&digest);
        Self::finish(scheme, body, digest, signature)
    }

    /// Attaches an arbitrary signature. Receivers reject it unless it is the
    /// body sender's valid signature over the digest.
    pub fn with_signature(
        scheme: &dyn CertScheme,
        body: MessageBody,
        signature: Signature,
    ) -> Arc<Self> {
        let body = canonical(body);
        let digest = body_digest(scheme, &body);
        Self::finish(scheme, body, digest, signature)
    }

    fn finish(
        scheme: &dyn CertScheme,
        body: MessageBody,
        digest: Digest,
        signature: Signature,
    ) -> Arc<Self> {
        let accounted_len = body_len(&body, scheme.k_bytes()) + scheme.k_bytes();
        Arc::new(BroadcastMessage { body, signature, digest, accounted_len })
    }

    pub fn body(&self) -> &MessageBody {
        &self.body
    }

    pub fn sender(&self) -> NodeId {
        self.body.sender
    }

    pub fn round(&self) -> Round {
        self.body.round
    }

    pub fn payload(&self) -> &[u8] {
        &self.body.payload
    }

    pub fn prev_cert(&self) -> Option<&Certificate> {
        self.body.prev_cert.as_ref()
    }

    pub fn prev_set(&self) -> &[Certificate] {
        &self.body.prev_set
    }

    pub fn triggers(&self) -> &[Trigger] {
        &self.body.triggers
    }

    pub fn signature(&self) -> &Signature {
        &self.signature
    }

    pub fn digest(&self) -> &Digest {
        &self.digest
    }

    /// Digest of the previous chain message, if any.
    pub fn prev_digest(&self) -> Option<Digest> {
        self.body.prev_cert.as_ref().map(|c| *c.message_digest())
    }

    /// Accounted size in bytes (what the cost accountant charges).
    pub fn accounted_len(&self) -> usize {
        self.accounted_len
    }

    pub fn signature_valid(&self, scheme: &dyn CertScheme) -> bool {
        self.signature.signer == self.body.sender
            && scheme.verify_signature(&self.signature, &self.digest)
    }

    pub fn encode_accounted(&self, k_bytes: usize) -> Vec<u8> {
        let mut w = Writer::default();
        write_body(&mut w, &self.body, Mode::Accounted(k_bytes));
        w.raw(self.signature.bytes.as_bytes());
        w.buf
    }

    pub fn encode_full(&self) -> Vec<u8> {
        let mut w = Writer::default();
        write_body(&mut w, &self.body, Mode::Full);
        w.varint(self.signature.signer.0 as u64);
        w.raw(self.signature.bytes.as_bytes());
        w.buf
    }

    pub fn decode_full(scheme: &dyn CertScheme, bytes: &[u8]) -> Result<Arc<Self>, DecodeError> {
        let k = scheme.k_bytes();
        let mut r = Reader { buf: bytes, k };
        let sender = NodeId(r.varint_u32()?);
        let round = r.varint()?;
        let len = r.varint()? as usize;
        let payload: Arc<[u8]> = r.take(len)?.into();
        let prev_cert = match r.byte()? {
            0 => None,
            1 => Some(r.cert()?),
            t => return Err(DecodeError::Tag(t)),
        };
        let count = r.varint()? as usize;
        let prev_set = (0..count).map(|_| r.cert()).collect::<Result<_, _>>()?;
        let n = r.varint()? as usize;
        let mut triggers = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            triggers.push(match r.byte()? {
                0 => None,
                1 => {
                    let cert = r.cert()?;
                    Some((cert, r.u64()?))
                }
                t => return Err(DecodeError::Tag(t)),
            });
        }
        let signer = NodeId(r.varint_u32()?);
        let sig = r.digest()?;
        if !r.buf.is_empty() {
            return Err(DecodeError::Trailing(r.buf.len()));
        }
        let body = MessageBody { sender, round, payload, prev_cert, prev_set, triggers };
        Ok(Self::with_signature(scheme, body, Signature { signer, bytes: sig }))
    }
}

fn canonical(mut body: MessageBody) -> MessageBody {
    body.prev_set.sort_by_key(|c| (c.sender(), *c.message_digest()));
    body
}

fn body_digest(scheme: &dyn CertScheme, body: &MessageBody) -> Digest {
    let mut w = Writer::default();
    write_body(&mut w, body, Mode::Accounted(scheme.k_bytes()));
    scheme.hash(&w.buf)
}

fn varint_len(mut v: u64) -> usize {
    let mut n = 1;
    while v >= 0x80 {
        v >>= 7;
        n += 1;
    }
    n
}

fn body_len(body: &MessageBody, k: usize) -> usize {
    let mut len = varint_len(body.sender.0 as u64)
        + varint_len(body.round)
        + varint_len(body.payload.len() as u64)
        + body.payload.len()
        + 1
        + body.prev_cert.as_ref().map_or(0, |_| k)
        + varint_len(body.prev_set.len() as u64)
        + varint_len(body.triggers.len() as u64);
    len += body.prev_set.iter().map(|c| varint_len(c.sender().0 as u64) + k).sum::<usize>();
    len += body.triggers.iter().map(|t| 1 + t.as_ref().map_or(0, |_| k + 8)).sum::<usize>();
    len
}

#[derive(Clone, Copy)]
enum Mode {
    Accounted(usize),
    Full,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn cert(&mut self, c: &Certificate, mode: Mode) {
        match mode {
            Mode::Accounted(k) => self.raw(&c.fingerprint().as_bytes()[..k]),
            Mode::Full => {
                self.varint(c.sender().0 as u64);
                self.varint(c.round());
                self.raw(c.message_digest().as_bytes());
                self.varint(c.shares().len() as u64);
                for (id, bytes) in c.shares() {
                    self.varint(id.0 as u64);
                    self.raw(bytes.as_bytes());
                }
            }
        }
    }
}

fn write_body(w: &mut Writer, body: &MessageBody, mode: Mode) {
    w.varint(body.sender.0 as u64);
    w.varint(body.round);
    w.varint(body.payload.len() as u64);
    w.raw(&body.payload);
    match &body.prev_cert {
        None => w.buf.push(0),
        Some(c) => {
            w.buf.push(1);
            w.cert(c, mode);
        }
    }
    w.varint(body.prev_set.len() as u64);
    for c in &body.prev_set {
        if let Mode::Accounted(_) = mode {
            w.varint(c.sender().0 as u64);
        }
        w.cert(c, mode);
    }
    w.varint(body.triggers.len() as u64);
    for t in &body.triggers {
        match t {
            None => w.buf.push(0),
            Some((c, round)) => {
                w.buf.push(1);
                w.cert(c, mode);
                w.raw(&round.to_be_bytes());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    Eof,
    #[error("bad tag byte {0}")]
    Tag(u8),
    #[error("varint overflow")]
    Varint,
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

struct Reader<'a> {
    buf: &'a [u8],
    k: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Eof);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn byte(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn varint(&mut self) -> Result<u64, DecodeError> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.byte()?;
            v |= ((b & 0x7f) as u64) << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(DecodeError::Varint)
    }

    fn varint_u32(&mut self) -> Result<u32, DecodeError> {
        u32::try_from(self.varint()?).map_err(|_| DecodeError::Varint)
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn digest(&mut self) -> Result<Digest, DecodeError> {
        let k = self.k;
        Digest::from_slice(self.take(k)?).map_err(|_| DecodeError::Eof)
    }

    fn cert(&mut self) -> Result<Certificate, DecodeError> {
        let sender = NodeId(self.varint_u32()?);
        let round = self.varint()?;
        let digest = self.digest()?;
        let count = self.varint()? as usize;
        let mut shares = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = NodeId(self.varint_u32()?);
            shares.push((id, self.digest()?));
        }
        Ok(Certificate::from_parts(digest, sender, round, shares))
    }
}

/// Which holders a fetch asks: the sender itself or the round's committee.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FetchMode {
    Sender,
    Committee,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FetchRequest {
    pub sender: NodeId,
    pub round: Round,
    pub mode: FetchMode,
    /// Also return a standalone certificate over the message.
    pub want_cert: bool,
}

/// Everything APM-BRB nodes send each other.
#[derive(Clone, Debug)]
pub enum Wire {
    /// Initial committee send, or a member's re-send.
    Broadcast(Arc<BroadcastMessage>),
    Share { sender: NodeId, round: Round, share: crate::crypto::SignatureShare },
    Fetch(FetchRequest),
    FetchReply { request: FetchRequest, msg: Arc<BroadcastMessage>, cert: Option<Certificate> },
    ChainQuery { sender: NodeId, round: Round, digest: Digest },
    ChainReply(Arc<BroadcastMessage>),
}

impl Wire {
    /// Accounted size in bytes: one kind byte plus the fields.
    pub fn accounted_len(&self, k: usize) -> usize {
        let id = |n: NodeId| varint_len(n.0 as u64);
        1 + match self {
            Wire::Broadcast(m) | Wire::ChainReply(m) => m.accounted_len(),
            Wire::Share { sender, round, share } => {
                id(*sender) + varint_len(*round) + id(share.signer) + 2 * k
            }
            Wire::Fetch(r) => id(r.sender) + varint_len(r.round) + 1,
            Wire::FetchReply { cert, msg, .. } => msg.accounted_len() + 1 + cert.as_ref().map_or(0, |_| k),
            Wire::ChainQuery { sender, round, .. } => id(*sender) + varint_len(*round) + k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyMaterial;
    use crate::sampling::Committee;

    fn setup() -> (Arc<KeyMaterial>, NodeSigner) {
        let keys = Arc::new(KeyMaterial::from_seed_u64(4, 1, 32).unwrap());
        let signer = NodeSigner::new(NodeId(2), keys.clone());
        (keys, signer)
    }

    fn cert_for(keys: &KeyMaterial, d: &Digest, sender: u32, round: Round) -> Certificate {
        let c = Committee::from_members(NodeId(sender), round, NodeId::all(4).collect(), 4);
        let shares: Vec<_> = (1..=3).map(|j| keys.sign_share(NodeId(j), d).unwrap()).collect();
        keys.aggregate(&shares, &c, 3).unwrap()
    }

    #[test]
    fn round_one_message_sizes() {
        let (keys, signer) = setup();
        let body = MessageBody {
            sender: NodeId(2),
            round: 1,
            payload: vec![7u8; 1024].into(),
            prev_cert: None,
            prev_set: vec![],
            triggers: vec![None; 4],
        };
        let m = BroadcastMessage::new(keys.as_ref(), &signer, body);
        // sender, round, len(2 bytes), payload, tag, count, n, 4 tags, sig
        assert_eq!(m.accounted_len(), 1 + 1 + 2 + 1024 + 1 + 1 + 1 + 4 + 32);
        assert_eq!(m.encode_accounted(32).len(), m.accounted_len());
        assert!(m.signature_valid(keys.as_ref()));
    }

    #[test]
    fn full_encoding_round_trips() {
        let (keys, signer) = setup();
        let d = keys.hash(b"prev");
        let c = cert_for(&keys, &d, 2, 1);
        let other = cert_for(&keys, &keys.hash(b"o"), 1, 1);
        let body = MessageBody {
            sender: NodeId(2),
            round: 2,
            payload: vec![1, 2, 3].into(),
            prev_cert: Some(c.clone()),
            prev_set: vec![c.clone(), other.clone()],
            triggers: vec![None, Some((other, 1)), None, None],
        };
        let m = BroadcastMessage::new(keys.as_ref(), &signer, body);
        let back = BroadcastMessage::decode_full(keys.as_ref(), &m.encode_full()).unwrap();
        assert_eq!(*back, *m);
        assert_eq!(m.prev_set()[0].sender(), NodeId(1));
    }

    #[test]
    fn forged_signature_is_detected() {
        let (keys, _) = setup();
        let body = MessageBody {
            sender: NodeId(3),
            round: 1,
            payload: vec![0].into(),
            prev_cert: None,
            prev_set: vec![],
            triggers: vec![None; 4],
        };
        let impostor = NodeSigner::new(NodeId(2), keys.clone());
        let m = BroadcastMessage::new(keys.as_ref(), &impostor, body);
        assert!(!m.signature_valid(keys.as_ref()));
    }

    #[test]
    fn decode_rejects_truncation() {
        let (keys, signer) = setup();
        let body = MessageBody {
            sender: NodeId(2),
            round: 1,
            payload: vec![9; 40].into(),
            prev_cert: None,
            prev_set: vec![],
            triggers: vec![None; 4],
        };
        let bytes = BroadcastMessage::new(keys.as_ref(), &signer, body).encode_full();
        for cut in 0..bytes.len() {
            assert!(BroadcastMessage::decode_full(keys.as_ref(), &bytes[..cut]).is_err());
        }
    }
}
