//! Hashing, node signatures, signature shares and committee certificates.
//!
//! Certificates are formed from at least `threshold` distinct shares of
//! members of one sampled committee. The default provider keeps the shares
//! as a canonical sorted set and verifies them one by one; the cost
//! accountant nevertheless charges every share and certificate exactly
//! `k` bits, as a compact threshold signature would occupy.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::sampling::Committee;
use crate::{NodeId, Round};

pub const DEFAULT_K_BYTES: usize = 32;
pub const MIN_K_BYTES: usize = 16;
const SIG_DOMAIN: &[u8] = b"sig";
const SHARE_DOMAIN: &[u8] = b"share";
pub const MAX_K_BYTES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("unknown signer {0}")]
    UnknownSigner(NodeId),
    #[error("threshold not met: {have} shares, {need} required")]
    ThresholdNotMet { have: usize, need: usize },
    #[error("duplicate share from {0}")]
    DuplicateSigner(NodeId),
    #[error("shares bind different digests")]
    DigestMismatch,
    #[error("{0} is not a member of the committee")]
    NotMember(NodeId),
    #[error("share from {0} does not verify")]
    InvalidShare(NodeId),
    #[error("digest length {0} outside {MIN_K_BYTES}..={MAX_K_BYTES}")]
    BadLength(usize),
}

/// Fixed-length hash output of `k` bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Digest {
    bytes: [u8; MAX_K_BYTES],
    len: u8,
}

impl Digest {
    pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
        if !(MIN_K_BYTES..=MAX_K_BYTES).contains(&bytes.len()) {
            return Err(CryptoError::BadLength(bytes.len()));
        }
        let mut out = [0u8; MAX_K_BYTES];
        out[..bytes.len()].copy_from_slice(bytes);
        Ok(Digest { bytes: out, len: bytes.len() as u8 })
    }

    fn truncate(full: [u8; 32], k_bytes: usize) -> Self {
        let mut bytes = full;
        bytes[k_bytes..].fill(0);
        Digest { bytes, len: k_bytes as u8 }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.len as usize]
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.as_bytes())
    }

    /// The digest read as a big-endian integer, reduced modulo `modulus`.
    pub fn reduce_mod(&self, modulus: u64) -> u64 {
        assert!(modulus > 0);
        let m = modulus as u128;
        self.as_bytes()
            .iter()
            .fold(0u128, |acc, &b| (acc * 256 + b as u128) % m) as u64
    }

    /// Short prefix, handy as a map key where collisions only cost speed.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.bytes[..8].try_into().expect("8 bytes"))
    }
}

impl std::hash::Hash for Digest {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        state.write_u64(self.prefix_u64());
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        Digest::from_slice(&bytes).map_err(serde::de::Error::custom)
    }
}

/// Unkeyed SHA-256, used where a public function of public inputs is needed
/// (committee sampling, certificate fingerprints).
pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// A node's signature over a digest (the PKI signature of the model).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Signature {
    pub signer: NodeId,
    pub bytes: Digest,
}

/// A committee member's share `<m>_j` over a message digest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SignatureShare {
    pub signer: NodeId,
    pub message_digest: Digest,
    pub share_bytes: Digest,
}

#[derive(Debug, PartialEq, Eq)]
struct CertInner {
    message_digest: Digest,
    sender: NodeId,
    round: Round,
    shares: Vec<(NodeId, Digest)>,
    fingerprint: Digest,
}

/// Threshold certificate over one message, bound to the committee of
/// `(sender, round)`. Cheap to clone.
#[derive(Clone, PartialEq, Eq)]
pub struct Certificate(Arc<CertInner>);

impl Certificate {
    /// Assembles a certificate from raw parts without checking anything.
    /// Shares are put in canonical (ascending signer) order.
    pub fn from_parts(
        message_digest: Digest,
        sender: NodeId,
        round: Round,
        mut shares: Vec<(NodeId, Digest)>,
    ) -> Self {
        shares.sort_by_key(|(id, _)| *id);
        let mut h = Sha256::new();
        h.update(message_digest.as_bytes());
        h.update(sender.0.to_be_bytes());
        h.update(round.to_be_bytes());
        for (id, bytes) in &shares {
            h.update(id.0.to_be_bytes());
            h.update(bytes.as_bytes());
        }
        let fingerprint = Digest::truncate(h.finalize().into(), message_digest.len());
        Certificate(Arc::new(CertInner { message_digest, sender, round, shares, fingerprint }))
    }

    pub fn message_digest(&self) -> &Digest {
        &self.0.message_digest
    }

    /// `(sender, round)` of the committee the certificate claims.
    pub fn committee_tag(&self) -> (NodeId, Round) {
        (self.0.sender, self.0.round)
    }

    pub fn sender(&self) -> NodeId {
        self.0.sender
    }

    pub fn round(&self) -> Round {
        self.0.round
    }

    pub fn shares(&self) -> &[(NodeId, Digest)] {
        &self.0.shares
    }

    /// Identifies this exact certificate (content hash).
    pub fn fingerprint(&self) -> &Digest {
        &self.0.fingerprint
    }

    /// Opaque provider bytes: the canonical share list.
    pub fn cert_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.0.shares.len() * 36);
        for (id, bytes) in &self.0.shares {
            out.extend_from_slice(&id.0.to_be_bytes());
            out.extend_from_slice(bytes.as_bytes());
        }
        out
    }
}

impl fmt::Debug for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Cert({}@{} {:?} x{})",
            self.0.sender,
            self.0.round,
            self.0.message_digest,
            self.0.shares.len()
        )
    }
}

/// The threshold-signature abstraction the protocol is written against.
///
/// `aggregate` and `verify_cert` have provider-independent defaults built on
/// `verify_share`.
pub trait CertScheme: Send + Sync + fmt::Debug {
    fn n(&self) -> usize;
    fn k_bytes(&self) -> usize;
    fn hash(&self, input: &[u8]) -> Digest;
    fn sign(&self, signer: NodeId, digest: &Digest) -> Result<Signature, CryptoError>;
    fn verify_signature(&self, sig: &Signature, digest: &Digest) -> bool;
    fn sign_share(&self, signer: NodeId, digest: &Digest) -> Result<SignatureShare, CryptoError>;
    fn verify_share(&self, share: &SignatureShare) -> bool;

    fn aggregate(
        &self,
        shares: &[SignatureShare],
        committee: &Committee,
        threshold: usize,
    ) -> Result<Certificate, CryptoError> {
        let Some(first) = shares.first() else {
            return Err(CryptoError::ThresholdNotMet { have: 0, need: threshold });
        };
        let digest = first.message_digest;
        let mut parts: Vec<(NodeId, Digest)> = Vec::with_capacity(shares.len());
        for share in shares {
            if share.message_digest != digest {
                return Err(CryptoError::DigestMismatch);
            }
            if !committee.contains(share.signer) {
                return Err(CryptoError::NotMember(share.signer));
            }
            if !self.verify_share(share) {
                return Err(CryptoError::InvalidShare(share.signer));
            }
            parts.push((share.signer, share.share_bytes));
        }
        parts.sort_by_key(|(id, _)| *id);
        if let Some(w) = parts.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(CryptoError::DuplicateSigner(w[0].0));
        }
        if parts.len() < threshold {
            return Err(CryptoError::ThresholdNotMet { have: parts.len(), need: threshold });
        }
        Ok(Certificate::from_parts(digest, committee.sender, committee.round, parts))
    }

    fn verify_cert(
        &self,
        cert: &Certificate,
        digest: &Digest,
        committee: &Committee,
        threshold: usize,
    ) -> bool {
        if cert.message_digest() != digest
            || cert.committee_tag() != (committee.sender, committee.round)
            || cert.shares().len() < threshold
        {
            return false;
        }
        let mut last: Option<NodeId> = None;
        for &(signer, share_bytes) in cert.shares() {
            if last.is_some_and(|l| l >= signer) || !committee.contains(signer) {
                return false;
            }
            last = Some(signer);
            let share = SignatureShare { signer, message_digest: *digest, share_bytes };
            if !self.verify_share(&share) {
                return false;
            }
        }
        true
    }
}

/// Deterministic keyed-hash provider. Each node's secret is derived from the
/// setup seed; every node holds the same verification material.
#[derive(Clone)]
pub struct KeyMaterial {
    k_bytes: usize,
    hash_key: [u8; 32],
    /// Per node, hasher states with `secret || domain` (one full block)
    /// already absorbed: signatures at 0, shares at 1.
    keyed: Vec<[Sha256; 2]>,
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyMaterial")
            .field("n", &self.keyed.len())
            .field("k_bytes", &self.k_bytes)
            .finish_non_exhaustive()
    }
}

impl KeyMaterial {
    pub fn new(n: usize, setup_seed: &[u8], k_bytes: usize) -> Result<Self, CryptoError> {
        if !(MIN_K_BYTES..=MAX_K_BYTES).contains(&k_bytes) {
            return Err(CryptoError::BadLength(k_bytes));
        }
        let hash_key = sha256(&[b"apm-brb/hash-key", setup_seed]);
        let keyed = NodeId::all(n)
            .map(|id| {
                let secret = sha256(&[b"apm-brb/node-secret", setup_seed, &id.0.to_be_bytes()]);
                [SIG_DOMAIN, SHARE_DOMAIN].map(|domain| {
                    let mut block = [0u8; 64];
                    block[..32].copy_from_slice(&secret);
                    block[32..32 + domain.len()].copy_from_slice(domain);
                    let mut h = Sha256::new();
                    h.update(block);
                    h
                })
            })
            .collect();
        Ok(KeyMaterial { k_bytes, hash_key, keyed })
    }

    pub fn from_seed_u64(n: usize, seed: u64, k_bytes: usize) -> Result<Self, CryptoError> {
        Self::new(n, &seed.to_be_bytes(), k_bytes)
    }

    fn tag(&self, id: NodeId, domain: usize, digest: &Digest) -> Option<Digest> {
        if id.0 == 0 {
            return None;
        }
        let mut h = self.keyed.get(id.index())?[domain].clone();
        h.update(digest.as_bytes());
        Some(Digest::truncate(h.finalize().into(), self.k_bytes))
    }
}

impl CertScheme for KeyMaterial {
    fn n(&self) -> usize {
        self.keyed.len()
    }

    fn k_bytes(&self) -> usize {
        self.k_bytes
    }

    fn hash(&self, input: &[u8]) -> Digest {
        Digest::truncate(sha256(&[&self.hash_key, input]), self.k_bytes)
    }

    fn sign(&self, signer: NodeId, digest: &Digest) -> Result<Signature, CryptoError> {
        let bytes = self.tag(signer, 0, digest).ok_or(CryptoError::UnknownSigner(signer))?;
        Ok(Signature { signer, bytes })
    }

    fn verify_signature(&self, sig: &Signature, digest: &Digest) -> bool {
        self.tag(sig.signer, 0, digest).is_some_and(|t| t == sig.bytes)
    }

    fn sign_share(&self, signer: NodeId, digest: &Digest) -> Result<SignatureShare, CryptoError> {
        let share_bytes =
            self.tag(signer, 1, digest).ok_or(CryptoError::UnknownSigner(signer))?;
        Ok(SignatureShare { signer, message_digest: *digest, share_bytes })
    }

    fn verify_share(&self, share: &SignatureShare) -> bool {
        self.tag(share.signer, 1, &share.message_digest)
            .is_some_and(|t| t == share.share_bytes)
    }
}

/// A node's own signing handle; nodes never see other nodes' handles.
#[derive(Clone, Debug)]
pub struct NodeSigner {
    id: NodeId,
    scheme: Arc<dyn CertScheme>,
}

impl NodeSigner {
    pub fn new(id: NodeId, scheme: Arc<dyn CertScheme>) -> Self {
        NodeSigner { id, scheme }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn sign(&self, digest: &Digest) -> Signature {
        self.scheme.sign(self.id, digest).expect("signer id is in range")
    }

    pub fn share(&self, digest: &Digest) -> SignatureShare {
        self.scheme.sign_share(self.id, digest).expect("signer id is in range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::Committee;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn keys() -> KeyMaterial {
        KeyMaterial::from_seed_u64(7, 42, DEFAULT_K_BYTES).unwrap()
    }

    fn committee(members: &[u32]) -> Committee {
        Committee::from_members(NodeId(1), 3, members.iter().map(|&m| NodeId(m)).collect(), 7)
    }

    #[test]
    fn hash_is_deterministic_and_fixed_length() {
        let k = keys();
        assert_eq!(k.hash(b"abc"), k.hash(b"abc"));
        assert_eq!(k.hash(b"abc").len(), DEFAULT_K_BYTES);
        let short = KeyMaterial::from_seed_u64(7, 42, 16).unwrap();
        assert_eq!(short.hash(b"abc").len(), 16);
    }

    #[test]
    fn hash_of_empty_string_golden() {
        // Independently recomputed via SHA-256(SHA-256(tag || seed) || "").
        let k = KeyMaterial::from_seed_u64(4, 0, DEFAULT_K_BYTES).unwrap();
        assert_eq!(
            k.hash(b"").to_hex(),
            "6be1924deef974792e43e1cfe8667ea966c2f6ed7a190a7deb1f81965b53c512"
        );
    }

    #[test]
    fn hash_collision_scan() {
        let k = keys();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100_000 {
            let a: [u8; 16] = rng.gen();
            let mut b = a;
            b[rng.gen_range(0..16)] ^= 1 << rng.gen_range(0..8);
            assert_ne!(k.hash(&a), k.hash(&b));
        }
    }

    #[test]
    fn share_round_trip_and_binding() {
        let k = keys();
        let d = k.hash(b"m");
        let share = k.sign_share(NodeId(3), &d).unwrap();
        assert!(k.verify_share(&share));
        let wrong = SignatureShare { message_digest: k.hash(b"m'"), ..share };
        assert!(!k.verify_share(&wrong));
        assert_eq!(k.sign_share(NodeId(8), &d), Err(CryptoError::UnknownSigner(NodeId(8))));
        assert_eq!(k.sign_share(NodeId(0), &d), Err(CryptoError::UnknownSigner(NodeId(0))));
    }

    #[test]
    fn share_bit_flips_are_rejected() {
        let k = keys();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..100u32 {
            let d = k.hash(&i.to_be_bytes());
            let share = k.sign_share(NodeId(1 + i % 7), &d).unwrap();
            let mut bytes = share.share_bytes.as_bytes().to_vec();
            let bit = rng.gen_range(0..bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
            let flipped =
                SignatureShare { share_bytes: Digest::from_slice(&bytes).unwrap(), ..share };
            assert!(!k.verify_share(&flipped));
        }
    }

    #[test]
    fn aggregate_exact_threshold() {
        let k = keys();
        let c = committee(&[1, 2, 4, 5, 6]);
        let d = k.hash(b"m");
        let shares: Vec<_> = [1, 4, 6].iter().map(|&j| k.sign_share(NodeId(j), &d).unwrap()).collect();
        let cert = k.aggregate(&shares, &c, 3).unwrap();
        assert!(k.verify_cert(&cert, &d, &c, 3));
        assert!(!k.verify_cert(&cert, &k.hash(b"x"), &c, 3));
        assert!(!k.verify_cert(&cert, &d, &c, 4));
    }

    #[test]
    fn aggregate_errors() {
        let k = keys();
        let c = committee(&[1, 2, 4, 5, 6]);
        let d = k.hash(b"m");
        let s = |j| k.sign_share(NodeId(j), &d).unwrap();
        assert_eq!(
            k.aggregate(&[s(1), s(2)], &c, 3).unwrap_err(),
            CryptoError::ThresholdNotMet { have: 2, need: 3 }
        );
        assert_eq!(
            k.aggregate(&[s(1), s(2), s(2)], &c, 3).unwrap_err(),
            CryptoError::DuplicateSigner(NodeId(2))
        );
        let other = k.sign_share(NodeId(4), &k.hash(b"other")).unwrap();
        assert_eq!(k.aggregate(&[s(1), s(2), other], &c, 3).unwrap_err(), CryptoError::DigestMismatch);
        assert_eq!(k.aggregate(&[], &c, 1).unwrap_err(), CryptoError::ThresholdNotMet { have: 0, need: 1 });
    }

    #[test]
    fn aggregate_rejects_non_members() {
        let k = keys();
        let c = committee(&[1, 2, 4, 5, 6]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..200u32 {
            let d = k.hash(&i.to_be_bytes());
            let outsider = [3u32, 7][rng.gen_range(0..2)];
            let shares = [1, 2, outsider].map(|j| k.sign_share(NodeId(j), &d).unwrap());
            assert_eq!(k.aggregate(&shares, &c, 3).unwrap_err(), CryptoError::NotMember(NodeId(outsider)));
        }
    }

    #[test]
    fn certificate_bound_to_committee_round() {
        let k = keys();
        let c = committee(&[1, 2, 4, 5, 6]);
        let d = k.hash(b"m");
        let shares: Vec<_> = [1, 2, 4].iter().map(|&j| k.sign_share(NodeId(j), &d).unwrap()).collect();
        let cert = k.aggregate(&shares, &c, 3).unwrap();
        let later = Committee::from_members(NodeId(1), 10, c.members().to_vec(), 7);
        assert!(!k.verify_cert(&cert, &d, &later, 3));
    }

    #[test]
    fn forged_certificates_fail() {
        let k = keys();
        let c = committee(&[1, 2, 4, 5, 6]);
        let d = k.hash(b"m");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let signers = [1u32, 2, 4, 5, 6];
            let parts = signers[..3]
                .iter()
                .map(|&j| {
                    let b: [u8; 32] = rng.gen();
                    (NodeId(j), Digest::from_slice(&b).unwrap())
                })
                .collect();
            let forged = Certificate::from_parts(d, NodeId(1), 3, parts);
            assert!(!k.verify_cert(&forged, &d, &c, 3));
        }
    }

    #[test]
    fn key_material_is_deterministic() {
        let a = KeyMaterial::from_seed_u64(5, 9, 32).unwrap();
        let b = KeyMaterial::from_seed_u64(5, 9, 32).unwrap();
        let d = a.hash(b"z");
        assert_eq!(d, b.hash(b"z"));
        assert_eq!(a.sign_share(NodeId(2), &d), b.sign_share(NodeId(2), &d));
        let c = KeyMaterial::from_seed_u64(5, 10, 32).unwrap();
        assert_ne!(a.sign_share(NodeId(2), &d), c.sign_share(NodeId(2), &d));
    }

    #[test]
    fn reduce_mod_matches_small_values() {
        let d = Digest::from_slice(&[0u8; 31].iter().chain([0x2a].iter()).copied().collect::<Vec<_>>())
            .unwrap();
        assert_eq!(d.reduce_mod(10), 2);
        assert_eq!(d.reduce_mod(43), 42);
    }
}
