//! Parameter derivation, the public committee sampler and probabilistic
//! oracles for the committee and signer-collection bounds.

use std::io::Write;
use std::sync::Arc;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::sha256;
use crate::{NodeId, Round};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplingError {
    #[error("resilience violated: n = {n} < 3f + 1 with f = {f}")]
    Resilience { n: usize, f: usize },
    #[error("epsilon must lie in (0, 1), got {0}")]
    Epsilon(f64),
    #[error("invalid override: {0}")]
    Override(String),
}

/// `(n, f, epsilon) -> (n_c, phi)`, plus the uncapped committee size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommitteeParams {
    pub n: usize,
    pub f: usize,
    /// `None` when `n_c` and `phi` were set explicitly.
    pub epsilon: Option<f64>,
    pub nc: usize,
    pub nc_raw: u64,
    pub phi: u64,
}

impl CommitteeParams {
    /// Share count needed for a certificate.
    pub fn threshold(&self) -> usize {
        self.nc / 2 + 1
    }

    /// True when `n_c`/`phi` come from explicit overrides rather than the
    /// bounds; such runs are outside the proven-epsilon regime.
    pub fn is_override(&self) -> bool {
        self.epsilon.is_none()
    }

    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }
}

fn check_resilience(n: usize, f: usize) -> Result<(), SamplingError> {
    if n < 3 * f + 1 {
        return Err(SamplingError::Resilience { n, f });
    }
    Ok(())
}

pub fn phi_for(n: usize, epsilon: f64) -> u64 {
    (2.0 * n as f64 * (1.0 / epsilon).ln()).ceil() as u64
}

pub fn nc_raw_for(phi: u64, epsilon: f64) -> u64 {
    (18.0 * (2.0 * phi as f64 / epsilon).ln()).ceil() as u64
}

pub fn derive_params(n: usize, f: usize, epsilon: f64) -> Result<CommitteeParams, SamplingError> {
    check_resilience(n, f)?;
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(SamplingError::Epsilon(epsilon));
    }
    let phi = phi_for(n, epsilon).max(1);
    let nc_raw = nc_raw_for(phi, epsilon);
    let nc = (nc_raw.min(n as u64) as usize).max(1);
    Ok(CommitteeParams { n, f, epsilon: Some(epsilon), nc, nc_raw, phi })
}

/// Explicit desk-scale parameters.
pub fn override_params(
    n: usize,
    f: usize,
    nc: usize,
    phi: u64,
) -> Result<CommitteeParams, SamplingError> {
    check_resilience(n, f)?;
    if nc == 0 || nc > n {
        return Err(SamplingError::Override(format!("n_c = {nc} must lie in 1..={n}")));
    }
    if phi == 0 {
        return Err(SamplingError::Override("phi must be at least 1".into()));
    }
    Ok(CommitteeParams { n, f, epsilon: None, nc, nc_raw: nc as u64, phi })
}

/// The dealer-provided public seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub seed0: Vec<u8>,
}

impl Seed {
    pub fn new(seed0: impl Into<Vec<u8>>) -> Self {
        Seed { seed0: seed0.into() }
    }

    pub fn from_u64(v: u64) -> Self {
        Seed { seed0: v.to_be_bytes().to_vec() }
    }

    /// `H(seed0 || r mod phi || sender)` with each field length-prefixed.
    pub fn committee_seed(&self, reduced_round: u64, sender: NodeId) -> [u8; 32] {
        let len = (self.seed0.len() as u32).to_be_bytes();
        sha256(&[
            &len,
            &self.seed0,
            &8u32.to_be_bytes(),
            &reduced_round.to_be_bytes(),
            &4u32.to_be_bytes(),
            &sender.0.to_be_bytes(),
        ])
    }
}

#[derive(PartialEq, Eq)]
struct Membership {
    members: Vec<NodeId>,
    mask: Vec<u64>,
}

/// The committee of one `(sender, round)` pair, members sorted ascending.
/// Cheap to clone.
#[derive(Clone, PartialEq, Eq)]
pub struct Committee {
    pub sender: NodeId,
    pub round: Round,
    inner: Arc<Membership>,
}

impl std::fmt::Debug for Committee {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Committee({}@{} {:?})", self.sender, self.round, self.inner.members)
    }
}

impl Committee {
    pub fn from_members(sender: NodeId, round: Round, mut members: Vec<NodeId>, n: usize) -> Self {
        members.sort();
        members.dedup();
        let mut mask = vec![0u64; n.div_ceil(64).max(1)];
        for m in &members {
            let i = m.index();
            mask[i / 64] |= 1 << (i % 64);
        }
        Committee { sender, round, inner: Arc::new(Membership { members, mask }) }
    }

    pub fn members(&self) -> &[NodeId] {
        &self.inner.members
    }

    pub fn contains(&self, id: NodeId) -> bool {
        if id.0 == 0 {
            return false;
        }
        let i = id.index();
        self.inner.mask.get(i / 64).is_some_and(|w| w & (1 << (i % 64)) != 0)
    }

    pub fn len(&self) -> usize {
        self.inner.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.members.is_empty()
    }

    /// Same membership relabelled to another round of the same period class.
    pub fn for_round(&self, round: Round) -> Self {
        Committee { round, ..self.clone() }
    }
}

/// All committees for rounds `1..=max_round`, computed once and shared.
/// Rounds outside the table are sampled on demand.
#[derive(Debug)]
pub struct CommitteeTable {
    seed: Seed,
    params: CommitteeParams,
    by_residue: Vec<Vec<Option<Committee>>>,
}

impl CommitteeTable {
    pub fn new(seed: Seed, params: CommitteeParams, max_round: Round) -> Self {
        let residues = params.phi.min(max_round + 1) as usize;
        let mut by_residue = vec![vec![None; residues]; params.n];
        for round in 1..=max_round.min(params.phi) {
            let residue = (round % params.phi) as usize;
            for sender in NodeId::all(params.n) {
                by_residue[sender.index()][residue] =
                    Some(sample_committee(&seed, sender, round, &params));
            }
        }
        CommitteeTable { seed, params, by_residue }
    }

    pub fn params(&self) -> &CommitteeParams {
        &self.params
    }

    pub fn seed(&self) -> &Seed {
        &self.seed
    }

    pub fn get(&self, sender: NodeId, round: Round) -> Committee {
        let residue = (round % self.params.phi) as usize;
        match self.by_residue.get(sender.index()).and_then(|r| r.get(residue)) {
            Some(Some(c)) => c.for_round(round),
            _ => sample_committee(&self.seed, sender, round, &self.params),
        }
    }
}

fn reduce(bytes: &[u8; 32], n: u64) -> u64 {
    bytes.iter().fold(0u128, |acc, &b| (acc * 256 + b as u128) % n as u128) as u64
}

/// Deterministic committee of `sender` for `round`.
///
/// Collisions are skipped and re-hashed until `n_c` distinct members are
/// drawn; `(seed mod n)` carries a modulo bias of order `n / 2^256`.
pub fn sample_committee(
    seed: &Seed,
    sender: NodeId,
    round: Round,
    params: &CommitteeParams,
) -> Committee {
    let n = params.n;
    if params.nc >= n {
        return Committee::from_members(sender, round, NodeId::all(n).collect(), n);
    }
    let mut state = seed.committee_seed(round % params.phi, sender);
    let mut chosen = vec![false; n];
    let mut members = Vec::with_capacity(params.nc);
    while members.len() < params.nc {
        let idx = reduce(&state, n as u64) as usize;
        if !chosen[idx] {
            chosen[idx] = true;
            members.push(NodeId::from_index(idx));
        }
        state = sha256(&[&state]);
    }
    Committee::from_members(sender, round, members, n)
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

/// Exact probability that a uniform `n_c`-subset of `n` nodes, `f` of them
/// Byzantine, holds at least `n_c/2 + 1` honest members.
pub fn honest_majority_prob(n: usize, f: usize, nc: usize) -> BigRational {
    assert!(nc > 0 && nc <= n && f <= n);
    let honest = (n - f) as u64;
    let need = (nc / 2 + 1) as u64;
    let mut num = BigUint::zero();
    for h in need..=(nc as u64).min(honest) {
        num += binomial(honest, h) * binomial(f as u64, nc as u64 - h);
    }
    BigRational::new(num.into(), binomial(n as u64, nc as u64).into())
}

pub fn to_f64(q: &BigRational) -> f64 {
    q.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloEstimate {
    pub draws: u64,
    pub hits: u64,
    pub fraction: f64,
    pub std_err: f64,
}

impl MonteCarloEstimate {
    fn new(draws: u64, hits: u64) -> Self {
        let p = hits as f64 / draws as f64;
        MonteCarloEstimate { draws, hits, fraction: p, std_err: (p * (1.0 - p) / draws as f64).sqrt() }
    }
}

/// Fraction of sampled committees with an honest majority, taking nodes
/// `1..=f` as Byzantine. Each draw uses a fresh seed.
pub fn mc_honest_majority(params: &CommitteeParams, draws: u64, rng_seed: u64) -> MonteCarloEstimate {
    let mut hits = 0;
    let need = params.threshold();
    for d in 0..draws {
        let seed = Seed::new([rng_seed.to_be_bytes(), d.to_be_bytes()].concat());
        let c = sample_committee(&seed, NodeId(1), 1, params);
        let honest = c.members().iter().filter(|m| m.0 as usize > params.f).count();
        if honest >= need {
            hits += 1;
        }
    }
    MonteCarloEstimate::new(draws, hits)
}

/// `sum_{a=1}^{f+1} (2f+1)/(2f+2-a)`: expected rounds until `f+1` distinct
/// signers are seen when each round draws one of `2f+1` honest nodes.
pub fn coupon_expectation(f: usize) -> f64 {
    let h = (2 * f + 1) as f64;
    (1..=f + 1).map(|a| h / (2 * f + 2 - a) as f64).sum()
}

pub fn coupon_expectation_exact(f: usize) -> BigRational {
    let h = BigUint::from(2 * f as u64 + 1);
    (1..=f as u64 + 1).fold(BigRational::zero(), |acc, a| {
        acc + BigRational::new(h.clone().into(), BigUint::from(2 * f as u64 + 2 - a).into())
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CouponStats {
    pub f: usize,
    pub trials: u64,
    pub analytic_mean: f64,
    pub empirical_mean: f64,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
    #[serde(skip)]
    pub samples: Vec<u64>,
}

impl CouponStats {
    /// Empirical `P(rounds > t)`.
    pub fn tail(&self, t: u64) -> f64 {
        self.samples.iter().filter(|&&s| s > t).count() as f64 / self.samples.len() as f64
    }
}

pub fn coupon_rounds_stats(f: usize, trials: u64, rng_seed: u64) -> CouponStats {
    assert!(trials >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let pool = 2 * f + 1;
    let mut seen = vec![0u64; pool];
    let mut samples = Vec::with_capacity(trials as usize);
    for t in 1..=trials {
        let (mut distinct, mut rounds) = (0, 0u64);
        while distinct < f + 1 {
            rounds += 1;
            let j = rng.gen_range(0..pool);
            if seen[j] != t {
                seen[j] = t;
                distinct += 1;
            }
        }
        samples.push(rounds);
    }
    let empirical_mean = samples.iter().sum::<u64>() as f64 / trials as f64;
    let mut sorted = samples.clone();
    sorted.sort_unstable();
    let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
    CouponStats {
        f,
        trials,
        analytic_mean: coupon_expectation(f),
        empirical_mean,
        p50: q(0.5),
        p90: q(0.9),
        p99: q(0.99),
        max: *sorted.last().expect("trials >= 1"),
        samples,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamRow {
    pub n: usize,
    pub f: usize,
    pub epsilon: f64,
    pub nc_raw: u64,
    pub nc: usize,
    pub phi: u64,
    pub honest_majority_prob: f64,
}

pub fn param_table(points: &[(usize, usize, f64)]) -> Result<Vec<ParamRow>, SamplingError> {
    points
        .iter()
        .map(|&(n, f, epsilon)| {
            let p = derive_params(n, f, epsilon)?;
            Ok(ParamRow {
                n,
                f,
                epsilon,
                nc_raw: p.nc_raw,
                nc: p.nc,
                phi: p.phi,
                honest_majority_prob: to_f64(&honest_majority_prob(n, f, p.nc)),
            })
        })
        .collect()
}

pub fn write_param_csv<W: Write>(rows: &[ParamRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;

    #[test]
    fn derived_examples() {
        let eps = 2f64.powi(-20);
        let p = derive_params(100, 33, eps).unwrap();
        assert_eq!(p.phi, 2773);
        assert_eq!(p.nc_raw, 405);
        assert_eq!(p.nc, 100);
        assert_eq!(derive_params(4, 1, 0.5).unwrap().phi, 6);
    }

    #[test]
    fn derive_errors() {
        assert_eq!(derive_params(3, 1, 0.1), Err(SamplingError::Resilience { n: 3, f: 1 }));
        assert!(matches!(derive_params(4, 1, 0.0), Err(SamplingError::Epsilon(_))));
        assert!(matches!(derive_params(4, 1, 1.0), Err(SamplingError::Epsilon(_))));
        assert!(override_params(4, 1, 5, 2).is_err());
        assert!(override_params(4, 1, 4, 0).is_err());
    }

    #[test]
    fn threshold_arithmetic() {
        let p = override_params(10, 3, 5, 2).unwrap();
        assert_eq!(p.threshold(), 3);
        assert_eq!(override_params(10, 3, 4, 2).unwrap().threshold(), 3);
    }

    #[test]
    fn sampler_is_deterministic_and_periodic() {
        let p = override_params(31, 10, 9, 4).unwrap();
        let seed = Seed::from_u64(5);
        for s in NodeId::all(31) {
            for r in 1..20 {
                let a = sample_committee(&seed, s, r, &p);
                assert_eq!(a, sample_committee(&seed, s, r, &p));
                assert_eq!(a.members(), sample_committee(&seed, s, r + p.phi, &p).members());
                assert_eq!(a.len(), 9);
                assert!(a.members().windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn table_matches_direct_sampling() {
        let p = override_params(19, 6, 7, 4).unwrap();
        let seed = Seed::from_u64(3);
        let t = CommitteeTable::new(seed.clone(), p, 6);
        for s in NodeId::all(19) {
            for r in 1..12 {
                assert_eq!(t.get(s, r), sample_committee(&seed, s, r, &p));
            }
        }
    }

    #[test]
    fn full_committee_when_capped() {
        let p = override_params(7, 2, 7, 3).unwrap();
        let c = sample_committee(&Seed::from_u64(9), NodeId(3), 4, &p);
        assert_eq!(c.members(), NodeId::all(7).collect::<Vec<_>>());
    }

    #[test]
    fn committees_vary_with_sender_and_round() {
        let p = override_params(40, 13, 9, 60).unwrap();
        let seed = Seed::from_u64(1);
        let a = sample_committee(&seed, NodeId(1), 1, &p);
        assert_ne!(a.members(), sample_committee(&seed, NodeId(2), 1, &p).members());
        assert_ne!(a.members(), sample_committee(&seed, NodeId(1), 2, &p).members());
    }

    #[test]
    fn hypergeometric_exact() {
        let q = honest_majority_prob(10, 3, 5);
        assert_eq!(q, BigRational::new(BigInt::from(231), BigInt::from(252)));
        assert!(honest_majority_prob(10, 0, 3).is_one());
        for n in [4usize, 7, 10, 31] {
            let f = (n - 1) / 3;
            assert!(honest_majority_prob(n, f, n).is_one());
        }
    }

    #[test]
    fn coupon_closed_form() {
        assert_eq!(coupon_expectation(0), 1.0);
        assert!((coupon_expectation(1) - 2.5).abs() < 1e-12);
        assert_eq!(
            coupon_expectation_exact(1),
            BigRational::new(BigInt::from(5), BigInt::from(2))
        );
    }

    #[test]
    fn coupon_monte_carlo_f10() {
        let s = coupon_rounds_stats(10, 100_000, 11);
        assert!((s.empirical_mean - s.analytic_mean).abs() / s.analytic_mean < 0.02);
        assert!(s.p50 <= s.p90 && s.p90 <= s.p99 && s.p99 <= s.max);
        assert!(s.samples.iter().all(|&x| x >= 11));
    }

    #[test]
    fn param_csv_emits_header_and_rows() {
        let rows = param_table(&[(4, 1, 0.5), (100, 33, 2f64.powi(-20))]).unwrap();
        let mut buf = Vec::new();
        write_param_csv(&rows, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("n,f,epsilon,nc_raw,nc,phi,honest_majority_prob"));
        assert!(s.contains("100,33,"));
        assert!(s.contains(",405,100,2773,1"));
    }
}
