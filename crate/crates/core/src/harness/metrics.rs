//! Cost and latency metrics computed from run transcripts.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::transcript::RunTranscript;
use crate::netsim::{CostKind, DeliveryPath, Event};
use crate::{NodeId, Round};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("transcript did not reach quiescence")]
    NotQuiescent,
    #[error("cost model applies to fault-free runs only")]
    NotFaultFree,
    #[error("need at least {need} rounds, transcript has {rounds}")]
    TooFewRounds { rounds: Round, need: Round },
}

/// Step and round distance from a broadcast to its first and last honest
/// delivery.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    /// trigger round minus message round, first honest delivery.
    pub rounds_first: BTreeMap<u64, u64>,
    pub rounds_last: BTreeMap<u64, u64>,
    pub steps_first_mean: f64,
    pub steps_last_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_bits: u64,
    /// Bits not attributed to any envelope kind; zero by construction.
    pub unattributed_bits: i64,
    pub rounds: Round,
    /// Rounds of honest senders delivered by every honest node.
    pub delivered_rounds: Round,
    /// Honest bits per broadcast round, index 0 is round 1.
    pub round_bits: Vec<u64>,
    /// Mean of `round_bits` over rounds 2..R-1.
    pub steady_round_bits: f64,
    /// `C(r)/r` for `r = 1..=R-lag`, where `C(r)` is the cost of the
    /// first `r + lag` rounds.
    pub amortized: Vec<f64>,
    pub lag: Round,
    pub latency: Latency,
    pub deliveries_by_path: BTreeMap<String, u64>,
}

fn path_name(p: DeliveryPath) -> &'static str {
    match p {
        DeliveryPath::Condition1 => "condition1",
        DeliveryPath::Condition2 => "condition2",
        DeliveryPath::Quorum => "quorum",
        DeliveryPath::Bracha => "bracha",
    }
}

fn max_round(t: &RunTranscript) -> Round {
    t.events
        .iter()
        .filter_map(|(_, e)| match e {
            Event::Broadcast { round, .. } => Some(*round),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

/// Builds the report. `lag` is the number of rounds a broadcast needs
/// before it is delivered (`phi` for APM-BRB, 0 for Bracha).
pub fn cost_report(t: &RunTranscript, lag: Round) -> CostReport {
    let rounds = max_round(t);
    let round_bits: Vec<u64> = (1..=rounds).map(|r| t.round_bits.get(&r).copied().unwrap_or(0)).collect();
    let kind_sum: u64 = t.kind_bits.values().sum();
    let steady: Vec<u64> =
        if rounds >= 3 { round_bits[1..rounds as usize - 1].to_vec() } else { round_bits.clone() };
    let steady_round_bits = mean(steady.iter().map(|&b| b as f64));

    let mut amortized = Vec::new();
    let mut acc = 0u64;
    let mut prefix = Vec::with_capacity(round_bits.len());
    for b in &round_bits {
        acc += b;
        prefix.push(acc);
    }
    for r in 1..=rounds.saturating_sub(lag) {
        amortized.push(prefix[(r + lag) as usize - 1] as f64 / r as f64);
    }

    let n = t.honest.len();
    let honest_count = t.honest.iter().filter(|h| **h).count();
    let mut sent: BTreeMap<(NodeId, Round), u64> = BTreeMap::new();
    let mut first: BTreeMap<(NodeId, Round), (u64, u64, usize)> = BTreeMap::new();
    let mut last: BTreeMap<(NodeId, Round), (u64, u64)> = BTreeMap::new();
    let mut deliveries_by_path = BTreeMap::new();
    for (step, e) in &t.events {
        match e {
            Event::Broadcast { sender, round, .. } => {
                sent.entry((*sender, *round)).or_insert(*step);
            }
            Event::Deliver(d) => {
                *deliveries_by_path.entry(path_name(d.path).to_string()).or_insert(0) += 1;
                let lat = d.trigger_round.saturating_sub(d.round);
                let key = (d.sender, d.round);
                let f = first.entry(key).or_insert((*step, lat, 0));
                f.2 += 1;
                last.insert(key, (*step, lat));
            }
            Event::Violation { .. } => {}
        }
    }
    let mut latency = Latency::default();
    let mut steps_first = Vec::new();
    let mut steps_last = Vec::new();
    for (key, (step, lat, count)) in &first {
        *latency.rounds_first.entry(*lat).or_insert(0) += 1;
        let (lstep, llat) = last[key];
        *latency.rounds_last.entry(llat).or_insert(0) += 1;
        if let Some(s0) = sent.get(key) {
            steps_first.push(step.saturating_sub(*s0) as f64);
            if *count == honest_count {
                steps_last.push(lstep.saturating_sub(*s0) as f64);
            }
        }
    }
    latency.steps_first_mean = mean(steps_first.into_iter());
    latency.steps_last_mean = mean(steps_last.into_iter());

    let delivered_rounds = NodeId::all(n)
        .filter(|s| t.honest[s.index()])
        .map(|s| {
            (1..=rounds).take_while(|r| first.get(&(s, *r)).is_some_and(|f| f.2 == honest_count)).count() as Round
        })
        .min()
        .unwrap_or(0);

    CostReport {
        total_bits: t.honest_bits,
        unattributed_bits: t.honest_bits as i64 - kind_sum as i64,
        rounds,
        delivered_rounds,
        round_bits,
        steady_round_bits,
        amortized,
        lag,
        latency,
        deliveries_by_path,
    }
}

impl CostReport {
    /// `round, round_bits, amortized` rows; the last column is empty past
    /// `R - lag`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "round_bits", "amortized_bits_per_round"])?;
        for (i, b) in self.round_bits.iter().enumerate() {
            let a = self.amortized.get(i).map(|v| format!("{v:.1}")).unwrap_or_default();
            w.write_record([(i + 1).to_string(), b.to_string(), a])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Fraction of deliveries made by `path`.
    pub fn path_fraction(&self, path: DeliveryPath) -> f64 {
        let total: u64 = self.deliveries_by_path.values().sum();
        let got = self.deliveries_by_path.get(path_name(path)).copied().unwrap_or(0);
        if total == 0 {
            0.0
        } else {
            got as f64 / total as f64
        }
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = it.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

/// The per-round cost terms of one sender's broadcast, with the envelope
/// kind each is measured by.
pub const COST_TERMS: [(&str, CostKind); 7] = [
    ("req_query", CostKind::ReqQuery),
    ("req_reply", CostKind::ReqReply),
    ("committee_send", CostKind::CommitteeSend),
    ("sync_query", CostKind::SyncQuery),
    ("sync_reply", CostKind::SyncReply),
    ("resend", CostKind::Resend),
    ("share", CostKind::Share),
];

/// Closed-form bits for each entry of [`COST_TERMS`].
pub fn formula_terms(n: usize, nc: usize, payload_bytes: usize, k_bytes: usize) -> [f64; 7] {
    let (n, nc) = (n as f64, nc as f64);
    let m = payload_bytes as f64 * 8.0;
    let k = k_bytes as f64 * 8.0;
    [n, n * (m + n * k + k), nc * (m + n * k), nc * nc, nc * nc * (m + n * k), nc * nc * (m + n * k), n * nc * k]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub measured_bits: f64,
    pub formula_bits: f64,
}

impl TermCheck {
    pub fn within(&self) -> bool {
        self.measured_bits <= self.formula_bits
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostConformance {
    pub n: usize,
    pub nc: usize,
    pub payload_bytes: usize,
    pub k_bytes: usize,
    /// Broadcast rounds averaged over (first and last are partial).
    pub rounds_measured: Round,
    pub terms: Vec<TermCheck>,
    /// Per sender-round bits of kinds outside the formula (chain walks).
    pub unmodelled_bits: f64,
    pub measured_total: f64,
    pub formula_total: f64,
}

impl CostConformance {
    pub fn ratio(&self) -> f64 {
        self.measured_total / self.formula_total
    }

    pub fn all_terms_within(&self) -> bool {
        self.terms.iter().all(TermCheck::within)
    }
}

/// Mean bits per honest sender-round, by term, over the interior rounds
/// of a fault-free run.
pub fn measure_round_cost(
    t: &RunTranscript,
    nc: usize,
    payload_bytes: usize,
    k_bytes: usize,
) -> Result<CostConformance, MetricsError> {
    if !t.outcome.quiescent {
        return Err(MetricsError::NotQuiescent);
    }
    if t.honest.iter().any(|h| !h) {
        return Err(MetricsError::NotFaultFree);
    }
    let rounds = max_round(t);
    if rounds < 3 {
        return Err(MetricsError::TooFewRounds { rounds, need: 3 });
    }
    let n = t.honest.len();
    let interior = 2..rounds;
    let instances = (n as u64 * (rounds - 2)) as f64;
    let mut by_kind: BTreeMap<&str, u64> = BTreeMap::new();
    for i in t.instances.iter().filter(|i| interior.contains(&i.round)) {
        *by_kind.entry(i.kind.as_str()).or_insert(0) += i.bytes * 8;
    }
    let formula = formula_terms(n, nc, payload_bytes, k_bytes);
    let terms: Vec<TermCheck> = COST_TERMS
        .iter()
        .zip(formula)
        .map(|((name, kind), f)| TermCheck {
            term: name.to_string(),
            measured_bits: by_kind.get(kind.name()).copied().unwrap_or(0) as f64 / instances,
            formula_bits: f,
        })
        .collect();
    let modelled: u64 = COST_TERMS.iter().map(|(_, k)| by_kind.get(k.name()).copied().unwrap_or(0)).sum();
    let all: u64 = by_kind.values().sum();
    let unmodelled_bits = (all - modelled) as f64 / instances;
    Ok(CostConformance {
        n,
        nc,
        payload_bytes,
        k_bytes,
        rounds_measured: rounds - 2,
        measured_total: all as f64 / instances,
        formula_total: formula.iter().sum(),
        terms,
        unmodelled_bits,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [4.0, 10.0, 19.0, 31.0].iter().map(|&x: &f64| (x, 3.0 * x.powi(2))).collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn formula_at_n4() {
        let t = formula_terms(4, 4, 1024, 32);
        assert_eq!(t[0], 4.0);
        assert_eq!(t[1], 4.0 * (8192.0 + 4.0 * 256.0 + 256.0));
        assert_eq!(t[6], 4.0 * 4.0 * 256.0);
        let zero = formula_terms(4, 4, 0, 32);
        assert_eq!(zero[2], 4.0 * 4.0 * 256.0);
    }
}
