//! Serializable record of one run.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use super::{CostKind, Event, RunOutcome, Simulation, Traffic};
use crate::{NodeId, Round};

/// Honest traffic attributed to one broadcast instance and envelope kind.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceTraffic {
    pub sender: NodeId,
    pub round: Round,
    pub kind: String,
    pub bytes: u64,
    pub envelopes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTranscript {
    /// The configuration the run was built from, echoed verbatim.
    pub config: serde_json::Value,
    pub seed: u64,
    pub honest: Vec<bool>,
    pub outcome: RunOutcome,
    /// `(step, event)` in emission order, honest processes only.
    pub events: Vec<(u64, Event)>,
    pub honest_bits: u64,
    pub honest_envelopes: u64,
    pub byzantine_bits: u64,
    /// Honest bits per broadcast round.
    pub round_bits: BTreeMap<Round, u64>,
    pub kind_bits: BTreeMap<String, u64>,
    pub instances: Vec<InstanceTraffic>,
}

impl RunTranscript {
    pub fn capture<M>(sim: &Simulation<M>, outcome: RunOutcome, config: serde_json::Value, seed: u64) -> Self {
        let t = sim.traffic();
        let mut round_bits = BTreeMap::new();
        let mut instances: Vec<InstanceTraffic> = t
            .instances()
            .map(|(sender, round, kind, tr)| {
                *round_bits.entry(round).or_insert(0) += tr.bytes * 8;
                InstanceTraffic { sender, round, kind: kind.name().to_string(), bytes: tr.bytes, envelopes: tr.envelopes }
            })
            .collect();
        instances.sort_by(|a, b| (a.sender, a.round, &a.kind).cmp(&(b.sender, b.round, &b.kind)));
        let kind_bits = CostKind::ALL
            .iter()
            .filter(|k| t.kind(**k).envelopes > 0)
            .map(|k| (k.name().to_string(), t.kind(*k).bytes * 8))
            .collect();
        RunTranscript {
            config,
            seed,
            honest: sim.honest().to_vec(),
            outcome,
            events: sim.events().to_vec(),
            honest_bits: t.total.bytes * 8,
            honest_envelopes: t.total.envelopes,
            byzantine_bits: Traffic::bits(&t.byzantine),
            round_bits,
            kind_bits,
            instances,
        }
    }

    pub fn write_json(&self, path: &Path) -> anyhow::Result<()> {
        let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> anyhow::Result<Self> {
        let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }

    /// Bits attributed to `kind` across all instances of `round`.
    pub fn kind_round_bits(&self, kind: &str, round: Round) -> u64 {
        self.instances.iter().filter(|i| i.round == round && i.kind == kind).map(|i| i.bytes * 8).sum()
    }
}

impl Traffic {
    pub fn bits(&self) -> u64 {
        self.bytes * 8
    }
}
