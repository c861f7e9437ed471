//! Experiment configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::netsim::byzantine::{Behavior, FaultProfile};
use crate::netsim::SchedulerPolicy;
use crate::sampling::{derive_params, override_params, CommitteeParams};
use crate::{NodeId, Round};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    #[default]
    Apm,
    Bracha,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    #[default]
    None,
    Equivocator,
    Silent,
    Selective,
    GarbageCerts,
    Cooperative,
}

impl FaultKind {
    pub const PROFILES: [FaultKind; 5] =
        [FaultKind::None, FaultKind::Equivocator, FaultKind::Silent, FaultKind::Selective, FaultKind::GarbageCerts];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::None => "none",
            FaultKind::Equivocator => "equivocator",
            FaultKind::Silent => "silent",
            FaultKind::Selective => "selective",
            FaultKind::GarbageCerts => "garbage_certs",
            FaultKind::Cooperative => "cooperative",
        }
    }
}

/// How to pick the corrupted set. Without explicit `nodes`, `count` nodes
/// are drawn from the run seed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub count: Option<usize>,
    pub nodes: Option<Vec<NodeId>>,
}

impl FaultSpec {
    pub fn of(kind: FaultKind) -> Self {
        FaultSpec { kind, count: None, nodes: None }
    }

    /// The concrete profile for one run; never corrupts more than `f`.
    pub fn resolve(&self, n: usize, f: usize, seed: u64) -> FaultProfile {
        if self.kind == FaultKind::None {
            return FaultProfile::none();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB42_F00D);
        let mut ids: Vec<NodeId> = match &self.nodes {
            Some(list) => list.clone(),
            None => {
                let mut all: Vec<NodeId> = NodeId::all(n).collect();
                all.shuffle(&mut rng);
                all.truncate(self.count.unwrap_or(1));
                all
            }
        };
        ids.truncate(f);
        ids.sort();
        let byzantine = ids
            .into_iter()
            .map(|id| {
                let behavior = match self.kind {
                    FaultKind::None => unreachable!(),
                    FaultKind::Equivocator => Behavior::Equivocator,
                    FaultKind::Silent => Behavior::Silent,
                    FaultKind::GarbageCerts => Behavior::GarbageCerts,
                    FaultKind::Cooperative => Behavior::Cooperative,
                    FaultKind::Selective => {
                        let mut targets: Vec<NodeId> = NodeId::all(n).filter(|&j| j != id).collect();
                        targets.shuffle(&mut rng);
                        targets.truncate(n.div_ceil(2));
                        targets.sort();
                        Behavior::SelectiveSend { targets }
                    }
                };
                (id, behavior)
            })
            .collect();
        FaultProfile { byzantine }
    }
}

fn default_payload() -> usize {
    1024
}
fn default_k() -> usize {
    32
}
fn default_rounds() -> Round {
    10
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_max_steps() -> u64 {
    50_000_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub protocol: ProtocolKind,
    pub n: usize,
    /// Defaults to `floor((n-1)/3)`.
    #[serde(default)]
    pub f: Option<usize>,
    /// Derive `(n_c, phi)` from this failure probability...
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// ...or set them directly (outside the proven-epsilon regime).
    #[serde(default)]
    pub nc: Option<usize>,
    #[serde(default)]
    pub phi: Option<u64>,
    #[serde(default = "default_payload")]
    pub payload_bytes: usize,
    #[serde(default = "default_k")]
    pub k_bytes: usize,
    #[serde(default = "default_rounds")]
    pub rounds: Round,
    #[serde(default)]
    pub faults: FaultSpec,
    #[serde(default = "default_scheduler")]
    pub scheduler: SchedulerPolicy,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Mutation switch for sensitivity runs.
    #[serde(default)]
    pub skip_equivocation_guard: bool,
}

fn default_scheduler() -> SchedulerPolicy {
    SchedulerPolicy::RandomAsync
}

impl ExperimentConfig {
    /// Fault-free APM run with explicit `(n_c, phi)`.
    pub fn desk(n: usize, nc: usize, phi: u64, rounds: Round) -> Self {
        ExperimentConfig {
            protocol: ProtocolKind::Apm,
            n,
            f: None,
            epsilon: None,
            nc: Some(nc),
            phi: Some(phi),
            payload_bytes: default_payload(),
            k_bytes: default_k(),
            rounds,
            faults: FaultSpec::default(),
            scheduler: SchedulerPolicy::RandomAsync,
            seeds: default_seeds(),
            max_steps: default_max_steps(),
            out: None,
            skip_equivocation_guard: false,
        }
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn f(&self) -> usize {
        self.f.unwrap_or(self.n.saturating_sub(1) / 3)
    }

    pub fn params(&self) -> anyhow::Result<CommitteeParams> {
        let f = self.f();
        let p = match (self.nc, self.phi, self.epsilon) {
            (Some(nc), Some(phi), _) => override_params(self.n, f, nc, phi)?,
            (None, None, Some(eps)) => derive_params(self.n, f, eps)?,
            (nc, phi, eps) => {
                let base = derive_params(self.n, f, eps.unwrap_or(0.1))?;
                override_params(self.n, f, nc.unwrap_or(base.nc), phi.unwrap_or(base.phi))?
            }
        };
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            n = 10
            nc = 4
            phi = 4
            rounds = 12
            [faults]
            kind = "equivocator"
            [scheduler]
            policy = "round_robin"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.f(), 3);
        assert_eq!(cfg.payload_bytes, 1024);
        assert_eq!(cfg.scheduler, SchedulerPolicy::RoundRobin);
        let p = cfg.params().unwrap();
        assert_eq!((p.nc, p.phi, p.threshold()), (4, 4, 3));
        let back: ExperimentConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("n = 4\nbogus = 1").is_err());
    }

    #[test]
    fn fault_resolution_respects_f() {
        let spec = FaultSpec { kind: FaultKind::Silent, count: Some(9), nodes: None };
        let p = spec.resolve(10, 3, 7);
        assert_eq!(p.byzantine.len(), 3);
        assert_eq!(p, spec.resolve(10, 3, 7));
        assert!(FaultSpec::of(FaultKind::None).resolve(10, 3, 7).byzantine.is_empty());
    }

    #[test]
    fn selective_targets_exclude_self() {
        let p = FaultSpec::of(FaultKind::Selective).resolve(7, 2, 1);
        let (id, b) = &p.byzantine[0];
        match b {
            Behavior::SelectiveSend { targets } => {
                assert_eq!(targets.len(), 4);
                assert!(!targets.contains(id));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
