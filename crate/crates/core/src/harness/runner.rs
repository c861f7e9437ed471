//! Builds simulations from an [`ExperimentConfig`] and runs them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ProtocolKind};
use super::invariants::{check_events, check_sequentiality, InvariantReport};
use crate::bracha::{BrachaEquivocator, BrachaNode, BrachaSilent, BrachaWire};
use crate::crypto::{CertScheme, KeyMaterial, NodeSigner};
use crate::netsim::byzantine::{Behavior, ByzantineNode, FaultProfile};
use crate::netsim::transcript::RunTranscript;
use crate::netsim::{Process, Simulation};
use crate::protocol::{Node, NodeConfig, NodeStats, SendPlan, Wire};
use crate::sampling::{CommitteeParams, CommitteeTable, Seed};
use crate::NodeId;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub params: CommitteeParams,
    pub faults: FaultProfile,
    pub transcript: RunTranscript,
    pub invariants: InvariantReport,
    /// Per-node counters (honest APM nodes only).
    pub stats: Vec<Option<NodeStats>>,
}

fn scheduler_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

fn plan(cfg: &ExperimentConfig, seed: u64) -> SendPlan {
    SendPlan { rounds: cfg.rounds, payload_len: cfg.payload_bytes, payload_seed: seed }
}

/// The APM simulation for one seed, not yet started.
pub fn build_apm(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<(Simulation<Wire>, CommitteeParams, FaultProfile)> {
    let params = cfg.params()?;
    let n = cfg.n;
    let scheme: Arc<dyn CertScheme> = Arc::new(KeyMaterial::from_seed_u64(n, seed, cfg.k_bytes)?);
    let committees = Arc::new(CommitteeTable::new(Seed::from_u64(seed), params, cfg.rounds));
    let faults = cfg.faults.resolve(n, params.f, seed);
    let plan = plan(cfg, seed);
    let mut procs: Vec<Box<dyn Process<Wire>>> = Vec::with_capacity(n);
    let mut honest = Vec::with_capacity(n);
    for id in NodeId::all(n) {
        let node_cfg = NodeConfig {
            id,
            params,
            committees: committees.clone(),
            scheme: scheme.clone(),
            signer: NodeSigner::new(id, scheme.clone()),
            skip_equivocation_guard: cfg.skip_equivocation_guard && !faults.is_byzantine(id),
        };
        match faults.behavior_of(id) {
            None => {
                procs.push(Box::new(Node::new(node_cfg, Some(plan))));
                honest.push(true);
            }
            Some(Behavior::Cooperative) => {
                procs.push(Box::new(Node::new(node_cfg, Some(plan))));
                honest.push(false);
            }
            Some(b) => {
                let inner_plan = (*b != Behavior::Equivocator).then_some(plan);
                let inner = Node::new(node_cfg, inner_plan);
                procs.push(Box::new(ByzantineNode::new(b, inner, plan, seed ^ u64::from(id.0) << 32)));
                honest.push(false);
            }
        }
    }
    let sim = Simulation::new(procs, honest, cfg.scheduler.clone(), scheduler_seed(seed));
    Ok((sim, params, faults))
}

pub fn run_apm(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<RunResult> {
    let (mut sim, params, faults) = build_apm(cfg, seed)?;
    let outcome = sim.run(cfg.max_steps);
    Ok(finish_apm(&sim, outcome, cfg, seed, params, faults))
}

/// Invariants and transcript of a finished APM simulation.
pub fn finish_apm(
    sim: &Simulation<Wire>,
    outcome: crate::netsim::RunOutcome,
    cfg: &ExperimentConfig,
    seed: u64,
    params: CommitteeParams,
    faults: FaultProfile,
) -> RunResult {
    let valid_upto = cfg.rounds.saturating_sub(params.phi);
    let mut invariants = check_events(sim.events(), sim.honest(), valid_upto, &outcome);
    let mut stats = Vec::with_capacity(cfg.n);
    for id in NodeId::all(cfg.n) {
        match sim.inspect::<Node>(id).filter(|_| sim.honest()[id.index()]) {
            Some(node) => {
                check_sequentiality(node, cfg.n, &mut invariants);
                stats.push(Some(node.stats().clone()));
            }
            None => stats.push(None),
        }
    }
    let config = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    let transcript = RunTranscript::capture(sim, outcome, config, seed);
    RunResult { params, faults, transcript, invariants, stats }
}

pub fn build_bracha(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<(Simulation<BrachaWire>, FaultProfile)> {
    let n = cfg.n;
    let f = cfg.f();
    anyhow::ensure!(n > 3 * f, "Bracha needs n > 3f (n = {n}, f = {f})");
    let faults = cfg.faults.resolve(n, f, seed);
    let plan = plan(cfg, seed);
    let mut procs: Vec<Box<dyn Process<BrachaWire>>> = Vec::with_capacity(n);
    let mut honest = Vec::with_capacity(n);
    for id in NodeId::all(n) {
        let (p, h): (Box<dyn Process<BrachaWire>>, bool) = match faults.behavior_of(id) {
            None => (Box::new(BrachaNode::new(id, n, f, Some(plan))), true),
            Some(Behavior::Cooperative) => (Box::new(BrachaNode::new(id, n, f, Some(plan))), false),
            Some(Behavior::Equivocator) => (Box::new(BrachaEquivocator::new(id, n, f, plan)), false),
            Some(_) => (Box::new(BrachaSilent(id)), false),
        };
        procs.push(p);
        honest.push(h);
    }
    Ok((Simulation::new(procs, honest, cfg.scheduler.clone(), scheduler_seed(seed)), faults))
}

pub fn run_bracha(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<RunResult> {
    let (mut sim, faults) = build_bracha(cfg, seed)?;
    let outcome = sim.run(cfg.max_steps);
    let invariants = check_events(sim.events(), sim.honest(), cfg.rounds, &outcome);
    let config = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    let transcript = RunTranscript::capture(&sim, outcome, config, seed);
    let params = crate::sampling::override_params(cfg.n, cfg.f(), cfg.n, 1)?;
    Ok(RunResult { params, faults, transcript, invariants, stats: vec![None; cfg.n] })
}

pub fn run(cfg: &ExperimentConfig, seed: u64) -> anyhow::Result<RunResult> {
    match cfg.protocol {
        ProtocolKind::Apm => run_apm(cfg, seed),
        ProtocolKind::Bracha => run_bracha(cfg, seed),
    }
}

/// Re-executes the run a transcript came from and reports whether the new
/// transcript is identical.
pub fn replay(transcript: &RunTranscript) -> anyhow::Result<bool> {
    let cfg: ExperimentConfig = serde_json::from_value(transcript.config.clone())?;
    let again = run(&cfg, transcript.seed)?;
    Ok(again.transcript == *transcript)
}
