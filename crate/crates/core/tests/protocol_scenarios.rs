use std::collections::{BTreeMap, BTreeSet};

use apm_brb::harness::runner::{build_apm, finish_apm};
use apm_brb::harness::{ExperimentConfig, FaultKind, FaultSpec, RunResult};
use apm_brb::netsim::{DeliveryPath, Event, Simulation};
use apm_brb::protocol::{Node, Wire};
use apm_brb::NodeId;

fn simulate(cfg: &ExperimentConfig, seed: u64) -> (Simulation<Wire>, RunResult) {
    let (mut sim, params, faults) = build_apm(cfg, seed).unwrap();
    let outcome = sim.run(cfg.max_steps);
    let res = finish_apm(&sim, outcome, cfg, seed, params, faults);
    (sim, res)
}

fn honest_nodes<'a>(sim: &'a Simulation<Wire>, n: usize) -> impl Iterator<Item = &'a Node> + 'a {
    NodeId::all(n).filter(|id| sim.honest()[id.index()]).filter_map(|id| sim.inspect::<Node>(id))
}

fn deliveries(res: &RunResult) -> Vec<apm_brb::netsim::DeliveryEvent> {
    res.transcript
        .events
        .iter()
        .filter_map(|(_, e)| match e {
            Event::Deliver(d) => Some(d.clone()),
            _ => None,
        })
        .collect()
}

#[test]
fn round_one_messages_carry_no_history() {
    let cfg = ExperimentConfig::desk(4, 4, 2, 4);
    let (sim, res) = simulate(&cfg, 3);
    assert!(res.invariants.ok(), "{:?}", res.invariants);
    for node in honest_nodes(&sim, 4) {
        for s in NodeId::all(4) {
            let m = &node.promises(s)[0];
            assert_eq!(m.round(), 1);
            assert!(m.prev_cert().is_none());
            assert!(m.prev_set().is_empty());
            assert!(m.triggers().iter().all(|t| t.is_none()));
        }
    }
}

#[test]
fn prev_sets_hold_exactly_a_quorum_of_distinct_senders() {
    let cfg = ExperimentConfig::desk(4, 4, 2, 5);
    for seed in 0..5 {
        let (sim, res) = simulate(&cfg, seed);
        assert!(res.invariants.ok());
        for node in honest_nodes(&sim, 4) {
            for s in NodeId::all(4) {
                for m in node.promises(s).iter().skip(1) {
                    let senders: BTreeSet<NodeId> = m.prev_set().iter().map(|c| c.sender()).collect();
                    assert_eq!(m.prev_set().len(), 3);
                    assert_eq!(senders.len(), 3);
                    assert!(m.prev_set().iter().all(|c| c.round() == m.round() - 1));
                }
            }
        }
    }
}

#[test]
fn certified_chain_delivers_phi_rounds_back() {
    let phi = 2;
    let cfg = ExperimentConfig::desk(10, 9, phi, 6);
    let (_, res) = simulate(&cfg, 1);
    assert!(res.invariants.ok());
    let c1: Vec<_> = deliveries(&res).into_iter().filter(|d| d.path == DeliveryPath::Condition1).collect();
    assert!(!c1.is_empty());
    for d in c1 {
        assert!(d.trigger_round >= phi);
        assert!(d.round + phi <= d.trigger_round, "{d:?}");
    }
}

#[test]
fn fault_free_run_delivers_everything_through_r_minus_phi() {
    let cfg = ExperimentConfig::desk(10, 9, 4, 8);
    let (sim, res) = simulate(&cfg, 5);
    assert!(res.invariants.ok(), "{:?}", res.invariants.first());
    for node in honest_nodes(&sim, 10) {
        for s in NodeId::all(10) {
            assert!(node.delivered_prefix(s) >= 4);
            assert_eq!(node.delivered(s, 1), node.promises(s).first().map(|m| *m.digest()));
        }
    }
}

#[test]
fn optimistic_path_fires_at_four_nodes() {
    let cfg = ExperimentConfig::desk(4, 4, 2, 12);
    let fired: u64 = (0..5)
        .map(|seed| {
            let (_, res) = simulate(&cfg, seed);
            assert!(res.invariants.ok());
            deliveries(&res).iter().filter(|d| d.path == DeliveryPath::Condition2 && d.trigger_round == d.round + 1).count()
                as u64
        })
        .sum();
    assert!(fired > 0);
}

#[test]
fn a_silent_node_disables_the_optimistic_path() {
    let mut cfg = ExperimentConfig::desk(7, 7, 2, 8);
    cfg.faults = FaultSpec { kind: FaultKind::Silent, count: Some(1), nodes: None };
    for seed in 0..5 {
        let (sim, res) = simulate(&cfg, seed);
        assert!(res.invariants.ok(), "seed {seed}: {:?}", res.invariants.first());
        for node in honest_nodes(&sim, 7) {
            assert_eq!(node.stats().condition2_fired, 0);
        }
        assert!(deliveries(&res).iter().all(|d| d.path != DeliveryPath::Condition2));
    }
}

#[test]
fn honest_nodes_sign_at_most_once_per_slot_under_equivocation() {
    let mut cfg = ExperimentConfig::desk(10, 9, 2, 6);
    cfg.faults = FaultSpec { kind: FaultKind::Equivocator, count: Some(3), nodes: None };
    for seed in 0..10 {
        let (sim, res) = simulate(&cfg, seed);
        assert!(res.invariants.ok(), "seed {seed}: {:?}", res.invariants.first());
        for node in honest_nodes(&sim, 10) {
            let mut slots = BTreeMap::new();
            for (s, r, d) in node.signed_log() {
                assert!(slots.insert((*s, *r), *d).is_none(), "{} signed {s} round {r} twice", node.id());
            }
        }
    }
}

#[test]
fn equivocating_senders_never_split_honest_deliveries() {
    let mut cfg = ExperimentConfig::desk(10, 10, 4, 8);
    cfg.faults = FaultSpec { kind: FaultKind::Equivocator, count: Some(3), nodes: None };
    for seed in 0..10 {
        let (_, res) = simulate(&cfg, seed);
        assert!(res.invariants.agreement.is_empty(), "seed {seed}: {:?}", res.invariants.agreement);
        assert!(res.invariants.totality.is_empty(), "seed {seed}: {:?}", res.invariants.totality);
    }
}

#[test]
fn triggers_point_at_certified_rounds_of_phi_or_more() {
    let cfg = ExperimentConfig::desk(7, 7, 2, 6);
    let (sim, res) = simulate(&cfg, 2);
    assert!(res.invariants.ok());
    for node in honest_nodes(&sim, 7) {
        for (j, t) in node.triggers().iter().enumerate() {
            let Some((cert, round)) = t else { continue };
            assert!(*round >= 2);
            assert_eq!(node.certified(NodeId::from_index(j), *round), Some(*cert.message_digest()));
        }
    }
}

#[test]
fn delivered_rounds_materialise_their_predecessors() {
    let mut cfg = ExperimentConfig::desk(10, 9, 2, 6);
    cfg.faults = FaultSpec::of(FaultKind::GarbageCerts);
    let (sim, res) = simulate(&cfg, 4);
    assert!(res.invariants.ok());
    for node in honest_nodes(&sim, 10) {
        for s in NodeId::all(10) {
            for (r, d) in node.delivered_rounds(s) {
                let m = node.materialize(s, r).unwrap();
                assert_eq!(*m.digest(), d);
                if r > 1 {
                    assert_eq!(m.prev_digest(), node.delivered(s, r - 1));
                }
            }
        }
    }
}
