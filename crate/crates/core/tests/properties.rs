use proptest::prelude::*;

use apm_brb::crypto::{CertScheme, KeyMaterial};
use apm_brb::harness::metrics::loglog_slope;
use apm_brb::harness::{run, ExperimentConfig, FaultKind, FaultSpec};
use apm_brb::netsim::SchedulerPolicy;
use apm_brb::sampling::Committee;
use apm_brb::NodeId;

fn profile() -> impl Strategy<Value = FaultKind> {
    prop::sample::select(FaultKind::PROFILES.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn broadcast_properties_hold_for_any_seed(
        seed in any::<u64>(),
        n in prop::sample::select(vec![4usize, 7, 10]),
        phi in 2u64..=3,
        shrink in 0usize..=2,
        kind in profile(),
        faulty in 1usize..=3,
    ) {
        let nc = n - shrink.min(n - 3);
        let mut cfg = ExperimentConfig::desk(n, nc, phi, phi + 2);
        cfg.faults = FaultSpec { kind, count: Some(faulty), nodes: None };
        let res = run(&cfg, seed).unwrap();
        prop_assert!(res.invariants.ok(), "{:?}", res.invariants.first());
    }

    #[test]
    fn reordering_schedulers_keep_the_properties(
        seed in any::<u64>(),
        favored in prop::collection::btree_set(1u32..=7, 0..=7),
        budget in 0u64..5_000,
        fifo in any::<bool>(),
    ) {
        let mut cfg = ExperimentConfig::desk(7, 5, 2, 4);
        cfg.scheduler = if fifo {
            SchedulerPolicy::RoundRobin
        } else {
            SchedulerPolicy::Adversarial { favored: favored.into_iter().map(NodeId).collect(), budget }
        };
        let res = run(&cfg, seed).unwrap();
        prop_assert!(res.invariants.ok(), "{:?}", res.invariants.first());
    }

    #[test]
    fn certificates_need_a_committee_majority(
        seed in any::<u64>(),
        members in prop::collection::btree_set(1u32..=9, 3..=9),
        take in 0usize..=9,
    ) {
        let keys = KeyMaterial::from_seed_u64(9, seed, 32).unwrap();
        let members: Vec<NodeId> = members.into_iter().map(NodeId).collect();
        let committee = Committee::from_members(NodeId(1), 2, members.clone(), 9);
        let threshold = members.len() / 2 + 1;
        let digest = keys.hash(&seed.to_le_bytes());
        let shares: Vec<_> = members.iter().take(take).map(|m| keys.sign_share(*m, &digest).unwrap()).collect();
        let cert = keys.aggregate(&shares, &committee, threshold);
        if take.min(members.len()) >= threshold {
            let cert = cert.unwrap();
            prop_assert!(keys.verify_cert(&cert, &digest, &committee, threshold));
            let other = keys.hash(b"other");
            prop_assert!(!keys.verify_cert(&cert, &other, &committee, threshold));
        } else {
            prop_assert!(cert.is_err());
        }
    }

    #[test]
    fn slope_recovers_power_law_exponents(a in 0.5f64..3.0, c in 1e-3f64..1e6) {
        let pts: Vec<(f64, f64)> = [4.0f64, 10.0, 19.0, 31.0, 40.0].iter().map(|&x| (x, c * x.powf(a))).collect();
        prop_assert!((loglog_slope(&pts) - a).abs() < 1e-9);
    }
}
