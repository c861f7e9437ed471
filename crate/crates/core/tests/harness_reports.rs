use apm_brb::harness::metrics::{cost_report, formula_terms, measure_round_cost, MetricsError};
use apm_brb::harness::runner::replay;
use apm_brb::harness::{run, ExperimentConfig, FaultKind, FaultSpec, ProtocolKind};

#[test]
fn same_config_and_seed_give_identical_reports() {
    let mut cfg = ExperimentConfig::desk(7, 5, 2, 5);
    cfg.faults = FaultSpec::of(FaultKind::Equivocator);
    let a = run(&cfg, 11).unwrap();
    let b = run(&cfg, 11).unwrap();
    assert_eq!(a.transcript, b.transcript);
    assert_eq!(cost_report(&a.transcript, 2), cost_report(&b.transcript, 2));
    assert!(replay(&a.transcript).unwrap());
}

#[test]
fn transcripts_round_trip_through_json() {
    let cfg = ExperimentConfig::desk(4, 4, 2, 4);
    let res = run(&cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    res.transcript.write_json(&path).unwrap();
    let back = apm_brb::netsim::transcript::RunTranscript::read_json(&path).unwrap();
    assert_eq!(back, res.transcript);
    assert!(replay(&back).unwrap());
}

#[test]
fn every_honest_bit_is_attributed_to_a_kind() {
    for kind in FaultKind::PROFILES {
        let mut cfg = ExperimentConfig::desk(7, 7, 2, 5);
        cfg.faults = FaultSpec::of(kind);
        let res = run(&cfg, 3).unwrap();
        let rep = cost_report(&res.transcript, 2);
        assert_eq!(rep.unattributed_bits, 0, "{}", kind.name());
        assert_eq!(rep.round_bits.iter().sum::<u64>(), rep.total_bits, "{}", kind.name());
        let per_instance: u64 = res.transcript.instances.iter().map(|i| i.bytes * 8).sum();
        assert_eq!(per_instance, rep.total_bits);
    }
}

#[test]
fn amortized_series_follows_the_prefix_sums() {
    let cfg = ExperimentConfig::desk(4, 4, 2, 10);
    let res = run(&cfg, 0).unwrap();
    let rep = cost_report(&res.transcript, 2);
    assert_eq!(rep.amortized.len(), 8);
    let prefix: u64 = rep.round_bits[..5].iter().sum();
    assert!((rep.amortized[2] - prefix as f64 / 3.0).abs() < 1e-6);
    assert!(rep.amortized.windows(2).all(|w| w[1] <= w[0]));
    let mut csv = Vec::new();
    rep.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 11);
}

#[test]
fn bracha_cost_does_not_amortize() {
    let mut cfg = ExperimentConfig::desk(4, 4, 1, 6);
    cfg.protocol = ProtocolKind::Bracha;
    let res = run(&cfg, 0).unwrap();
    assert!(res.invariants.ok());
    let rep = cost_report(&res.transcript, 0);
    assert!(rep.round_bits.windows(2).all(|w| w[0] == w[1]));
    assert!(rep.amortized.iter().all(|a| (a - rep.amortized[0]).abs() < 1e-9));
    assert_eq!(rep.path_fraction(apm_brb::netsim::DeliveryPath::Bracha), 1.0);
}

#[test]
fn cost_model_requires_a_quiescent_fault_free_run() {
    let mut cfg = ExperimentConfig::desk(4, 4, 2, 6);
    cfg.max_steps = 50;
    let res = run(&cfg, 0).unwrap();
    assert_eq!(measure_round_cost(&res.transcript, 4, 1024, 32), Err(MetricsError::NotQuiescent));
    let mut cfg = ExperimentConfig::desk(4, 4, 2, 6);
    cfg.faults = FaultSpec::of(FaultKind::Silent);
    let res = run(&cfg, 0).unwrap();
    assert_eq!(measure_round_cost(&res.transcript, 4, 1024, 32), Err(MetricsError::NotFaultFree));
}

#[test]
fn payload_terms_scale_with_message_size() {
    let at = |bytes: usize| {
        let mut cfg = ExperimentConfig::desk(4, 4, 2, 8);
        cfg.payload_bytes = bytes;
        measure_round_cost(&run(&cfg, 0).unwrap().transcript, 4, bytes, 32).unwrap()
    };
    let (zero, one, two) = (at(0), at(1024), at(2048));
    for i in [1usize, 2, 5] {
        let d1 = one.terms[i].measured_bits - zero.terms[i].measured_bits;
        let d2 = two.terms[i].measured_bits - zero.terms[i].measured_bits;
        assert!(d1 > 0.0, "{}", one.terms[i].term);
        assert!((d2 / d1 - 2.0).abs() < 0.01, "{}: {d1} vs {d2}", one.terms[i].term);
    }
    let f0 = formula_terms(4, 4, 0, 32);
    assert!(zero.terms[1].measured_bits <= f0[1]);
    assert!(zero.measured_total > 0.0);
}

#[test]
fn empty_acceptance_selection_is_an_empty_success() {
    let report = apm_brb::harness::run_suite(&[], &Default::default());
    assert!(report.is_empty());
}
