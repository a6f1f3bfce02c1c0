use std::collections::BTreeSet;
use std::io::Write;

use owdf::sim::{
    frame_alignment_delay, ingest_records, queue_waits, records_to_jsonl, simulate_trace, write_records,
    GainProfile, PacketRecord, SimConfig,
};
use owdf::Error;
use proptest::prelude::*;

fn one_slot(n: usize) -> SimConfig {
    SimConfig {
        uplink_slots: vec![0],
        ..SimConfig::stable_high(100, 50.0, n)
    }
}

#[test]
fn alignment_with_two_eligible_slots() {
    let cfg = SimConfig {
        uplink_slots: vec![0, 5],
        ..SimConfig::stable_high(100, 10.0, 1)
    };
    let got: Vec<f64> = (0..10).map(|t| frame_alignment_delay(t as f64, &cfg)).collect();
    assert_eq!(got, vec![0.0, 4.0, 3.0, 2.0, 1.0, 0.0, 4.0, 3.0, 2.0, 1.0]);
}

#[test]
fn just_missed_slot_waits_almost_a_frame() {
    let cfg = one_slot(1);
    let eps = 1e-3;
    assert!((frame_alignment_delay(eps, &cfg) - (10.0 - eps)).abs() < 1e-12);
    assert_eq!(frame_alignment_delay(20.0, &cfg), 0.0);
}

#[test]
fn harq_frequency_matches_bler() {
    let cfg = SimConfig {
        bler: 0.1,
        seed: 11,
        ..SimConfig::stable_high(100, 50.0, 100_000)
    };
    let recs = simulate_trace(&cfg).unwrap();
    let hits = recs.iter().filter(|r| r.harq_retx.unwrap() > 0).count();
    let freq = hits as f64 / recs.len() as f64;
    assert!((freq - 0.1).abs() < 0.01, "frequency {freq}");
}

#[test]
fn reduced_profile_stays_in_range() {
    let recs = simulate_trace(&SimConfig::reduced(5000)).unwrap();
    assert!(recs.iter().all(|r| (12..=18).contains(&r.mcs.unwrap())));
    let mean = recs.iter().map(|r| r.mcs.unwrap() as f64).sum::<f64>() / recs.len() as f64;
    assert!((mean - 15.0).abs() < 0.5, "mean mcs {mean}");
}

#[test]
fn traces_serialize_identically() {
    let mut cfg = SimConfig::reduced(2000);
    cfg.seed = 99;
    let a = records_to_jsonl(&simulate_trace(&cfg).unwrap()).unwrap();
    let b = records_to_jsonl(&simulate_trace(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    cfg.seed = 100;
    let c = records_to_jsonl(&simulate_trace(&cfg).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn empty_file_gives_no_records() {
    let f = tempfile::NamedTempFile::new().unwrap();
    assert!(ingest_records(f.path()).unwrap().is_empty());
}

#[test]
fn single_record_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.jsonl");
    let rec = simulate_trace(&SimConfig::reduced(1)).unwrap();
    write_records(&path, &rec).unwrap();
    let back = ingest_records(&path).unwrap();
    assert_eq!(back, rec);
    assert_eq!(back[0].delay_ms.to_bits(), rec[0].delay_ms.to_bits());
}

#[test]
fn missing_mcs_is_kept_missing() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(
        f,
        r#"{{"seq":0,"arrival_time_ms":0.0,"size_bytes":200,"inter_arrival_ms":50.0,"slot":3,"harq_retx":0,"rlc_retx":0,"delay_ms":7.25}}"#
    )
    .unwrap();
    let recs = ingest_records(f.path()).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].mcs, None);
    assert_eq!(recs[0].slot, Some(3));
    assert_eq!(recs[0].delay_ms, 7.25);
}

#[test]
fn malformed_line_reports_its_number() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    let good = records_to_jsonl(&simulate_trace(&SimConfig::reduced(1)).unwrap()).unwrap();
    write!(f, "{good}{{not json\n").unwrap();
    match ingest_records(f.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn repeated_seq_is_rejected() {
    let recs = simulate_trace(&SimConfig::reduced(2)).unwrap();
    let dup = vec![recs[0].clone(), recs[0].clone()];
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(records_to_jsonl(&dup).unwrap().as_bytes()).unwrap();
    assert!(matches!(ingest_records(f.path()), Err(Error::Validation(_))));
}

fn harq_free(recs: &[PacketRecord]) -> bool {
    recs.iter().all(|r| r.harq_retx == Some(0) && r.rlc_retx == Some(0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sawtooth_has_two_increments(eighths in 1u32..80, n in 30usize..300) {
        let drift = eighths as f64 / 8.0;
        let cfg = SimConfig {
            clock_offset_drift_ms_per_packet: drift,
            ..one_slot(n)
        };
        let recs = simulate_trace(&cfg).unwrap();
        prop_assert!(harq_free(&recs));
        let diffs: BTreeSet<u64> = recs
            .windows(2)
            .map(|w| (w[1].delay_ms - w[0].delay_ms).to_bits())
            .collect();
        let expected: BTreeSet<u64> = [(-drift).to_bits(), (10.0 - drift).to_bits()].into_iter().collect();
        prop_assert!(diffs.is_subset(&expected), "increments {:?}", diffs.iter().map(|b| f64::from_bits(*b)).collect::<Vec<_>>());
        // each increment type fills a fraction of the steps proportional to its size
        if (n - 1) as f64 * drift.min(10.0 - drift) >= 10.0 {
            prop_assert_eq!(diffs.len(), 2);
        }
    }

    #[test]
    fn retransmissions_add_exact_penalties(seed in 0u64..1000, bler in 0.05f64..0.6) {
        let cfg = SimConfig {
            bler,
            seed,
            rlc_max_retx: 2,
            inter_arrival_ms: 200.0,
            ..one_slot(200)
        };
        let recs = simulate_trace(&cfg).unwrap();
        for r in &recs {
            let penalty = r.harq_retx.unwrap() as f64 * cfg.harq_penalty_ms
                + r.rlc_retx.unwrap() as f64 * cfg.rlc_penalty_ms;
            prop_assert_eq!(r.delay_ms - penalty, cfg.base_delay_ms);
        }
    }

    #[test]
    fn faster_arrivals_never_wait_less(
        gaps in proptest::collection::vec(0.1f64..20.0, 1..60),
        services in proptest::collection::vec(0.1f64..15.0, 60),
    ) {
        let arrivals: Vec<f64> = gaps.iter().scan(0.0, |t, g| { *t += g; Some(*t) }).collect();
        let halved: Vec<f64> = arrivals.iter().map(|a| a / 2.0).collect();
        let s = &services[..arrivals.len()];
        let slow = queue_waits(&arrivals, s);
        let fast = queue_waits(&halved, s);
        for (f, w) in fast.iter().zip(&slow) {
            prop_assert!(f >= w, "{} < {}", f, w);
        }
    }

    #[test]
    fn stable_profile_keeps_mcs(seed in 0u64..1000) {
        let cfg = SimConfig { seed, bler: 0.2, ..SimConfig::stable_high(200, 20.0, 100) };
        prop_assert_eq!(cfg.gain_profile, GainProfile::StableHigh);
        let recs = simulate_trace(&cfg).unwrap();
        prop_assert!(recs.iter().all(|r| r.mcs == recs[0].mcs));
    }
}
