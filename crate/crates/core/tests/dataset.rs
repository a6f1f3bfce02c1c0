use owdf::dataset::{build_windows, split_dataset, Dataset, Partition, SplitConfig, WindowConfig};
use owdf::sim::{simulate_trace, SimConfig};
use proptest::prelude::*;
use std::collections::HashSet;

fn prepared(n: usize, h: usize, l: usize, seed: u64) -> Dataset {
    let recs = simulate_trace(&SimConfig::reduced(n)).unwrap();
    let split = SplitConfig { seed, ..SplitConfig::default() };
    Dataset::prepare(vec![recs], WindowConfig::new(h, l).unwrap(), &split, vec!["a.jsonl".into()]).unwrap()
}

#[test]
fn split_is_deterministic_per_seed() {
    let a = prepared(600, 8, 4, 3);
    let b = prepared(600, 8, 4, 3);
    let c = prepared(600, 8, 4, 4);
    assert_eq!(a.manifest, b.manifest);
    assert_ne!(a.manifest.split.train, c.manifest.split.train);
    assert_eq!(a.manifest.split.test, c.manifest.split.test);
}

#[test]
fn normalised_training_delays_are_standard() {
    let ds = prepared(800, 10, 5, 0);
    let t = ds.norm().delay_transform();
    let z: Vec<f64> = ds
        .samples(Partition::Train)
        .iter()
        .flat_map(|s| s.history.iter().map(|r| t.from_ms(r.delay_ms)))
        .collect();
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let std = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9, "mean {mean} std {std}");
}

#[test]
fn windows_are_contiguous_slices() {
    let ds = prepared(300, 6, 3, 1);
    for part in [Partition::Train, Partition::Val, Partition::Test] {
        for s in ds.samples(part) {
            let seqs: Vec<u64> = s.history.iter().chain(&s.future[1..]).map(|r| r.seq).collect();
            assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
            assert_eq!(s.future[0], *s.last());
        }
    }
}

#[test]
fn horizon_does_not_change_histories() {
    let recs = simulate_trace(&SimConfig::reduced(100)).unwrap();
    let short = build_windows(&recs, &WindowConfig::new(5, 2).unwrap()).unwrap();
    let long = build_windows(&recs, &WindowConfig::new(5, 9).unwrap()).unwrap();
    assert_eq!(short.len(), long.len() + 7);
    for (a, b) in short.iter().zip(&long) {
        assert_eq!(a.history, b.history);
        assert_eq!(a.future[..2], b.future[..2]);
    }
}

#[test]
fn save_and_load_round_trip() {
    let ds = prepared(400, 8, 4, 2);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert_eq!(back.traces, ds.traces);

    let file = dir.path().join("a.jsonl");
    let text = std::fs::read_to_string(&file).unwrap();
    let lines: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(&file, lines.join("\n")).unwrap();
    assert!(Dataset::load(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_count_is_n_minus_span_plus_one(n in 1usize..200, h in 1usize..20, l in 1usize..20) {
        let recs = simulate_trace(&SimConfig::reduced(n)).unwrap();
        let cfg = WindowConfig::new(h, l).unwrap();
        match build_windows(&recs, &cfg) {
            Ok(w) => prop_assert_eq!(w.len(), n + 2 - h - l),
            Err(_) => prop_assert!(n < h + l - 1),
        }
    }

    #[test]
    fn partitions_are_disjoint(n in 60usize..400, h in 1usize..10, l in 1usize..10, seed in 0u64..1000) {
        let win = WindowConfig::new(h, l).unwrap();
        if let Ok(s) = split_dataset(&[n], &win, &SplitConfig { seed, ..SplitConfig::default() }, vec![]) {
            let train: HashSet<_> = s.train.iter().collect();
            let val: HashSet<_> = s.val.iter().collect();
            prop_assert!(train.is_disjoint(&val));
            let pool_last = s.train.iter().chain(&s.val).map(|r| r.end + l - 1).max().unwrap();
            let test_first = s.test.iter().map(|r| r.end + 1 - h).min().unwrap();
            prop_assert!(pool_last < test_first);
            prop_assert_eq!(s.meta.n_samples, s.train.len() + s.val.len() + s.test.len());
        }
    }
}
