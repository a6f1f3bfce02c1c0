use owdf::dataset::build_windows;
use owdf::dataset::WindowConfig;
use owdf::eval::{
    coverage_curve, decompose_by_group, default_curve_grid, empirical_coverage, evaluate_mae, evaluate_nll,
    fan_chart_from, Forecasts,
};
use owdf::mdn::{AffineTransform, MixtureParams, SIGMA_FLOOR};
use owdf::sim::{simulate_trace, SimConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_mixture(rng: &mut ChaCha8Rng) -> MixtureParams {
    let k = rng.gen_range(1..=4);
    let raw: Vec<f64> = (0..3 * k).map(|_| rng.gen_range(-1.5..1.5)).collect();
    owdf::mdn::to_mixture(&raw).unwrap()
}

/// `n` windows of `l` steps with mixtures from `rng` and truths drawn from them.
fn self_consistent(n: usize, l: usize, seed: u64) -> Forecasts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixtures = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n {
        let m: Vec<MixtureParams> = (0..l).map(|_| random_mixture(&mut rng)).collect();
        targets.push(m.iter().map(|mix| mix.sample(&mut rng)).collect());
        mixtures.push(m);
    }
    let groups = (0..n).map(|i| [10.0, 20.0, 50.0][i % 3]).collect();
    Forecasts::new(mixtures, targets, groups, AffineTransform { location: 12.0, scale: 3.0 }).unwrap()
}

#[test]
fn sampled_truths_are_calibrated() {
    let f = self_consistent(2500, 4, 1);
    let c = empirical_coverage(&f, 0.9).unwrap();
    assert!((c - 0.9).abs() < 0.01, "coverage {c}");
    let curve = coverage_curve(&f, &default_curve_grid()).unwrap();
    assert!(curve.is_monotone());
    for (level, cov) in curve.levels.iter().zip(&curve.coverage) {
        assert!((level - cov).abs() < 0.02, "{level}: {cov}");
    }
}

#[test]
fn true_generator_scores_its_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 20_000;
    let targets: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.sample(StandardNormal)]).collect();
    let f = Forecasts::new(
        vec![vec![MixtureParams::standard_normal()]; n],
        targets,
        vec![0.0; n],
        AffineTransform::IDENTITY,
    )
    .unwrap();
    let nll = evaluate_nll(&f);
    let entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    assert!((nll.mean - entropy).abs() < 2.0 * nll.std_error, "{nll:?}");
}

#[test]
fn exact_means_at_the_floor_hit_the_minimum() {
    let mix = MixtureParams::new(vec![1.0], vec![0.4], vec![SIGMA_FLOOR]).unwrap();
    let f = Forecasts::new(vec![vec![mix; 3]; 5], vec![vec![0.4; 3]; 5], vec![0.0; 5], AffineTransform::IDENTITY)
        .unwrap();
    let floor = -(1.0 / ((2.0 * std::f64::consts::PI).sqrt() * SIGMA_FLOOR)).ln();
    assert!((floor + 5.989).abs() < 1e-3);
    assert!((evaluate_nll(&f).mean - floor).abs() < 1e-12);
    assert_eq!(evaluate_nll(&f).std_error, 0.0);
}

#[test]
fn mae_of_offset_predictor_is_the_offset() {
    let t = AffineTransform { location: 20.0, scale: 4.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let delta_ms = 1.75;
    let mut mixtures = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..50 {
        let ys: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        mixtures.push(
            ys.iter()
                .map(|y| MixtureParams::new(vec![1.0], vec![y + delta_ms / t.scale], vec![0.5]).unwrap())
                .collect(),
        );
        targets.push(ys);
    }
    let f = Forecasts::new(mixtures, targets, vec![0.0; 50], t).unwrap();
    assert!((evaluate_mae(&f) - delta_ms).abs() < 1e-12);
}

#[test]
fn mae_matches_hand_average() {
    let t = AffineTransform { location: 5.0, scale: 2.0 };
    let m1 = MixtureParams::new(vec![0.25, 0.75], vec![-1.0, 1.0], vec![1.0, 1.0]).unwrap();
    let m2 = MixtureParams::new(vec![1.0], vec![0.0], vec![1.0]).unwrap();
    let f = Forecasts::new(vec![vec![m1, m2]], vec![vec![0.0, 1.0]], vec![0.0], t).unwrap();
    // means 0.5 and 0.0 std, targets 0.0 and 1.0 std; errors 1.0 ms and 2.0 ms
    assert!((evaluate_mae(&f) - 1.5).abs() < 1e-12);
}

#[test]
fn standard_normal_fan_chart_edges() {
    let recs = simulate_trace(&SimConfig::reduced(10)).unwrap();
    let windows = build_windows(&recs, &WindowConfig::new(4, 3).unwrap()).unwrap();
    let fan = fan_chart_from(&vec![MixtureParams::standard_normal(); 3], &windows[0], &AffineTransform::IDENTITY)
        .unwrap();
    assert_eq!(fan.history_ms.len(), 3);
    for step in &fan.steps {
        let (level, lo, hi) = step.bands[0];
        assert_eq!(level, 0.5);
        assert!((lo + 0.6744898).abs() < 1e-6 && (hi - 0.6744898).abs() < 1e-6);
        let (_, lo99, hi99) = step.bands[3];
        assert!((hi99 - 2.5758293).abs() < 1e-6 && lo99 < lo);
        assert_eq!(step.mean_ms, 0.0);
    }
    assert_eq!(fan.steps[1].truth_ms, windows[0].future[1].delay_ms);
}

#[test]
fn groups_reaggregate_to_the_overall_nll() {
    let f = self_consistent(999, 3, 4);
    let groups = decompose_by_group(&f);
    assert_eq!(groups.len(), 3);
    let n: usize = groups.iter().map(|g| g.samples).sum();
    assert_eq!(n, 999);
    let weighted = groups.iter().map(|g| g.nll * g.samples as f64).sum::<f64>() / n as f64;
    assert!((weighted - evaluate_nll(&f).mean).abs() < 1e-9);
}

#[test]
fn vanishing_level_covers_nothing() {
    let f = self_consistent(500, 2, 5);
    assert_eq!(empirical_coverage(&f, 1e-12).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coverage_is_exactly_monotone(seed in 0u64..10_000, shift in -1.0f64..1.0) {
        let mut f = self_consistent(200, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in f.targets_std.iter_mut().flatten() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *t += shift + 0.3 * z;
        }
        let curve = coverage_curve(&f, &default_curve_grid()).unwrap();
        prop_assert!(curve.is_monotone());
        prop_assert!(curve.coverage.iter().all(|c| (0.0..=1.0).contains(c)));
    }
}
