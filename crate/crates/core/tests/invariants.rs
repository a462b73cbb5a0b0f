use std::collections::HashMap;

use ctrlsim::canon::{self, winners_curse_report, CanonId};
use ctrlsim::config::{noise_from, parse_tau_grid, parse_value, prior_from};
use ctrlsim::distmodel::{DataValue, NoiseSpec, PriorSpec, Scenario, StructuralModel, TargetProblem};
use ctrlsim::evaluate::{
    conditional_error, coverage_by_labs, leverage, tradeoff_estimate, FinitePopulation, Record,
};
use ctrlsim::genctl::{generate_problem, SeedSpec};
use ctrlsim::procedures::{phi, z_quantile, Decision, IntervalRule, Procedure, TestRule};
use ctrlsim::relevance::{MatchSpec, StatisticId};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn two_lab_coverage_depends_on_the_lab_pattern() {
    let spec = canon::load(CanonId::TwoLabs).unwrap();
    let s = spec.scenario().unwrap();
    let NoiseSpec::TwoLabMixture { sd_lab1, sd_lab2, .. } = s.noise else { panic!("two-lab noise") };
    assert_eq!(sd_lab2 / sd_lab1, 100.0);
    let r = coverage_by_labs(&s, 0.95, &[vec![1; 5], vec![2; 5]], 200_000, SeedSpec::new(2, 0)).unwrap();
    // all lab 1: the nominal interval is exact
    assert!((r[0].estimate - 0.05).abs() < 4.0 * r[0].mc_se, "{:?}", r[0]);
    // all lab 2: ȳ has sd 100/√5, the half-width is 1.96/√5
    let miss = 1.0 - (2.0 * phi(1.959963984540054 / 100.0) - 1.0);
    assert!((r[1].estimate - miss).abs() < 4.0 * r[1].mc_se, "{:?} vs {miss}", r[1]);
}

#[test]
fn single_measurement_matches_the_raw_value_exactly() {
    let spec = canon::load(CanonId::SingleMeasurement).unwrap();
    let m = spec.matching.clone().unwrap();
    assert_eq!(m.statistic, StatisticId::RawValue);
    let r = conditional_error(
        &spec.scenario().unwrap(),
        &spec.procedure.unwrap(),
        &m,
        &spec.target.clone().unwrap(),
        50_000,
        SeedSpec::new(3, 0),
    )
    .unwrap();
    // θ is 0 and the estimate is the observed 1.5 on every accepted control
    assert!(r.accepted > 0);
    assert_eq!(r.estimate, 1.5);
    assert_eq!(r.mc_se, 0.0);
}

#[test]
fn pvalue_error_is_extreme_at_the_weight_endpoints() {
    let proc = Procedure::Test(TestRule::PThresholdTest { alpha: 0.05 });
    let m = MatchSpec::within(StatisticId::AbsLogLR { a: 0.02, b: 1.35 }, 0.5);
    let target = TargetProblem::new(DataValue::PValue(0.049));
    let err = |w: f64| {
        let s = Scenario::new(
            PriorSpec::two_point(0.0, 1.0, w),
            NoiseSpec::BetaPValue { a: 0.02, b: 1.35 },
            StructuralModel::PValueChannel,
            1,
        );
        conditional_error(&s, &proc, &m, &target, 200_000, SeedSpec::new(40, 0)).unwrap()
    };
    let (e0, e1) = (err(0.0), err(1.0));
    let (lo, hi) = (e0.estimate.min(e1.estimate), e0.estimate.max(e1.estimate));
    for k in 1..10 {
        let e = err(k as f64 / 10.0);
        let tol = 4.0 * e.mc_se.hypot(e0.mc_se.max(e1.mc_se));
        assert!(e.estimate >= lo - tol && e.estimate <= hi + tol, "w={}: {} outside [{lo}, {hi}]", k as f64 / 10.0, e.estimate);
    }
}

#[test]
fn winners_curse_bias_shrinks_with_effect_size() {
    let spec = canon::load(CanonId::WinnersCurse).unwrap();
    let panel = spec.scenario().unwrap();
    let mean_bias = |theta: f64| {
        let rows = winners_curse_report(&panel, &PriorSpec::PointMass(theta), 20_000, SeedSpec::new(4, 0)).unwrap();
        let b: Vec<f64> = rows.iter().filter_map(|r| r.magnitude_bias).collect();
        b.iter().sum::<f64>() / b.len() as f64
    };
    let biases: Vec<f64> = [0.2, 0.4, 0.8].iter().map(|t| mean_bias(*t)).collect();
    assert!(biases[0] > biases[1] && biases[1] > biases[2], "{biases:?}");
    // θ̂ ~ N(θ, se²) selected when |θ̂| > c: E[|θ̂| − θ | selected] in closed form
    let (theta, se) = (0.8, StructuralModel::marker_std_error(100));
    let c = z_quantile(0.975) * se;
    let (a, b) = ((c - theta) / se, (-c - theta) / se);
    let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (up, down) = (1.0 - phi(a), phi(b));
    // E[θ̂ − θ; θ̂ > c] = se·φ(a); E[−θ̂ − θ; θ̂ < −c] = se·φ(b) − 2θ·Φ(b)
    let exact = (se * pdf(a) + se * pdf(b) - 2.0 * theta * down) / (up + down);
    assert!((biases[2] - exact).abs() < 0.002, "{} vs {exact}", biases[2]);
}

/// Exact expected loss of the tradeoff by enumerating every trial subset.
fn tradeoff_oracle(records: &[Record], trial: usize, r: usize) -> f64 {
    let means = |members: &[usize], l: usize| {
        let mut m: HashMap<Vec<u32>, (f64, usize)> = HashMap::new();
        for &i in members {
            let e = m.entry(records[i].covariates[..l].to_vec()).or_default();
            e.0 += records[i].outcome;
            e.1 += 1;
        }
        m
    };
    let all: Vec<usize> = (0..records.len()).collect();
    let pop: Vec<_> = (0..=r + 1).map(|l| means(&all, l)).collect();
    let predict = |tables: &[HashMap<Vec<u32>, (f64, usize)>], rec: &Record, level: usize| {
        (0..=level)
            .rev()
            .find_map(|l| tables[l].get(&rec.covariates[..l]).map(|(s, c)| s / *c as f64))
            .unwrap()
    };
    let n = records.len();
    let (mut total, mut subsets) = (0.0, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != trial {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let tables: Vec<_> = (0..=r + 1).map(|l| means(&members, l)).collect();
        let mut diff = 0.0;
        for rec in records {
            let ef = predict(&tables, rec, r + 1) - predict(&pop, rec, r + 1);
            let ec = predict(&tables, rec, r) - predict(&pop, rec, r);
            diff += ef * ef - ec * ec;
        }
        total += diff / n as f64;
        subsets += 1;
    }
    total / subsets as f64
}

#[test]
fn tradeoff_loss_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records: Vec<Record> = (0..10)
        .map(|_| Record {
            covariates: vec![rng.random_range(0..2), rng.random_range(0..3)],
            outcome: rng.random_range(-2.0..2.0),
        })
        .collect();
    let oracle = tradeoff_oracle(&records, 4, 1);
    let pop = FinitePopulation::new(records).unwrap();
    let t = tradeoff_estimate(&pop, 4, 1, 100_000, SeedSpec::new(5, 0)).unwrap();
    assert!((t.loss - oracle).abs() < 4.0 * t.loss_se, "{} vs {oracle} (se {})", t.loss, t.loss_se);
}

#[test]
fn leverage_matches_a_qr_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = DMatrix::from_fn(20, 3, |_, j| if j == 0 { 1.0 } else { rng.random_range(-3.0..3.0) });
    let x0 = DVector::from_vec(vec![1.0, 0.3, -1.2]);
    // x0ᵀ(XᵀX)⁻¹x0 = ‖R⁻ᵀx0‖² for X = QR
    let r = x.clone().qr().r();
    let v = r.transpose().solve_lower_triangular(&x0).unwrap();
    let h = leverage(&x, &x0).unwrap();
    assert!((h - v.norm_squared()).abs() < 1e-12, "{h} vs {}", v.norm_squared());
}

#[test]
fn uniform_beta_alternative_gives_uniform_pvalues() {
    let s = Scenario::new(
        PriorSpec::PointMass(1.0),
        NoiseSpec::BetaPValue { a: 1.0, b: 1.0 },
        StructuralModel::PValueChannel,
        1,
    );
    let seed = SeedSpec::new(7, 0);
    let mut p: Vec<f64> = (0..20_000)
        .map(|i| match generate_problem(&s, &seed, i).data {
            DataValue::PValue(p) => p,
            other => panic!("{other:?}"),
        })
        .collect();
    p.sort_by(f64::total_cmp);
    let n = p.len() as f64;
    let d = p
        .iter()
        .enumerate()
        .map(|(i, x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max);
    assert!(d < 1.628 / n.sqrt(), "KS {d}");
}

#[test]
fn z_test_rejects_exactly_when_the_interval_excludes_zero() {
    let crit = z_quantile(0.975);
    let test = Procedure::Test(TestRule::ZTest { critical: crit });
    let interval = Procedure::Interval(IntervalRule::ZInterval { level: 0.95 });
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2000 {
        let n = rng.random_range(1..20);
        let data = DataValue::measurements((0..n).map(|_| rng.random_range(-1.5..1.5)).collect());
        let Decision::Test { reject } = test.apply(&data).unwrap() else { panic!() };
        let Decision::Interval { lo, hi } = interval.apply(&data).unwrap() else { panic!() };
        let excludes = lo > 0.0 || hi < 0.0;
        let ybar = data.flat_values().iter().sum::<f64>() / n as f64;
        // skip values within rounding of the boundary
        if ((n as f64).sqrt() * ybar.abs() - crit).abs() > 1e-9 {
            assert_eq!(reject, excludes, "n={n} ybar={ybar}");
        }
    }
}

#[test]
fn streams_are_reproducible_and_independent() {
    let s = Scenario::new(PriorSpec::gaussian(0.0, 1.0), NoiseSpec::StdNormal, StructuralModel::Additive, 1);
    let a = SeedSpec::new(9, 0);
    let b = a.substream(1);
    let draw = |seed: &SeedSpec, i| generate_problem(&s, seed, i).data.flat_values()[0];
    assert_eq!(draw(&a, 17), draw(&SeedSpec::new(9, 0), 17));
    let n = 20_000;
    let xs: Vec<f64> = (0..n).map(|i| draw(&a, i)).collect();
    let ys: Vec<f64> = (0..n).map(|i| draw(&b, i)).collect();
    let lagged: Vec<f64> = (1..=n).map(|i| draw(&a, i)).collect();
    let corr = |u: &[f64], v: &[f64]| {
        let (mu, mv) = (u.iter().sum::<f64>() / n as f64, v.iter().sum::<f64>() / n as f64);
        let cov: f64 = u.iter().zip(v).map(|(x, y)| (x - mu) * (y - mv)).sum();
        let su: f64 = u.iter().map(|x| (x - mu).powi(2)).sum();
        let sv: f64 = v.iter().map(|y| (y - mv).powi(2)).sum();
        cov / (su * sv).sqrt()
    };
    let bound = 4.0 / (n as f64).sqrt();
    assert!(corr(&xs, &ys).abs() < bound);
    assert!(corr(&xs, &lagged).abs() < bound);
}

fn prior_strategy() -> impl Strategy<Value = PriorSpec> {
    let leaf = prop_oneof![
        (-100.0..100.0f64).prop_map(PriorSpec::PointMass),
        (-10.0..10.0f64, -10.0..10.0f64, 0.0..=1.0f64).prop_map(|(a, b, w)| PriorSpec::two_point(a, b, w)),
        (-10.0..10.0f64, 0.01..10.0f64).prop_map(|(m, s)| PriorSpec::gaussian(m, s)),
        (-10.0..0.0f64, 0.0..10.0f64, 1usize..50).prop_map(|(lo, hi, points)| PriorSpec::UniformGrid { lo, hi, points }),
    ];
    leaf.prop_recursive(2, 8, 3, |inner| {
        prop::collection::vec((inner, 0.01..1.0f64), 1..3).prop_map(PriorSpec::FiniteMixture)
    })
}

fn noise_strategy() -> impl Strategy<Value = NoiseSpec> {
    prop_oneof![
        Just(NoiseSpec::StdNormal),
        Just(NoiseSpec::UnitMeanExponential),
        (0.01..3.0f64).prop_map(|sigma| NoiseSpec::UnitMeanLogNormal { sigma }),
        (0.01..5.0f64, 0.01..5.0f64).prop_map(|(a, b)| NoiseSpec::BetaPValue { a, b }),
        (0.0..=1.0f64, 0.0..=1.0f64)
            .prop_map(|(sensitivity, specificity)| NoiseSpec::BernoulliChannel { sensitivity, specificity }),
        (0.01..10.0f64, 0.01..10.0f64, 0.0..=1.0f64)
            .prop_map(|(sd_lab1, sd_lab2, prob_lab1)| NoiseSpec::TwoLabMixture { sd_lab1, sd_lab2, prob_lab1 }),
    ]
}

proptest! {
    #[test]
    fn priors_round_trip_through_config_syntax(p in prior_strategy()) {
        let text = p.to_string();
        prop_assert_eq!(prior_from(&parse_value(&text).unwrap()).unwrap(), p, "{}", text);
    }

    #[test]
    fn noise_round_trips_through_config_syntax(n in noise_strategy()) {
        let text = n.to_string();
        prop_assert_eq!(noise_from(&parse_value(&text).unwrap()).unwrap(), n, "{}", text);
    }

    #[test]
    fn tau_lists_round_trip(grid in prop::collection::vec(0.0..100.0f64, 1..10)) {
        let text = grid.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        prop_assert_eq!(parse_tau_grid(&text).unwrap(), grid);
    }
}
