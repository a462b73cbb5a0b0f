//! Reproducible generation of control problems from a [`Scenario`].
//!
//! Every problem has its own ChaCha8 key built from
//! `(root_seed, stream_index, problem_index)`, so problem `i` can be produced
//! by any worker without replaying problems `0..i`. Parallel evaluation
//! therefore sees the same sequence as a single-threaded run.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01, StandardNormal};
use libm::erfc;

use crate::distmodel::{
    sample_beta, validate_scenario, ControlProblem, DataValue, NoiseSpec, PriorSpec, Scenario,
    StructuralModel, Truth,
};
use crate::error::{domain, Error, Result};

// Key domain tags; problem streams and auxiliary streams never share a key.
const TAG_PROBLEM: u64 = 0x7072_6f62_6c65_6d00;
const TAG_AUX: u64 = 0x6175_7869_6c69_6100;

/// Root seed plus stream index. Distinct stream indices under the same root
/// give independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub root_seed: u64,
    pub stream_index: u64,
}

impl SeedSpec {
    pub fn new(root_seed: u64, stream_index: u64) -> Self {
        SeedSpec { root_seed, stream_index }
    }

    /// Generator for problem number `index` of this stream.
    pub fn problem_rng(&self, index: u64) -> ChaCha8Rng {
        keyed_rng(self.root_seed, self.stream_index, index, TAG_PROBLEM)
    }

    /// Generator for auxiliary draws (quantile calibration, resampling) that
    /// must not collide with problem streams.
    pub fn aux_rng(&self, purpose: u64) -> ChaCha8Rng {
        keyed_rng(self.root_seed, self.stream_index, purpose, TAG_AUX)
    }

    /// Same root, different stream.
    pub fn substream(&self, stream_index: u64) -> Self {
        SeedSpec { root_seed: self.root_seed, stream_index }
    }
}

fn keyed_rng(root: u64, stream: u64, counter: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&root.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&counter.to_le_bytes());
    key[24..].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Checks the scenario and returns a configuration error naming every
/// violation.
pub fn ensure_valid(s: &Scenario) -> Result<()> {
    let violations = validate_scenario(s);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidScenario(violations))
    }
}

/// Problem `index` of the stream `seed` under scenario `s`. The scenario must
/// already be valid.
pub fn generate_problem(s: &Scenario, seed: &SeedSpec, index: u64) -> ControlProblem {
    let mut rng = seed.problem_rng(index);
    draw_problem(s, &mut rng)
}

/// Simulates one control problem: θ′ from the prior, ε′ from the noise law,
/// data from the structural model.
pub fn draw_problem<R: Rng + ?Sized>(s: &Scenario, rng: &mut R) -> ControlProblem {
    match &s.structure {
        StructuralModel::Additive => {
            let theta = s.prior.sample(rng);
            let (values, labs) = additive_noise(&s.noise, s.n, rng);
            let values = values.into_iter().map(|e| theta + e).collect();
            ControlProblem::new(DataValue::Measurements { values, labs }, Truth::Scalar(theta))
        }
        StructuralModel::Multiplicative => {
            let theta = s.prior.sample_positive(rng);
            let values = (0..s.n).map(|_| theta * s.noise.sample_scalar(rng)).collect();
            ControlProblem::new(DataValue::measurements(values), Truth::Scalar(theta))
        }
        StructuralModel::LinearRegression { design, target_covariates } => {
            let beta = DVector::from_fn(design.ncols(), |_, _| s.prior.sample(rng));
            let mean = design * &beta;
            let outcomes = mean
                .iter()
                .map(|m| m + { let z: f64 = StandardNormal.sample(rng); z })
                .collect();
            let e0: f64 = StandardNormal.sample(rng);
            let truth = target_covariates.dot(&beta) + e0;
            ControlProblem::new(DataValue::Regression { outcomes }, Truth::Scalar(truth))
        }
        StructuralModel::PValueChannel => {
            let theta = s.prior.sample(rng);
            let p = match s.noise {
                NoiseSpec::BetaPValue { a, b } if theta != 0.0 => sample_beta(a, b, rng),
                _ => Open01.sample(rng),
            };
            ControlProblem::new(DataValue::PValue(p), Truth::Scalar(theta))
        }
        StructuralModel::DiagnosticTest => {
            let theta = s.prior.sample(rng);
            let (sens, spec) = match s.noise {
                NoiseSpec::BernoulliChannel { sensitivity, specificity } => (sensitivity, specificity),
                _ => (1.0, 1.0),
            };
            let u: f64 = rng.random();
            let positive = if theta != 0.0 { u < sens } else { u < 1.0 - spec };
            ControlProblem::new(DataValue::TestResult(positive), Truth::Scalar(theta))
        }
        StructuralModel::MarkerPanel { n_subjects, n_markers, selection_threshold } => {
            let se = StructuralModel::marker_std_error(*n_subjects);
            let mut truths = Vec::with_capacity(*n_markers);
            let mut estimates = Vec::with_capacity(*n_markers);
            for _ in 0..*n_markers {
                let theta = s.prior.sample(rng);
                let z: f64 = StandardNormal.sample(rng);
                truths.push(theta);
                estimates.push(theta + se * z);
            }
            let selected = select_markers(&estimates, se, *selection_threshold);
            ControlProblem::new(
                DataValue::MarkerPanel { estimates, std_error: se, selected },
                Truth::Vector(truths),
            )
        }
    }
}

/// Indices (1-based) of markers whose two-sided z-test p-value is at most
/// `threshold`.
pub fn select_markers(estimates: &[f64], std_error: f64, threshold: f64) -> BTreeSet<usize> {
    estimates
        .iter()
        .enumerate()
        .filter(|(_, est)| two_sided_p(**est / std_error) <= threshold)
        .map(|(i, _)| i + 1)
        .collect()
}

pub(crate) fn two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

fn additive_noise<R: Rng + ?Sized>(
    noise: &NoiseSpec,
    n: usize,
    rng: &mut R,
) -> (Vec<f64>, Option<Vec<u8>>) {
    match *noise {
        NoiseSpec::TwoLabMixture { sd_lab1, sd_lab2, prob_lab1 } => {
            let mut values = Vec::with_capacity(n);
            let mut labs = Vec::with_capacity(n);
            for _ in 0..n {
                let lab1 = rng.random::<f64>() < prob_lab1;
                let z: f64 = StandardNormal.sample(rng);
                labs.push(if lab1 { 1 } else { 2 });
                values.push(if lab1 { sd_lab1 * z } else { sd_lab2 * z });
            }
            (values, Some(labs))
        }
        _ => ((0..n).map(|_| noise.sample_scalar(rng)).collect(), None),
    }
}

/// Lazily generated controls `0..count` of one stream.
pub struct ControlStream<'a> {
    scenario: &'a Scenario,
    seed: SeedSpec,
    next: u64,
    count: u64,
}

impl Iterator for ControlStream<'_> {
    type Item = ControlProblem;

    fn next(&mut self) -> Option<ControlProblem> {
        if self.next >= self.count {
            return None;
        }
        let p = generate_problem(self.scenario, &self.seed, self.next);
        self.next += 1;
        Some(p)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.count - self.next) as usize;
        (left, Some(left))
    }
}

/// Constant-memory stream of `count` controls.
pub fn control_stream<'a>(s: &'a Scenario, count: u64, seed: SeedSpec) -> Result<ControlStream<'a>> {
    ensure_valid(s)?;
    Ok(ControlStream { scenario: s, seed, next: 0, count })
}

/// Exactly `count` controls; bit-identical for identical inputs.
pub fn simulate_controls(s: &Scenario, count: usize, seed: SeedSpec) -> Result<Vec<ControlProblem>> {
    Ok(control_stream(s, count as u64, seed)?.collect())
}

/// `s` with its prior collapsed to a point mass at `estimate` (plug-in /
/// parametric bootstrap).
pub fn plugin_scenario(s: &Scenario, estimate: f64) -> Result<Scenario> {
    if !estimate.is_finite() {
        return domain("plug-in estimate must be finite");
    }
    match s.structure {
        StructuralModel::Multiplicative if estimate <= 0.0 => {
            domain(format!("multiplicative model needs a positive plug-in estimate, got {estimate}"))
        }
        StructuralModel::PValueChannel | StructuralModel::DiagnosticTest
            if estimate != 0.0 && estimate != 1.0 =>
        {
            domain(format!("binary-truth model needs a plug-in estimate of 0 or 1, got {estimate}"))
        }
        _ => Ok(s.with_prior(PriorSpec::PointMass(estimate))),
    }
}

/// Writes one problem per line: truth (vector truths joined by `;`) followed by
/// the flat data values, comma separated.
pub fn write_problem_dump<W: Write>(out: &mut W, problems: &[ControlProblem]) -> std::io::Result<()> {
    for p in problems {
        let truth: Vec<String> = p.truth.values().iter().map(|v| v.to_string()).collect();
        write!(out, "{}", truth.join(";"))?;
        for v in p.data.flat_values() {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed() -> SeedSpec {
        SeedSpec::new(42, 0)
    }

    #[test]
    fn point_mass_forces_truth() {
        let s = Scenario::new(PriorSpec::PointMass(0.0), NoiseSpec::StdNormal, StructuralModel::Additive, 3);
        let ps = simulate_controls(&s, 2, seed()).unwrap();
        assert_eq!(ps.len(), 2);
        for p in &ps {
            assert_eq!(p.truth, Truth::Scalar(0.0));
            assert_eq!(p.data.len(), 3);
        }
    }

    #[test]
    fn multiplicative_data_positive() {
        let s = Scenario::new(
            PriorSpec::gaussian(5.0, 2.0),
            NoiseSpec::UnitMeanExponential,
            StructuralModel::Multiplicative,
            5,
        );
        for p in simulate_controls(&s, 10_000, seed()).unwrap() {
            assert!(p.truth.scalar().unwrap() > 0.0);
            assert!(p.data.flat_values().iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn two_point_weight_is_respected() {
        let s = Scenario::new(
            PriorSpec::two_point(0.0, 1.0, 0.5),
            NoiseSpec::BetaPValue { a: 0.02, b: 1.35 },
            StructuralModel::PValueChannel,
            1,
        );
        let n = 1_000_000u64;
        let ones = control_stream(&s, n, seed())
            .unwrap()
            .filter(|p| p.truth == Truth::Scalar(1.0))
            .count();
        // 4 binomial standard errors: 4·sqrt(0.25/1e6) = 0.002
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.002);
    }

    #[test]
    fn invalid_scenario_is_refused() {
        let s = Scenario::new(PriorSpec::PointMass(1.0), NoiseSpec::StdNormal, StructuralModel::Multiplicative, 3);
        match simulate_controls(&s, 1, seed()) {
            Err(Error::InvalidScenario(v)) => assert!(v[0].contains("positive unit-mean")),
            other => panic!("expected configuration error, got {other:?}"),
        }
    }

    #[test]
    fn plugin_replaces_prior_only() {
        let s = Scenario::new(PriorSpec::gaussian(0.0, 1.0), NoiseSpec::StdNormal, StructuralModel::Additive, 4);
        let p = plugin_scenario(&s, 2.5).unwrap();
        assert_eq!(p.prior, PriorSpec::PointMass(2.5));
        assert_eq!((p.noise.clone(), p.structure.clone(), p.n), (s.noise.clone(), s.structure.clone(), s.n));
        for c in simulate_controls(&p, 50, seed()).unwrap() {
            assert_eq!(c.truth, Truth::Scalar(2.5));
        }
    }

    #[test]
    fn plugin_rejects_nonpositive_multiplicative() {
        let s = Scenario::new(
            PriorSpec::PointMass(1.0),
            NoiseSpec::UnitMeanExponential,
            StructuralModel::Multiplicative,
            3,
        );
        assert!(matches!(plugin_scenario(&s, 0.0), Err(Error::Domain(_))));
        assert!(plugin_scenario(&s, 0.7).is_ok());
    }

    #[test]
    fn parametric_bootstrap_from_sample_mean() {
        let s = Scenario::new(
            PriorSpec::gaussian(5.0, 2.0),
            NoiseSpec::UnitMeanExponential,
            StructuralModel::Multiplicative,
            4,
        );
        let observed = [3.0, 6.5, 2.5, 4.0];
        let ybar = observed.iter().sum::<f64>() / 4.0;
        let boot = plugin_scenario(&s, ybar).unwrap();
        let controls = simulate_controls(&boot, 20_000, seed()).unwrap();
        assert!(controls.iter().all(|c| c.truth == Truth::Scalar(ybar)));
        let grand: f64 = controls.iter().flat_map(|c| c.data.flat_values()).sum::<f64>() / 80_000.0;
        assert!((grand - ybar).abs() < 0.05 * ybar);
    }

    #[test]
    fn lab_mixture_records_assignments() {
        let s = Scenario::new(
            PriorSpec::PointMass(0.0),
            NoiseSpec::TwoLabMixture { sd_lab1: 1.0, sd_lab2: 100.0, prob_lab1: 0.5 },
            StructuralModel::Additive,
            6,
        );
        let p = generate_problem(&s, &seed(), 0);
        match p.data {
            DataValue::Measurements { labs: Some(labs), values } => {
                assert_eq!(labs.len(), 6);
                assert_eq!(values.len(), 6);
                assert!(labs.iter().all(|l| *l == 1 || *l == 2));
            }
            other => panic!("unexpected data {other:?}"),
        }
    }

    #[test]
    fn marker_selection_uses_two_sided_p() {
        let sel = select_markers(&[0.0, 0.5, -0.5, 0.3], 0.2, 0.05);
        assert_eq!(sel, BTreeSet::from([2, 3]));
        assert_eq!(select_markers(&[0.0, 0.01], 0.2, 1.0).len(), 2);
    }

    #[test]
    fn dump_format() {
        let problems = vec![ControlProblem::new(DataValue::measurements(vec![1.5, 2.0]), Truth::Scalar(1.0))];
        let mut buf = Vec::new();
        write_problem_dump(&mut buf, &problems).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "1,1.5,2\n");
    }
}
