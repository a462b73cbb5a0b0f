//! Ready-made scenario bundles for the worked examples, and the analytic
//! companions they need: z-test power, empirical-Bayes prevalence,
//! leave-one-out cross-validation, winner's-curse bias and binomial risk.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_config, RunSpec};
use crate::distmodel::{DataValue, PriorSpec, Scenario, StructuralModel, Truth};
use crate::error::{domain, Error, Result};
use crate::genctl::{ensure_valid, generate_problem, SeedSpec};
use crate::linalg;
use crate::procedures::{minimax_binomial_estimate, phi};

/// Identifier of a catalogued bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CanonId {
    TwoLabs,
    SingleMeasurement,
    WinnersCurse,
    PValueMatching,
    DiagnosticTest,
    BatteryPivot,
    ZTestPower,
    RegressionPartial,
    MinimaxCoin,
    EmpiricalBayes,
    LooCv,
}

impl CanonId {
    pub const ALL: [CanonId; 11] = [
        CanonId::TwoLabs,
        CanonId::SingleMeasurement,
        CanonId::WinnersCurse,
        CanonId::PValueMatching,
        CanonId::DiagnosticTest,
        CanonId::BatteryPivot,
        CanonId::ZTestPower,
        CanonId::RegressionPartial,
        CanonId::MinimaxCoin,
        CanonId::EmpiricalBayes,
        CanonId::LooCv,
    ];

    /// The snake-case id used on the command line.
    pub fn name(self) -> &'static str {
        match self {
            CanonId::TwoLabs => "two_labs",
            CanonId::SingleMeasurement => "single_measurement",
            CanonId::WinnersCurse => "winners_curse",
            CanonId::PValueMatching => "pvalue_matching",
            CanonId::DiagnosticTest => "diagnostic_test",
            CanonId::BatteryPivot => "battery_pivot",
            CanonId::ZTestPower => "ztest_power",
            CanonId::RegressionPartial => "regression_partial",
            CanonId::MinimaxCoin => "minimax_coin",
            CanonId::EmpiricalBayes => "empirical_bayes",
            CanonId::LooCv => "loo_cv",
        }
    }

    /// The bundle's config text.
    pub fn config_text(self) -> &'static str {
        match self {
            CanonId::TwoLabs => include_str!("../canon/two_labs.conf"),
            CanonId::SingleMeasurement => include_str!("../canon/single_measurement.conf"),
            CanonId::WinnersCurse => include_str!("../canon/winners_curse.conf"),
            CanonId::PValueMatching => include_str!("../canon/pvalue_matching.conf"),
            CanonId::DiagnosticTest => include_str!("../canon/diagnostic_test.conf"),
            CanonId::BatteryPivot => include_str!("../canon/battery_pivot.conf"),
            CanonId::ZTestPower => include_str!("../canon/ztest_power.conf"),
            CanonId::RegressionPartial => include_str!("../canon/regression_partial.conf"),
            CanonId::MinimaxCoin => include_str!("../canon/minimax_coin.conf"),
            CanonId::EmpiricalBayes => include_str!("../canon/empirical_bayes.conf"),
            CanonId::LooCv => include_str!("../canon/loo_cv.conf"),
        }
    }

    /// First comment line of the bundle.
    pub fn summary(self) -> String {
        let mut out = Vec::new();
        for line in self.config_text().lines() {
            match line.strip_prefix('#') {
                Some(rest) => out.push(rest.trim()),
                None => break,
            }
        }
        out.join(" ")
    }
}

impl fmt::Display for CanonId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CanonId {
    type Err = Error;

    /// Accepts the snake-case id or the CamelCase variant name.
    fn from_str(s: &str) -> Result<Self> {
        CanonId::ALL
            .into_iter()
            .find(|id| id.name() == s || format!("{id:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config { line: 0, msg: format!("unknown canon id `{s}`") })
    }
}

/// Every catalogued bundle.
pub fn list() -> &'static [CanonId] {
    &CanonId::ALL
}

/// Parses the bundle's config. Bundles are fixed at build time, so a failure
/// here is a defect, surfaced as a config error.
pub fn load(id: CanonId) -> Result<RunSpec> {
    parse_config(id.config_text(), None)
}

/// Power of the two-sided z-test `√n|ȳ| > critical` with unit-variance
/// errors, at each θ of `theta_grid`.
pub fn power_curve(critical: f64, n: usize, theta_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return domain("n must be at least 1");
    }
    if !(critical > 0.0) {
        return domain(format!("critical value must be positive, got {critical}"));
    }
    let rn = (n as f64).sqrt();
    Ok(theta_grid.iter().map(|&t| (t, phi(-critical + t * rn) + phi(-critical - t * rn))).collect())
}

/// Largest Type II error over alternatives with `|θ| ≥ magnitude_floor`;
/// power grows with |θ|, so this is the Type II error at the floor.
pub fn worst_case_type2(critical: f64, n: usize, magnitude_floor: f64) -> Result<f64> {
    if !(magnitude_floor > 0.0) {
        return domain(format!("magnitude floor must be positive, got {magnitude_floor}"));
    }
    if magnitude_floor.is_infinite() {
        return Ok(0.0);
    }
    Ok(1.0 - power_curve(critical, n, &[magnitude_floor])?[0].1)
}

/// Method-of-moments prevalence from a panel of test results, clamped to
/// [0, 1].
pub fn eb_prevalence(results: &[bool], sensitivity: f64, specificity: f64) -> Result<f64> {
    if results.is_empty() {
        return domain("no test results");
    }
    let positives = results.iter().filter(|r| **r).count();
    eb_prevalence_from_fraction(positives as f64 / results.len() as f64, sensitivity, specificity)
}

/// [`eb_prevalence`] from the observed positive fraction.
pub fn eb_prevalence_from_fraction(fraction: f64, sensitivity: f64, specificity: f64) -> Result<f64> {
    for (name, p) in [("sensitivity", sensitivity), ("specificity", specificity), ("positive fraction", fraction)] {
        if !(0.0..=1.0).contains(&p) {
            return domain(format!("{name} must lie in [0, 1], got {p}"));
        }
    }
    let slope = sensitivity + specificity - 1.0;
    if slope.abs() < 1e-12 {
        return domain("prevalence is not identifiable when sensitivity + specificity = 1");
    }
    Ok(((fraction - (1.0 - specificity)) / slope).clamp(0.0, 1.0))
}

/// Mean absolute prevalence-estimation error at one panel size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EbPoint {
    pub n: usize,
    pub mean_abs_error: f64,
    pub mc_se: f64,
}

/// Estimation error of [`eb_prevalence`] over `replications` simulated panels
/// of each size, and the least-squares slope of log error on log n.
pub fn eb_consistency(
    prevalence: f64,
    sensitivity: f64,
    specificity: f64,
    panel_sizes: &[usize],
    replications: u64,
    seed: SeedSpec,
) -> Result<(Vec<EbPoint>, f64)> {
    if !(0.0..=1.0).contains(&prevalence) {
        return domain(format!("prevalence must lie in [0, 1], got {prevalence}"));
    }
    if panel_sizes.len() < 2 || panel_sizes.contains(&0) {
        return domain("need at least two nonzero panel sizes");
    }
    if replications < 2 {
        return domain("need at least two replications");
    }
    eb_prevalence_from_fraction(0.5, sensitivity, specificity)?;
    let q = prevalence * sensitivity + (1.0 - prevalence) * (1.0 - specificity);
    let mut points = Vec::with_capacity(panel_sizes.len());
    for (k, &n) in panel_sizes.iter().enumerate() {
        let sub = seed.substream(k as u64);
        let binom = Binomial::new(n as u64, q).map_err(|e| Error::Domain(e.to_string()))?;
        let errors: Vec<f64> = (0..replications)
            .into_par_iter()
            .map(|r| {
                let positives = binom.sample(&mut sub.problem_rng(r));
                let est = eb_prevalence_from_fraction(positives as f64 / n as f64, sensitivity, specificity)
                    .expect("checked above");
                (est - prevalence).abs()
            })
            .collect();
        let m = errors.iter().sum::<f64>() / errors.len() as f64;
        let var = errors.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (errors.len() - 1) as f64;
        points.push(EbPoint { n, mean_abs_error: m, mc_se: (var / errors.len() as f64).sqrt() });
    }
    if points.iter().any(|p| p.mean_abs_error <= 0.0) {
        return domain("zero estimation error at some panel size; slope undefined");
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_abs_error.ln()).collect();
    Ok((points, ls_slope(&xs, &ys)))
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Leave-one-out prediction errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LooReport {
    /// `y_i` minus its prediction from the fit without record `i`.
    pub errors: Vec<f64>,
    pub mean_squared: f64,
}

/// Leave-one-out cross-validation of a least-squares fit, by the hat-matrix
/// identity `e_i = r_i / (1 − h_ii)`.
pub fn loo_cv_error(design: &DMatrix<f64>, outcomes: &DVector<f64>) -> Result<LooReport> {
    let (n, k) = design.shape();
    if outcomes.len() != n {
        return domain(format!("{} outcomes for a design with {n} rows", outcomes.len()));
    }
    if n <= k + 1 {
        return domain(format!("leave-one-out needs more than {} records, got {n}", k + 1));
    }
    for i in 0..n {
        if linalg::rank(&design.clone().remove_row(i)) < k {
            return domain(format!("design loses rank when record {} is deleted", i + 1));
        }
    }
    let chol = linalg::gram_cholesky(design)?;
    let beta = chol.solve(&(design.transpose() * outcomes));
    let fitted = design * &beta;
    let errors: Vec<f64> = (0..n)
        .map(|i| {
            let xi = design.row(i).transpose();
            let h = xi.dot(&chol.solve(&xi));
            (outcomes[i] - fitted[i]) / (1.0 - h)
        })
        .collect();
    let mean_squared = errors.iter().map(|e| e * e).sum::<f64>() / n as f64;
    Ok(LooReport { errors, mean_squared })
}

/// Leave-one-out errors by `n` explicit refits; the reference for
/// [`loo_cv_error`].
pub fn loo_cv_refit(design: &DMatrix<f64>, outcomes: &DVector<f64>) -> Result<LooReport> {
    let n = design.nrows();
    if outcomes.len() != n {
        return domain(format!("{} outcomes for a design with {n} rows", outcomes.len()));
    }
    let errors = (0..n)
        .map(|i| {
            let x = design.clone().remove_row(i);
            let y = outcomes.clone().remove_row(i);
            let beta = linalg::ols(&x, &y).map_err(|_| Error::Domain(format!("design loses rank when record {} is deleted", i + 1)))?;
            Ok(outcomes[i] - design.row(i).transpose().dot(&beta))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean_squared = errors.iter().map(|e| e * e).sum::<f64>() / n as f64;
    Ok(LooReport { errors, mean_squared })
}

/// Selection-conditional bias of one marker's estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarkerBias {
    /// 1-based marker index.
    pub marker: usize,
    pub selection_rate: f64,
    pub selected: u64,
    /// `E[θ̂ − θ | selected]`; `None` when never selected.
    pub bias: Option<f64>,
    /// `E[|θ̂| − |θ| | selected]`, the overstatement of effect magnitude.
    pub magnitude_bias: Option<f64>,
    /// Monte Carlo standard error of `magnitude_bias`.
    pub mc_se: Option<f64>,
}

impl MarkerBias {
    /// Whether the marker was never selected, so its bias is unavailable.
    pub fn missing(&self) -> bool {
        self.selected == 0
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct MarkerTally {
    selected: u64,
    sum: f64,
    sum_mag: f64,
    sum_mag2: f64,
}

/// Simulates `count` panels of `panel` with marker effects from `prior` and
/// reports, per marker, how often it is selected and the bias of its estimate
/// among the panels that select it.
pub fn winners_curse_report(panel: &Scenario, prior: &PriorSpec, count: u64, seed: SeedSpec) -> Result<Vec<MarkerBias>> {
    let StructuralModel::MarkerPanel { n_markers, .. } = panel.structure else {
        return domain(format!("winner's curse needs a marker panel scenario, got {}", panel.structure));
    };
    let s = panel.with_prior(prior.clone());
    ensure_valid(&s)?;
    if count == 0 {
        return domain("count must be at least 1");
    }
    let chunk = 4096u64;
    let parts: Vec<Vec<MarkerTally>> = (0..count.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut t = vec![MarkerTally::default(); n_markers];
            for i in c * chunk..((c + 1) * chunk).min(count) {
                let p = generate_problem(&s, &seed, i);
                let (DataValue::MarkerPanel { estimates, selected, .. }, Truth::Vector(truths)) = (&p.data, &p.truth) else {
                    unreachable!("marker panel scenarios generate marker panels")
                };
                for &m in selected {
                    let (est, th) = (estimates[m - 1], truths[m - 1]);
                    let mag = est.abs() - th.abs();
                    let tm = &mut t[m - 1];
                    tm.selected += 1;
                    tm.sum += est - th;
                    tm.sum_mag += mag;
                    tm.sum_mag2 += mag * mag;
                }
            }
            t
        })
        .collect();
    let mut total = vec![MarkerTally::default(); n_markers];
    for part in parts {
        for (a, b) in total.iter_mut().zip(part) {
            a.selected += b.selected;
            a.sum += b.sum;
            a.sum_mag += b.sum_mag;
            a.sum_mag2 += b.sum_mag2;
        }
    }
    Ok(total
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let k = t.selected as f64;
            let (bias, magnitude_bias, mc_se) = if t.selected == 0 {
                (None, None, None)
            } else {
                let m = t.sum_mag / k;
                let se = if t.selected > 1 { ((t.sum_mag2 / k - m * m).max(0.0) * k / (k - 1.0) / k).sqrt() } else { 0.0 };
                (Some(t.sum / k), Some(m), Some(se))
            };
            MarkerBias { marker: i + 1, selection_rate: k / count as f64, selected: t.selected, bias, magnitude_bias, mc_se }
        })
        .collect())
}

/// Exact squared-error risk of the minimax and sample-proportion estimators
/// for `n` Bernoulli trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskPoint {
    pub theta: f64,
    pub minimax: f64,
    pub sample_mean: f64,
}

/// Risk of both binomial estimators at each θ of `theta_grid`, summed
/// exactly over the binomial distribution.
pub fn minimax_risk_curve(n: usize, theta_grid: &[f64]) -> Result<Vec<RiskPoint>> {
    if n == 0 {
        return domain("n must be at least 1");
    }
    if let Some(t) = theta_grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return domain(format!("theta must lie in [0, 1], got {t}"));
    }
    let estimates: Vec<f64> = (0..=n).map(|x| minimax_binomial_estimate(x, n)).collect::<Result<_>>()?;
    Ok(theta_grid
        .iter()
        .map(|&theta| {
            let (mut minimax, mut sample_mean) = (0.0, 0.0);
            for (x, est) in estimates.iter().enumerate() {
                let w = binomial_pmf(n, x, theta);
                minimax += w * (est - theta).powi(2);
                sample_mean += w * (x as f64 / n as f64 - theta).powi(2);
            }
            RiskPoint { theta, minimax, sample_mean }
        })
        .collect())
}

fn binomial_pmf(n: usize, x: usize, p: f64) -> f64 {
    let mut c = 1.0;
    for i in 0..x.min(n - x) {
        c = c * (n - i) as f64 / (i + 1) as f64;
    }
    c * p.powi(x as i32) * (1.0 - p).powi((n - x) as i32)
}

/// Draws a panel of test results; for simulation-based checks of
/// [`eb_prevalence`].
pub fn simulate_test_panel<R: Rng + ?Sized>(
    n: usize,
    prevalence: f64,
    sensitivity: f64,
    specificity: f64,
    rng: &mut R,
) -> Vec<bool> {
    (0..n)
        .map(|_| {
            let sick = rng.random::<f64>() < prevalence;
            let u = rng.random::<f64>();
            if sick { u < sensitivity } else { u < 1.0 - specificity }
        })
        .collect()
}
