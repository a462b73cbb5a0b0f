//! Decision rules under evaluation and their losses.
//!
//! Most rules act on the data alone. Two need facts from the scenario: the
//! multiplicative pivot needs the quantile `c` of the mean noise, and the
//! least-squares prediction needs the design. [`Procedure::bind`] resolves
//! those once so that per-control application stays cheap.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Gamma, Normal};

use crate::distmodel::{DataValue, NoiseSpec, Scenario, StructuralModel, Truth};
use crate::error::{domain, Result};
use crate::genctl::SeedSpec;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PointRule {
    SampleMeanEst,
    MinimaxBinomialEst,
    PlugInMarkerEst,
    /// `x₀ᵀβ̂` for the target covariates of a regression scenario.
    LeastSquaresPrediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLoss {
    Squared,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntervalRule {
    /// `[ȳ − buffer, ∞)`.
    AdditiveLower { buffer: f64 },
    /// `[ȳ / c, ∞)` with `c` the `level` quantile of the mean noise.
    MultiplicativePivotLower { level: f64 },
    /// `ȳ ± z/√n` with unit noise sd.
    ZInterval { level: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestRule {
    /// Reject H₀ iff `p ≤ alpha`.
    PThresholdTest { alpha: f64 },
    /// Reject H₀: θ = 0 iff `√n·|ȳ| > critical`.
    ZTest { critical: f64 },
    /// Predict sick iff the test is positive.
    DiagnosticPredict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Procedure {
    PointEst { rule: PointRule, loss: PointLoss },
    Interval(IntervalRule),
    Test(TestRule),
}

impl Procedure {
    pub fn point(rule: PointRule) -> Self {
        Procedure::PointEst { rule, loss: PointLoss::Squared }
    }

    pub fn violations(&self) -> Vec<String> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        let mut out = Vec::new();
        match *self {
            Procedure::Interval(IntervalRule::MultiplicativePivotLower { level })
            | Procedure::Interval(IntervalRule::ZInterval { level }) => {
                if !open_unit(level) {
                    out.push(format!("interval level must lie in (0, 1), got {level}"));
                }
            }
            Procedure::Interval(IntervalRule::AdditiveLower { buffer }) => {
                if !buffer.is_finite() {
                    out.push("additive buffer must be finite".into());
                }
            }
            Procedure::Test(TestRule::PThresholdTest { alpha }) => {
                if !open_unit(alpha) {
                    out.push(format!("test alpha must lie in (0, 1), got {alpha}"));
                }
            }
            Procedure::Test(TestRule::ZTest { critical }) => {
                if !(critical > 0.0 && critical.is_finite()) {
                    out.push(format!("z-test critical value must be positive, got {critical}"));
                }
            }
            _ => {}
        }
        out
    }

    /// Applies a rule that needs no scenario context.
    pub fn apply(&self, data: &DataValue) -> Result<Decision> {
        BoundProcedure { procedure: *self, pivot: None, regression: None }.apply(data)
    }

    /// Resolves scenario-dependent constants. `seed` drives the Monte Carlo
    /// quantile when the pivot has no closed form.
    pub fn bind(&self, s: &Scenario, seed: &SeedSpec) -> Result<BoundProcedure> {
        if let Some(v) = self.violations().into_iter().next() {
            return domain(v);
        }
        let pivot = match *self {
            Procedure::Interval(IntervalRule::MultiplicativePivotLower { level }) => {
                Some(pivot_constant_seeded(&s.noise, s.n, level, seed)?)
            }
            _ => None,
        };
        let regression = match (self, &s.structure) {
            (
                Procedure::PointEst { rule: PointRule::LeastSquaresPrediction, .. },
                StructuralModel::LinearRegression { design, target_covariates },
            ) => Some((design.clone(), target_covariates.clone())),
            (Procedure::PointEst { rule: PointRule::LeastSquaresPrediction, .. }, _) => {
                return domain("least-squares prediction needs a linear regression scenario");
            }
            _ => None,
        };
        Ok(BoundProcedure { procedure: *self, pivot, regression })
    }

    pub fn loss(&self, decision: &Decision, truth: &Truth) -> Result<LossValue> {
        loss(self, decision, truth)
    }
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Procedure::PointEst { rule, loss } => {
                let name = match rule {
                    PointRule::SampleMeanEst => "sample_mean",
                    PointRule::MinimaxBinomialEst => "minimax_binomial",
                    PointRule::PlugInMarkerEst => "plugin_marker",
                    PointRule::LeastSquaresPrediction => "least_squares",
                };
                match loss {
                    PointLoss::Squared => write!(f, "{name}"),
                    PointLoss::Absolute => write!(f, "{name}(loss=abs)"),
                }
            }
            Procedure::Interval(IntervalRule::AdditiveLower { buffer }) => write!(f, "additive_lower({buffer})"),
            Procedure::Interval(IntervalRule::MultiplicativePivotLower { level }) => {
                write!(f, "pivot_lower({level})")
            }
            Procedure::Interval(IntervalRule::ZInterval { level }) => write!(f, "z_interval({level})"),
            Procedure::Test(TestRule::PThresholdTest { alpha }) => write!(f, "p_threshold({alpha})"),
            Procedure::Test(TestRule::ZTest { critical }) => write!(f, "z_test({critical})"),
            Procedure::Test(TestRule::DiagnosticPredict) => write!(f, "diagnostic_predict"),
        }
    }
}

/// Output of a procedure on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Estimate(f64),
    /// One estimate per marker.
    Estimates(Vec<f64>),
    Interval { lo: f64, hi: f64 },
    /// `true` rejects H₀ (or predicts sick).
    Test { reject: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SquaredError,
    AbsError,
    /// 1 when the interval misses the truth.
    Miss,
    /// 1 when the test decision contradicts the truth.
    TestError,
}

impl LossKind {
    pub fn is_binary(self) -> bool {
        matches!(self, LossKind::Miss | LossKind::TestError)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub delta: f64,
    pub kind: LossKind,
}

/// A procedure with its scenario-dependent constants resolved.
#[derive(Debug, Clone)]
pub struct BoundProcedure {
    procedure: Procedure,
    pivot: Option<PivotConstant>,
    regression: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl BoundProcedure {
    pub fn procedure(&self) -> &Procedure {
        &self.procedure
    }

    pub fn pivot(&self) -> Option<PivotConstant> {
        self.pivot
    }

    pub fn apply(&self, data: &DataValue) -> Result<Decision> {
        let mismatch = || domain(format!("{} cannot be applied to {} data", self.procedure, data.shape_name()));
        match self.procedure {
            Procedure::PointEst { rule, .. } => match (rule, data) {
                (PointRule::SampleMeanEst, DataValue::Measurements { values, .. })
                | (PointRule::SampleMeanEst, DataValue::Regression { outcomes: values }) => {
                    Ok(Decision::Estimate(mean(values)?))
                }
                (PointRule::MinimaxBinomialEst, DataValue::Measurements { values, .. }) => {
                    if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
                        return domain("minimax binomial estimate needs 0/1 data");
                    }
                    let successes = values.iter().filter(|v| **v == 1.0).count();
                    Ok(Decision::Estimate(minimax_binomial_estimate(successes, values.len())?))
                }
                (PointRule::PlugInMarkerEst, DataValue::MarkerPanel { estimates, .. }) => {
                    Ok(Decision::Estimates(estimates.clone()))
                }
                (PointRule::LeastSquaresPrediction, DataValue::Regression { outcomes }) => {
                    let Some((design, x0)) = &self.regression else {
                        return domain("least-squares prediction must be bound to a regression scenario");
                    };
                    let beta = linalg::ols(design, &DVector::from_column_slice(outcomes))?;
                    Ok(Decision::Estimate(x0.dot(&beta)))
                }
                _ => mismatch(),
            },
            Procedure::Interval(rule) => {
                let DataValue::Measurements { values, .. } = data else {
                    return mismatch();
                };
                let ybar = mean(values)?;
                match rule {
                    IntervalRule::AdditiveLower { buffer } => {
                        Ok(Decision::Interval { lo: ybar - buffer, hi: f64::INFINITY })
                    }
                    IntervalRule::MultiplicativePivotLower { .. } => {
                        let Some(pivot) = self.pivot else {
                            return domain("pivot bound must be bound to a scenario before use");
                        };
                        Ok(Decision::Interval { lo: lower_from_pivot(values, pivot.c)?, hi: f64::INFINITY })
                    }
                    IntervalRule::ZInterval { level } => {
                        let half = z_quantile(0.5 * (1.0 + level)) / (values.len() as f64).sqrt();
                        Ok(Decision::Interval { lo: ybar - half, hi: ybar + half })
                    }
                }
            }
            Procedure::Test(rule) => match (rule, data) {
                (TestRule::PThresholdTest { alpha }, DataValue::PValue(p)) => Ok(Decision::Test { reject: *p <= alpha }),
                (TestRule::ZTest { critical }, DataValue::Measurements { values, .. }) => {
                    let stat = (values.len() as f64).sqrt() * mean(values)?.abs();
                    Ok(Decision::Test { reject: stat > critical })
                }
                (TestRule::DiagnosticPredict, DataValue::TestResult(positive)) => Ok(Decision::Test { reject: *positive }),
                _ => mismatch(),
            },
        }
    }

    pub fn loss(&self, decision: &Decision, truth: &Truth) -> Result<LossValue> {
        loss(&self.procedure, decision, truth)
    }
}

fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return domain("procedure applied to empty data");
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Standard normal quantile.
pub fn z_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Standard normal distribution function.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Loss of `decision` against `truth` for procedure `proc`.
pub fn loss(proc: &Procedure, decision: &Decision, truth: &Truth) -> Result<LossValue> {
    match (proc, decision, truth) {
        (Procedure::PointEst { loss, .. }, Decision::Estimate(est), Truth::Scalar(t)) => Ok(point_loss(*loss, &[*est], &[*t])),
        (Procedure::PointEst { loss, .. }, Decision::Estimates(est), Truth::Vector(t)) if est.len() == t.len() => {
            Ok(point_loss(*loss, est, t))
        }
        (Procedure::Interval(_), Decision::Interval { lo, hi }, Truth::Scalar(t)) => {
            let covered = *lo <= *t && *t <= *hi;
            Ok(LossValue { delta: if covered { 0.0 } else { 1.0 }, kind: LossKind::Miss })
        }
        (Procedure::Test(_), Decision::Test { reject }, Truth::Scalar(t)) => {
            let wrong = *reject != (*t != 0.0);
            Ok(LossValue { delta: if wrong { 1.0 } else { 0.0 }, kind: LossKind::TestError })
        }
        _ => domain(format!("decision {decision:?} does not fit procedure {proc} with truth {truth:?}")),
    }
}

fn point_loss(kind: PointLoss, est: &[f64], truth: &[f64]) -> LossValue {
    let n = est.len().max(1) as f64;
    match kind {
        PointLoss::Squared => LossValue {
            delta: est.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / n,
            kind: LossKind::SquaredError,
        },
        PointLoss::Absolute => LossValue {
            delta: est.iter().zip(truth).map(|(e, t)| (e - t).abs()).sum::<f64>() / n,
            kind: LossKind::AbsError,
        },
    }
}

/// The quantile `c` of the mean of n noise draws, with its Monte Carlo
/// standard error (0 when exact).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotConstant {
    pub c: f64,
    pub se: f64,
}

/// Draws used when the pivot quantile has no closed form.
pub const PIVOT_DRAWS: usize = 1_000_000;

const PIVOT_SEED: SeedSpec = SeedSpec { root_seed: 0x5049_564f_5400, stream_index: 0 };

/// `c` with the mean of `n` noise draws below `c` with probability `level`.
/// Depends on the noise law and `n` only.
pub fn pivot_constant(noise: &NoiseSpec, n: usize, level: f64) -> Result<PivotConstant> {
    pivot_constant_seeded(noise, n, level, &PIVOT_SEED)
}

fn pivot_constant_seeded(noise: &NoiseSpec, n: usize, level: f64, seed: &SeedSpec) -> Result<PivotConstant> {
    if !(level > 0.0 && level < 1.0) {
        return domain(format!("pivot level must lie in (0, 1), got {level}"));
    }
    if n < 1 {
        return domain("pivot needs at least one observation");
    }
    if !noise.is_positive_unit_mean() {
        return domain(format!("pivot needs positive unit-mean noise, got {noise}"));
    }
    match noise {
        // the mean of n unit exponentials is Gamma(n, rate n)
        NoiseSpec::UnitMeanExponential => {
            let g = Gamma::new(n as f64, n as f64).map_err(|e| crate::Error::Domain(e.to_string()))?;
            Ok(PivotConstant { c: g.inverse_cdf(level), se: 0.0 })
        }
        NoiseSpec::Categorical { labels, probs } if n == 1 || support_size(probs) == 1 => {
            let mut atoms: Vec<(f64, f64)> = labels.iter().copied().zip(probs.iter().copied()).filter(|(_, p)| *p > 0.0).collect();
            atoms.sort_by(|x, y| x.0.total_cmp(&y.0));
            let mut acc = 0.0;
            for (label, p) in &atoms {
                acc += p;
                if acc >= level - 1e-12 {
                    return Ok(PivotConstant { c: *label, se: 0.0 });
                }
            }
            Ok(PivotConstant { c: atoms.last().map_or(1.0, |a| a.0), se: 0.0 })
        }
        _ => Ok(monte_carlo_quantile(noise, n, level, seed)),
    }
}

fn support_size(probs: &[f64]) -> usize {
    probs.iter().filter(|p| **p > 0.0).count()
}

fn monte_carlo_quantile(noise: &NoiseSpec, n: usize, level: f64, seed: &SeedSpec) -> PivotConstant {
    let mut rng = seed.aux_rng(n as u64);
    let mut means: Vec<f64> = (0..PIVOT_DRAWS)
        .map(|_| (0..n).map(|_| noise.sample_scalar(&mut rng)).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let m = means.len();
    let idx = ((level * m as f64).ceil() as usize).clamp(1, m) - 1;
    // ±1 binomial sd of the order-statistic index brackets one quantile SE
    let k = (m as f64 * level * (1.0 - level)).sqrt().ceil() as usize;
    let lo = means[idx.saturating_sub(k)];
    let hi = means[(idx + k).min(m - 1)];
    PivotConstant { c: means[idx], se: 0.5 * (hi - lo) }
}

fn lower_from_pivot(data: &[f64], c: f64) -> Result<f64> {
    if data.iter().any(|y| !(*y > 0.0)) {
        return domain("pivot bound needs strictly positive data");
    }
    Ok(mean(data)? / c)
}

/// Lower bound `ȳ / c` that covers θ′ for a `level` fraction of controls under
/// any prior.
pub fn pivot_bound(data: &[f64], noise: &NoiseSpec, level: f64) -> Result<f64> {
    let pivot = pivot_constant(noise, data.len(), level)?;
    lower_from_pivot(data, pivot.c)
}

/// Constant-risk estimator of a binomial proportion under squared error:
/// `(s + √n/2) / (n + √n)`.
pub fn minimax_binomial_estimate(successes: usize, n: usize) -> Result<f64> {
    if n < 1 || successes > n {
        return domain(format!("need 0 <= successes <= n and n >= 1, got ({successes}, {n})"));
    }
    let rn = (n as f64).sqrt();
    Ok((successes as f64 + 0.5 * rn) / (n as f64 + rn))
}
