//! Statistics of the data and the relevance predicates that carve the
//! relevant subset out of the simulated controls.

use std::fmt;

use statrs::function::beta::ln_beta;

use crate::distmodel::{ControlProblem, DataValue, StatCache, StatValue, TargetProblem};
use crate::error::{domain, Error, Result};

/// Features of the data that a control can be matched on.
#[derive(Debug, Clone, PartialEq)]
pub enum StatisticId {
    SampleSize,
    SampleMean,
    /// Per-measurement lab labels as a string such as `"2212"`.
    LabAssignment,
    /// `|log LR|` of a p-value, with the alternative p-value law Beta(a, b).
    AbsLogLR { a: f64, b: f64 },
    /// The single measurement (or p-value) itself.
    RawValue,
    SelectedSet,
    TestResult,
    /// Fraction of measurements taken by lab 1.
    CovariateBalance,
}

impl StatisticId {
    /// The metric a match on this statistic uses unless told otherwise.
    pub fn default_metric(&self) -> Metric {
        match self {
            StatisticId::SampleSize
            | StatisticId::LabAssignment
            | StatisticId::SelectedSet
            | StatisticId::TestResult => Metric::ExactEquality,
            StatisticId::AbsLogLR { .. } => Metric::FoldedLogDiff,
            _ => Metric::AbsoluteDiff,
        }
    }
}

impl fmt::Display for StatisticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatisticId::SampleSize => write!(f, "sample_size"),
            StatisticId::SampleMean => write!(f, "sample_mean"),
            StatisticId::LabAssignment => write!(f, "lab_assignment"),
            StatisticId::AbsLogLR { a, b } => write!(f, "abs_log_lr(a={a}, b={b})"),
            StatisticId::RawValue => write!(f, "raw_value"),
            StatisticId::SelectedSet => write!(f, "selected_set"),
            StatisticId::TestResult => write!(f, "test_result"),
            StatisticId::CovariateBalance => write!(f, "covariate_balance"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    AbsoluteDiff,
    /// Distance between magnitudes, `||x| − |y||`; for log-scale statistics
    /// this treats a ratio and its reciprocal alike.
    FoldedLogDiff,
    ExactEquality,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::AbsoluteDiff => "absolute",
            Metric::FoldedLogDiff => "folded_log",
            Metric::ExactEquality => "exact",
        })
    }
}

/// A relevance predicate: accept controls whose statistic lies within
/// `tolerance` of the target's under `metric`. Boundaries are closed.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSpec {
    pub statistic: StatisticId,
    /// Non-negative; `f64::INFINITY` accepts everything.
    pub tolerance: f64,
    pub metric: Metric,
}

impl MatchSpec {
    pub fn new(statistic: StatisticId, tolerance: f64, metric: Metric) -> Self {
        MatchSpec { statistic, tolerance, metric }
    }

    /// Exact match on `statistic`.
    pub fn exact(statistic: StatisticId) -> Self {
        MatchSpec { statistic, tolerance: 0.0, metric: Metric::ExactEquality }
    }

    /// Match with the statistic's default metric.
    pub fn within(statistic: StatisticId, tolerance: f64) -> Self {
        let metric = statistic.default_metric();
        MatchSpec { statistic, tolerance, metric }
    }

    /// Accepts every control.
    pub fn all() -> Self {
        MatchSpec::within(StatisticId::SampleSize, f64::INFINITY)
    }

    pub fn with_tolerance(&self, tolerance: f64) -> Self {
        MatchSpec { tolerance, ..self.clone() }
    }
}

impl fmt::Display for MatchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (metric={}, tau={})", self.statistic, self.metric, fmt_tau(self.tolerance))
    }
}

pub(crate) fn fmt_tau(tau: f64) -> String {
    if tau.is_infinite() {
        "inf".into()
    } else {
        tau.to_string()
    }
}

/// Anything carrying data that statistics can be read from.
pub trait HasData {
    fn data(&self) -> &DataValue;
    fn cache(&self) -> Option<&StatCache> {
        None
    }
}

impl HasData for ControlProblem {
    fn data(&self) -> &DataValue {
        &self.data
    }
    fn cache(&self) -> Option<&StatCache> {
        Some(&self.stats)
    }
}

impl HasData for TargetProblem {
    fn data(&self) -> &DataValue {
        &self.data
    }
}

impl HasData for DataValue {
    fn data(&self) -> &DataValue {
        self
    }
}

/// Reads statistic `id` off a problem, caching it on control problems.
pub fn extract_statistic<P: HasData + ?Sized>(p: &P, id: &StatisticId) -> Result<StatValue> {
    if let Some(cache) = p.cache() {
        if let Some(v) = cache.get(id) {
            return Ok(v);
        }
        let v = compute_statistic(p.data(), id)?;
        return Ok(cache.insert(id, v));
    }
    compute_statistic(p.data(), id)
}

fn shape_error<T>(id: &StatisticId, data: &DataValue) -> Result<T> {
    domain(format!("statistic {id} is undefined for {} data", data.shape_name()))
}

fn compute_statistic(data: &DataValue, id: &StatisticId) -> Result<StatValue> {
    match (id, data) {
        (StatisticId::SampleSize, d) => Ok(StatValue::Real(d.len() as f64)),
        (StatisticId::SampleMean, DataValue::Measurements { values, .. })
        | (StatisticId::SampleMean, DataValue::Regression { outcomes: values }) => {
            if values.is_empty() {
                return domain("sample mean of empty data");
            }
            Ok(StatValue::Real(values.iter().sum::<f64>() / values.len() as f64))
        }
        (StatisticId::LabAssignment, DataValue::Measurements { labs: Some(labs), .. }) => {
            Ok(StatValue::Label(labs.iter().map(|l| char::from(b'0' + l)).collect()))
        }
        (StatisticId::CovariateBalance, DataValue::Measurements { labs: Some(labs), .. }) => {
            if labs.is_empty() {
                return domain("covariate balance of empty data");
            }
            let ones = labs.iter().filter(|l| **l == 1).count();
            Ok(StatValue::Real(ones as f64 / labs.len() as f64))
        }
        (StatisticId::AbsLogLR { a, b }, DataValue::PValue(p)) => {
            Ok(StatValue::Real(LrModel::new(*a, *b)?.ln_lr(*p)?.abs()))
        }
        (StatisticId::RawValue, DataValue::PValue(p)) => Ok(StatValue::Real(*p)),
        (StatisticId::RawValue, DataValue::Measurements { values, .. }) if values.len() == 1 => {
            Ok(StatValue::Real(values[0]))
        }
        (StatisticId::SelectedSet, DataValue::MarkerPanel { selected, .. }) => {
            Ok(StatValue::Set(selected.clone()))
        }
        (StatisticId::TestResult, DataValue::TestResult(t)) => {
            Ok(StatValue::Label(if *t { "positive" } else { "negative" }.into()))
        }
        (id, d) => shape_error(id, d),
    }
}

/// Likelihood ratio of a p-value: Beta(a, b) density over the uniform null
/// density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrModel {
    a: f64,
    b: f64,
    ln_beta: f64,
}

impl LrModel {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return domain(format!("beta parameters must be positive, got ({a}, {b})"));
        }
        Ok(LrModel { a, b, ln_beta: ln_beta(a, b) })
    }

    pub fn ln_lr(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return domain(format!("likelihood ratio needs 0 < p < 1, got {p}"));
        }
        Ok((self.a - 1.0) * p.ln() + (self.b - 1.0) * (-p).ln_1p() - self.ln_beta)
    }

    // ln LR as a function of t = logit(p), stable at both ends.
    fn ln_lr_logit(&self, t: f64) -> f64 {
        let ln_p = -softplus(-t);
        let ln_q = -softplus(t);
        (self.a - 1.0) * ln_p + (self.b - 1.0) * ln_q - self.ln_beta
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Beta(a, b) density at `p` divided by the uniform density.
pub fn lr(p: f64, a: f64, b: f64) -> Result<f64> {
    Ok(LrModel::new(a, b)?.ln_lr(p)?.exp())
}

/// A closed interval `[lo, hi]` of p-values; an end at exactly 0 or 1 stands
/// for the open limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }
}

// logit range covering every positive double down to the subnormals
const T_EDGE: f64 = 745.0;

/// The p-values whose `|log LR|` lies within `tau` of the observed one, as
/// sorted, pairwise disjoint intervals.
pub fn equal_precision_region(p_obs: f64, tau: f64, a: f64, b: f64) -> Result<Vec<Interval>> {
    let model = LrModel::new(a, b)?;
    let level = model.ln_lr(p_obs)?.abs();
    if tau.is_nan() || tau < 0.0 {
        return domain(format!("tolerance must be non-negative, got {tau}"));
    }
    if tau.is_infinite() || (a == 1.0 && b == 1.0) {
        return Ok(vec![Interval { lo: 0.0, hi: 1.0 }]);
    }

    // ln LR ranges matching |ln LR| ∈ [level − τ, level + τ]
    let inner = (level - tau).max(0.0);
    let outer = level + tau;
    let targets: Vec<(f64, f64)> = if inner == 0.0 {
        vec![(-outer, outer)]
    } else {
        vec![(-outer, -inner), (inner, outer)]
    };

    // ln LR is monotone on each side of its single stationary point
    let mut cuts = vec![-T_EDGE];
    if a != 1.0 && b != 1.0 && (a - 1.0).signum() == (b - 1.0).signum() {
        let p_star = (a - 1.0) / (a + b - 2.0);
        cuts.push((p_star / (1.0 - p_star)).ln());
    }
    cuts.push(T_EDGE);

    let mut pieces = Vec::new();
    for w in cuts.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        for &(u, v) in &targets {
            if let Some((s0, s1)) = preimage(&model, t0, t1, u, v) {
                let lo = if s0 <= -T_EDGE { 0.0 } else { logistic(s0) };
                let hi = if s1 >= T_EDGE { 1.0 } else { logistic(s1) };
                pieces.push(Interval { lo, hi });
            }
        }
    }
    pieces.sort_by(|x, y| x.lo.total_cmp(&y.lo));
    let mut merged: Vec<Interval> = Vec::with_capacity(pieces.len());
    for iv in pieces {
        match merged.last_mut() {
            Some(last) if iv.lo <= last.hi => last.hi = last.hi.max(iv.hi),
            _ => merged.push(iv),
        }
    }
    Ok(merged)
}

/// Solves `{t ∈ [t0, t1] : u ≤ f(t) ≤ v}` for monotone `f` on the piece.
fn preimage(model: &LrModel, t0: f64, t1: f64, u: f64, v: f64) -> Option<(f64, f64)> {
    let f0 = model.ln_lr_logit(t0);
    let f1 = model.ln_lr_logit(t1);
    let increasing = f1 >= f0;
    let (fmin, fmax) = if increasing { (f0, f1) } else { (f1, f0) };
    if v < fmin || u > fmax {
        return None;
    }
    let solve = |c: f64| -> f64 {
        let (mut lo, mut hi) = (t0, t1);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let below = model.ln_lr_logit(mid) < c;
            if below == increasing {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let at_u = if u <= fmin { None } else { Some(solve(u)) };
    let at_v = if v >= fmax { None } else { Some(solve(v)) };
    let (s0, s1) = if increasing {
        (at_u.unwrap_or(t0), at_v.unwrap_or(t1))
    } else {
        (at_v.unwrap_or(t0), at_u.unwrap_or(t1))
    };
    Some((s0, s1))
}

/// Whether two statistic values lie within `tolerance` under `metric`.
/// An infinite tolerance accepts everything, whatever the metric.
fn within(metric: Metric, tolerance: f64, x: &StatValue, y: &StatValue) -> Result<bool> {
    if tolerance.is_infinite() {
        return Ok(true);
    }
    match metric {
        Metric::ExactEquality => Ok(x == y),
        Metric::AbsoluteDiff | Metric::FoldedLogDiff => {
            let (Some(a), Some(b)) = (x.as_real(), y.as_real()) else {
                return domain(format!("metric {metric} needs real-valued statistics"));
            };
            let d = match metric {
                Metric::AbsoluteDiff => (a - b).abs(),
                _ => (a.abs() - b.abs()).abs(),
            };
            Ok(d <= tolerance)
        }
    }
}

/// A relevance predicate with the target's statistic precomputed.
#[derive(Debug, Clone)]
pub struct Matcher {
    spec: MatchSpec,
    target_value: StatValue,
}

impl Matcher {
    pub fn new(target: &TargetProblem, spec: &MatchSpec) -> Result<Self> {
        if spec.tolerance.is_nan() || spec.tolerance < 0.0 {
            return Err(Error::Domain(format!("tolerance must be non-negative, got {}", spec.tolerance)));
        }
        let target_value = extract_statistic(target, &spec.statistic)?;
        Ok(Matcher { spec: spec.clone(), target_value })
    }

    pub fn spec(&self) -> &MatchSpec {
        &self.spec
    }

    pub fn target_value(&self) -> &StatValue {
        &self.target_value
    }

    pub fn accepts<P: HasData + ?Sized>(&self, p: &P) -> Result<bool> {
        let v = extract_statistic(p, &self.spec.statistic)?;
        within(self.spec.metric, self.spec.tolerance, &v, &self.target_value)
    }

    /// Acceptance of an already-extracted statistic value.
    pub fn accepts_value(&self, v: &StatValue, tolerance: f64) -> Result<bool> {
        within(self.spec.metric, tolerance, v, &self.target_value)
    }
}

/// True iff the control's statistic is within tolerance of the target's.
pub fn accept(p: &ControlProblem, target: &TargetProblem, m: &MatchSpec) -> Result<bool> {
    Matcher::new(target, m)?.accepts(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distmodel::Truth;
    use std::collections::BTreeSet;

    fn control(data: DataValue) -> ControlProblem {
        ControlProblem::new(data, Truth::Scalar(0.0))
    }

    #[test]
    fn sample_mean() {
        let v = extract_statistic(&DataValue::measurements(vec![1.0, 2.0, 3.0]), &StatisticId::SampleMean).unwrap();
        assert_eq!(v, StatValue::Real(2.0));
    }

    #[test]
    fn abs_log_lr_at_observed_p() {
        let v = extract_statistic(&DataValue::PValue(0.049), &StatisticId::AbsLogLR { a: 0.02, b: 1.35 })
            .unwrap()
            .as_real()
            .unwrap();
        assert!((v - 0.38f64.ln().abs()).abs() < 0.015, "{v}");
    }

    #[test]
    fn selected_set_passthrough() {
        let data = DataValue::MarkerPanel {
            estimates: vec![0.1, 0.0, 0.9],
            std_error: 0.2,
            selected: BTreeSet::from([3]),
        };
        assert_eq!(
            extract_statistic(&data, &StatisticId::SelectedSet).unwrap(),
            StatValue::Set(BTreeSet::from([3]))
        );
    }

    #[test]
    fn shape_mismatch_names_statistic_and_shape() {
        let err = extract_statistic(&DataValue::TestResult(true), &StatisticId::SampleMean).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sample_mean") && msg.contains("test result"), "{msg}");
    }

    #[test]
    fn control_statistics_are_cached() {
        let c = control(DataValue::measurements(vec![4.0]));
        assert!(c.stats.is_empty());
        extract_statistic(&c, &StatisticId::RawValue).unwrap();
        extract_statistic(&c, &StatisticId::RawValue).unwrap();
        assert_eq!(c.stats.len(), 1);
    }

    #[test]
    fn lr_reproduces_reported_value() {
        assert!((lr(0.049, 0.02, 1.35).unwrap() - 0.38).abs() < 0.005);
    }

    #[test]
    fn lr_uniform_alternative_is_one() {
        for p in [1e-9, 0.01, 0.3, 0.5, 0.999] {
            assert!((lr(p, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn lr_at_half_matches_log_gamma_density() {
        // Beta(0.02, 1.35) density at 0.5 from log-gamma, computed independently
        // (mpmath, 40 digits): 0.031235926730723928
        let v = lr(0.5, 0.02, 1.35).unwrap();
        assert!((v - 0.031_235_926_730_723_928).abs() < 1e-12, "{v}");
    }

    #[test]
    fn lr_boundaries_are_domain_errors() {
        assert!(matches!(lr(0.0, 0.02, 1.35), Err(Error::Domain(_))));
        assert!(matches!(lr(1.0, 0.02, 1.35), Err(Error::Domain(_))));
    }

    #[test]
    fn region_infinite_tau_is_everything() {
        assert_eq!(
            equal_precision_region(0.049, f64::INFINITY, 0.02, 1.35).unwrap(),
            vec![Interval { lo: 0.0, hi: 1.0 }]
        );
    }

    #[test]
    fn region_matches_bisection_oracle() {
        // endpoints from a 400-step bisection in log p at 40-digit precision
        let expected = [
            (0.004_174_564_020_330_594, 0.011_550_893_536_716_082),
            (0.029_630_881_137_091_013, 0.080_635_714_272_242_112),
        ];
        let got = equal_precision_region(0.049, 0.5, 0.02, 1.35).unwrap();
        assert_eq!(got.len(), 2);
        for (iv, (lo, hi)) in got.iter().zip(expected) {
            assert!((iv.lo - lo).abs() < 1e-10 && (iv.hi - hi).abs() < 1e-10, "{iv:?}");
            assert!(iv.length() > 0.0);
        }
    }

    #[test]
    fn region_contains_observation() {
        for tau in [0.0, 0.05, 0.5, 3.0] {
            let r = equal_precision_region(0.049, tau, 0.02, 1.35).unwrap();
            assert!(r.iter().any(|iv| iv.lo <= 0.049 + 1e-12 && 0.049 - 1e-12 <= iv.hi), "tau {tau}");
        }
    }

    #[test]
    fn region_handles_unimodal_alternatives() {
        // Beta(2, 3): ln LR has an interior maximum, so pieces come from both sides
        let r = equal_precision_region(0.2, 0.1, 2.0, 3.0).unwrap();
        let model = LrModel::new(2.0, 3.0).unwrap();
        let level = model.ln_lr(0.2).unwrap().abs();
        for i in 1..2000 {
            let p = i as f64 / 2000.0;
            let inside = (model.ln_lr(p).unwrap().abs() - level).abs() <= 0.1;
            assert_eq!(inside, r.iter().any(|iv| iv.contains(p)), "p {p}");
        }
    }

    #[test]
    fn exact_match_on_sample_size() {
        let target = TargetProblem::new(DataValue::measurements(vec![0.0; 9]));
        let c = control(DataValue::measurements(vec![1.0; 9]));
        assert!(accept(&c, &target, &MatchSpec::exact(StatisticId::SampleSize)).unwrap());
    }

    #[test]
    fn infinite_tolerance_accepts_all() {
        let target = TargetProblem::new(DataValue::PValue(0.049));
        let m = MatchSpec::new(StatisticId::AbsLogLR { a: 0.02, b: 1.35 }, f64::INFINITY, Metric::FoldedLogDiff);
        for p in [1e-12, 0.2, 0.9999] {
            assert!(accept(&control(DataValue::PValue(p)), &target, &m).unwrap());
        }
    }

    #[test]
    fn test_result_mismatch_rejected() {
        let target = TargetProblem::new(DataValue::TestResult(true));
        let c = control(DataValue::TestResult(false));
        assert!(!accept(&c, &target, &MatchSpec::exact(StatisticId::TestResult)).unwrap());
    }

    #[test]
    fn closed_boundary() {
        let target = TargetProblem::new(DataValue::measurements(vec![1.0]));
        let c = control(DataValue::measurements(vec![1.5]));
        let m = MatchSpec::new(StatisticId::RawValue, 0.5, Metric::AbsoluteDiff);
        assert!(accept(&c, &target, &m).unwrap());
    }
}
