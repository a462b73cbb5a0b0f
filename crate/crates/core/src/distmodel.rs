//! Declarative descriptions of priors, noise laws, structural models and the
//! problems they generate.
//!
//! Everything here is an immutable value. Simulation ([`crate::genctl`]),
//! matching ([`crate::relevance`]) and scoring ([`crate::evaluate`]) consume
//! these descriptions and never mutate them. The only interior mutability is
//! the write-once statistic cache on [`ControlProblem`].

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, Open01, StandardNormal};

use crate::linalg;
use crate::relevance::StatisticId;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Law of the parameter θ′ across control problems.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    PointMass(f64),
    /// `value1` with probability `weight1`, otherwise `value0`.
    TwoPoint { value0: f64, value1: f64, weight1: f64 },
    Gaussian { mean: f64, sd: f64 },
    /// Uniform over `points` equally spaced values from `lo` to `hi`
    /// inclusive. A single point sits at the midpoint.
    UniformGrid { lo: f64, hi: f64, points: usize },
    FiniteMixture(Vec<(PriorSpec, f64)>),
}

impl PriorSpec {
    pub fn two_point(value0: f64, value1: f64, weight1: f64) -> Self {
        PriorSpec::TwoPoint { value0, value1, weight1 }
    }

    pub fn gaussian(mean: f64, sd: f64) -> Self {
        PriorSpec::Gaussian { mean, sd }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_violations(&mut out);
        out
    }

    fn collect_violations(&self, out: &mut Vec<String>) {
        match self {
            PriorSpec::PointMass(v) => {
                if !v.is_finite() {
                    out.push("point mass value must be finite".into());
                }
            }
            PriorSpec::TwoPoint { value0, value1, weight1 } => {
                if !value0.is_finite() || !value1.is_finite() {
                    out.push("two-point values must be finite".into());
                }
                if !is_probability(*weight1) {
                    out.push("two-point weight must lie in [0, 1]".into());
                }
            }
            PriorSpec::Gaussian { mean, sd } => {
                if !mean.is_finite() {
                    out.push("gaussian prior mean must be finite".into());
                }
                if !(sd.is_finite() && *sd > 0.0) {
                    out.push("gaussian prior sd must be positive".into());
                }
            }
            PriorSpec::UniformGrid { lo, hi, points } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    out.push("uniform grid requires lo < hi".into());
                }
                if *points < 1 {
                    out.push("uniform grid requires at least one point".into());
                }
            }
            PriorSpec::FiniteMixture(components) => {
                if components.is_empty() {
                    out.push("mixture requires at least one component".into());
                }
                let mut total = 0.0;
                for (component, weight) in components {
                    if !is_probability(*weight) {
                        out.push("mixture weight must lie in [0, 1]".into());
                    }
                    total += weight;
                    component.collect_violations(out);
                }
                if !components.is_empty() && (total - 1.0).abs() > WEIGHT_SUM_TOL {
                    out.push(format!("mixture weights must sum to 1 (got {total})"));
                }
            }
        }
    }

    /// Atoms of a discrete prior, or `None` for a continuous one.
    pub fn atoms(&self) -> Option<Vec<f64>> {
        match self {
            PriorSpec::PointMass(v) => Some(vec![*v]),
            PriorSpec::TwoPoint { value0, value1, weight1 } => Some(match *weight1 {
                w if w <= 0.0 => vec![*value0],
                w if w >= 1.0 => vec![*value1],
                _ => vec![*value0, *value1],
            }),
            PriorSpec::Gaussian { .. } => None,
            PriorSpec::UniformGrid { .. } => Some(self.grid_points()),
            PriorSpec::FiniteMixture(components) => {
                let mut all = Vec::new();
                for (c, w) in components {
                    if *w > 0.0 {
                        all.extend(c.atoms()?);
                    }
                }
                Some(all)
            }
        }
    }

    fn grid_points(&self) -> Vec<f64> {
        match *self {
            PriorSpec::UniformGrid { lo, hi, points } if points == 1 => vec![0.5 * (lo + hi)],
            PriorSpec::UniformGrid { lo, hi, points } => {
                let step = (hi - lo) / (points - 1) as f64;
                (0..points).map(|i| lo + step * i as f64).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            PriorSpec::PointMass(v) => *v,
            PriorSpec::TwoPoint { value0, value1, weight1 } => {
                if rng.random::<f64>() < *weight1 {
                    *value1
                } else {
                    *value0
                }
            }
            PriorSpec::Gaussian { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            PriorSpec::UniformGrid { lo, hi, points } => {
                if *points == 1 {
                    return 0.5 * (lo + hi);
                }
                let i = rng.random_range(0..*points);
                lo + (hi - lo) / (*points - 1) as f64 * i as f64
            }
            PriorSpec::FiniteMixture(components) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (component, weight) in components {
                    acc += weight;
                    if u < acc {
                        return component.sample(rng);
                    }
                }
                // weights sum to 1 within 1e-12; u landed in the rounding gap
                components
                    .iter()
                    .rev()
                    .find(|(_, w)| *w > 0.0)
                    .map(|(c, _)| c.sample(rng))
                    .unwrap_or(f64::NAN)
            }
        }
    }

    /// Draws from the prior restricted to (0, ∞) by rejection.
    pub fn sample_positive<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let v = self.sample(rng);
            if v > 0.0 {
                return v;
            }
        }
    }
}

impl fmt::Display for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorSpec::PointMass(v) => write!(f, "point_mass({v})"),
            PriorSpec::TwoPoint { value0, value1, weight1 } => {
                write!(f, "two_point({value0}, {value1}, {weight1})")
            }
            PriorSpec::Gaussian { mean, sd } => write!(f, "gaussian({mean}, {sd})"),
            PriorSpec::UniformGrid { lo, hi, points } => {
                write!(f, "uniform_grid({lo}, {hi}, {points})")
            }
            PriorSpec::FiniteMixture(components) => {
                write!(f, "mixture(")?;
                for (i, (c, w)) in components.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "[{c}, {w}]")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// Law of the per-observation noise ε′.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    StdNormal,
    UnitMeanExponential,
    /// `exp(σZ − σ²/2)`, mean exactly 1.
    UnitMeanLogNormal { sigma: f64 },
    /// Law of the p-value under the alternative; the null p-value is uniform.
    BetaPValue { a: f64, b: f64 },
    BernoulliChannel { sensitivity: f64, specificity: f64 },
    /// Each measurement goes to lab 1 with probability `prob_lab1`, else lab 2,
    /// and carries Gaussian error with that lab's sd.
    TwoLabMixture { sd_lab1: f64, sd_lab2: f64, prob_lab1: f64 },
    /// Discrete noise on real-valued labels.
    Categorical { labels: Vec<f64>, probs: Vec<f64> },
}

impl NoiseSpec {
    /// Discretized standard normal on the grid `-half_width..=half_width` with
    /// spacing `step`, probabilities proportional to the normal density.
    pub fn discretized_normal(step: f64, half_width: f64) -> Self {
        let k = (half_width / step).round() as i64;
        let labels: Vec<f64> = (-k..=k).map(|i| i as f64 * step).collect();
        let dens: Vec<f64> = labels.iter().map(|x| (-0.5 * x * x).exp()).collect();
        let total: f64 = dens.iter().sum();
        let probs = dens.iter().map(|d| d / total).collect();
        NoiseSpec::Categorical { labels, probs }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            NoiseSpec::StdNormal | NoiseSpec::UnitMeanExponential => {}
            NoiseSpec::UnitMeanLogNormal { sigma } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    out.push("log-normal sigma must be positive".into());
                }
            }
            NoiseSpec::BetaPValue { a, b } => {
                if !(a.is_finite() && *a > 0.0 && b.is_finite() && *b > 0.0) {
                    out.push("beta p-value parameters must be positive".into());
                }
            }
            NoiseSpec::BernoulliChannel { sensitivity, specificity } => {
                if !is_probability(*sensitivity) {
                    out.push("sensitivity must lie in [0, 1]".into());
                }
                if !is_probability(*specificity) {
                    out.push("specificity must lie in [0, 1]".into());
                }
            }
            NoiseSpec::TwoLabMixture { sd_lab1, sd_lab2, prob_lab1 } => {
                if !(*sd_lab1 > 0.0 && *sd_lab2 > 0.0) {
                    out.push("lab sds must be positive".into());
                }
                if !is_probability(*prob_lab1) {
                    out.push("lab-1 probability must lie in [0, 1]".into());
                }
            }
            NoiseSpec::Categorical { labels, probs } => {
                if labels.is_empty() {
                    out.push("categorical noise requires at least one label".into());
                }
                if labels.len() != probs.len() {
                    out.push("categorical labels and probabilities must have equal length".into());
                }
                if labels.iter().any(|l| !l.is_finite()) {
                    out.push("categorical labels must be finite".into());
                }
                if probs.iter().any(|p| !is_probability(*p)) {
                    out.push("categorical probabilities must lie in [0, 1]".into());
                }
                let total: f64 = probs.iter().sum();
                if !probs.is_empty() && (total - 1.0).abs() > WEIGHT_SUM_TOL {
                    out.push(format!("categorical probabilities must sum to 1 (got {total})"));
                }
            }
        }
        out
    }

    /// Analytic mean of a real-valued noise draw, where one is defined.
    pub fn analytic_mean(&self) -> Option<f64> {
        match self {
            NoiseSpec::StdNormal | NoiseSpec::TwoLabMixture { .. } => Some(0.0),
            NoiseSpec::UnitMeanExponential | NoiseSpec::UnitMeanLogNormal { .. } => Some(1.0),
            NoiseSpec::Categorical { labels, probs } => {
                Some(labels.iter().zip(probs).map(|(l, p)| l * p).sum())
            }
            NoiseSpec::BetaPValue { .. } | NoiseSpec::BernoulliChannel { .. } => None,
        }
    }

    /// True for laws supported on (0, ∞) with mean 1.
    pub fn is_positive_unit_mean(&self) -> bool {
        match self {
            NoiseSpec::UnitMeanExponential | NoiseSpec::UnitMeanLogNormal { .. } => true,
            NoiseSpec::Categorical { labels, probs } => {
                labels
                    .iter()
                    .zip(probs)
                    .all(|(l, p)| *p == 0.0 || *l > 0.0)
                    && self
                        .analytic_mean()
                        .is_some_and(|m| (m - 1.0).abs() <= 1e-12)
            }
            _ => false,
        }
    }

    /// One real-valued noise draw. Lab mixtures and the p-value/diagnostic
    /// channels are simulated by their structural models instead.
    pub fn sample_scalar<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            NoiseSpec::StdNormal => StandardNormal.sample(rng),
            NoiseSpec::UnitMeanExponential => Exp1.sample(rng),
            NoiseSpec::UnitMeanLogNormal { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (sigma * z - 0.5 * sigma * sigma).exp()
            }
            NoiseSpec::Categorical { labels, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (l, p) in labels.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *l;
                    }
                }
                labels[probs.iter().rposition(|p| *p > 0.0).unwrap_or(labels.len() - 1)]
            }
            NoiseSpec::TwoLabMixture { sd_lab1, sd_lab2, prob_lab1 } => {
                let z: f64 = StandardNormal.sample(rng);
                if rng.random::<f64>() < *prob_lab1 {
                    sd_lab1 * z
                } else {
                    sd_lab2 * z
                }
            }
            NoiseSpec::BetaPValue { a, b } => sample_beta(*a, *b, rng),
            NoiseSpec::BernoulliChannel { sensitivity, .. } => {
                f64::from(u8::from(rng.random::<f64>() < *sensitivity))
            }
        }
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseSpec::StdNormal => write!(f, "std_normal"),
            NoiseSpec::UnitMeanExponential => write!(f, "unit_exponential"),
            NoiseSpec::UnitMeanLogNormal { sigma } => write!(f, "unit_lognormal({sigma})"),
            NoiseSpec::BetaPValue { a, b } => write!(f, "beta_pvalue({a}, {b})"),
            NoiseSpec::BernoulliChannel { sensitivity, specificity } => {
                write!(f, "bernoulli_channel({sensitivity}, {specificity})")
            }
            NoiseSpec::TwoLabMixture { sd_lab1, sd_lab2, prob_lab1 } => {
                write!(f, "two_lab({sd_lab1}, {sd_lab2}, {prob_lab1})")
            }
            NoiseSpec::Categorical { labels, probs } => {
                write!(f, "categorical({}, {})", fmt_list(labels), fmt_list(probs))
            }
        }
    }
}

/// Beta(a, b) draw computed in log space so that tiny shape parameters do not
/// underflow to an exact 0. The result lies strictly inside (0, 1).
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let ln_x = ln_gamma_variate(a, rng);
    let ln_y = ln_gamma_variate(b, rng);
    let m = ln_x.max(ln_y);
    let ln_total = m + ((ln_x - m).exp() + (ln_y - m).exp()).ln();
    let p = (ln_x - ln_total).exp();
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

// ln of a Gamma(shape, 1) variate via Gamma(shape + 1) · U^(1/shape).
fn ln_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    let g: f64 = Gamma::new(shape + 1.0, 1.0)
        .expect("shape validated positive")
        .sample(rng);
    let u: f64 = Open01.sample(rng);
    g.ln() + u.ln() / shape
}

/// The known function g in `y_i = g(θ, ε_i)`.
#[derive(Debug, Clone, PartialEq)]
pub enum StructuralModel {
    Additive,
    Multiplicative,
    /// `y = Xβ + ε`; the truth is the outcome at `target_covariates`.
    LinearRegression { design: DMatrix<f64>, target_covariates: DVector<f64> },
    PValueChannel,
    DiagnosticTest,
    /// Independent two-sample z-statistics per marker with unit noise sd,
    /// selected when the two-sided p-value is at most `selection_threshold`.
    MarkerPanel { n_subjects: usize, n_markers: usize, selection_threshold: f64 },
}

impl StructuralModel {
    /// Standard error of each marker estimate: two equal arms of
    /// `n_subjects / 2` with unit noise sd.
    pub fn marker_std_error(n_subjects: usize) -> f64 {
        2.0 / (n_subjects as f64).sqrt()
    }

    /// Whether the truth of a problem under this model is a 0/1 label.
    pub fn has_binary_truth(&self) -> bool {
        matches!(self, StructuralModel::PValueChannel | StructuralModel::DiagnosticTest)
    }
}

impl fmt::Display for StructuralModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StructuralModel::Additive => write!(f, "additive"),
            StructuralModel::Multiplicative => write!(f, "multiplicative"),
            StructuralModel::LinearRegression { design, target_covariates } => {
                let rows: Vec<String> = design
                    .row_iter()
                    .map(|r| fmt_list(&r.iter().copied().collect::<Vec<_>>()))
                    .collect();
                write!(
                    f,
                    "linear_regression([{}], {})",
                    rows.join(", "),
                    fmt_list(target_covariates.as_slice())
                )
            }
            StructuralModel::PValueChannel => write!(f, "pvalue_channel"),
            StructuralModel::DiagnosticTest => write!(f, "diagnostic_test"),
            StructuralModel::MarkerPanel { n_subjects, n_markers, selection_threshold } => {
                write!(f, "marker_panel({n_subjects}, {n_markers}, {selection_threshold})")
            }
        }
    }
}

/// Complete recipe for simulating control problems.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub prior: PriorSpec,
    pub noise: NoiseSpec,
    pub structure: StructuralModel,
    pub n: usize,
}

impl Scenario {
    pub fn new(prior: PriorSpec, noise: NoiseSpec, structure: StructuralModel, n: usize) -> Self {
        Scenario { prior, noise, structure, n }
    }

    pub fn with_prior(&self, prior: PriorSpec) -> Self {
        Scenario { prior, ..self.clone() }
    }
}

/// Every invariant violation of the scenario, in a fixed order. Empty means
/// valid.
pub fn validate_scenario(s: &Scenario) -> Vec<String> {
    let mut out = s.prior.violations();
    out.extend(s.noise.violations());
    if s.n < 1 {
        out.push("sample size must be at least 1".into());
    }

    match &s.structure {
        StructuralModel::Additive => {
            if matches!(s.noise, NoiseSpec::BetaPValue { .. } | NoiseSpec::BernoulliChannel { .. }) {
                out.push("additive model requires real-valued noise".into());
            }
        }
        StructuralModel::Multiplicative => {
            if !s.noise.is_positive_unit_mean() {
                out.push("multiplicative model requires positive unit-mean noise".into());
            }
            match &s.prior {
                PriorSpec::Gaussian { mean, sd } => {
                    if mean + 5.0 * sd <= 0.0 {
                        out.push("gaussian prior has negligible positive mass".into());
                    }
                }
                p => {
                    if p.atoms().is_some_and(|a| a.iter().any(|v| *v <= 0.0)) {
                        out.push("multiplicative model requires positive prior support".into());
                    }
                }
            }
        }
        StructuralModel::LinearRegression { design, target_covariates } => {
            if !matches!(s.noise, NoiseSpec::StdNormal) {
                out.push("linear regression requires standard normal noise".into());
            }
            if design.nrows() == 0 || design.ncols() == 0 {
                out.push("design must be non-empty".into());
            } else if linalg::rank(design) < design.ncols() {
                out.push("design not full rank".into());
            }
            if target_covariates.len() != design.ncols() {
                out.push("target covariates must have one entry per design column".into());
            }
            if s.n != design.nrows() {
                out.push("sample size must equal the number of design rows".into());
            }
        }
        StructuralModel::PValueChannel => {
            if !matches!(s.noise, NoiseSpec::BetaPValue { .. }) {
                out.push("p-value channel requires beta p-value noise".into());
            }
        }
        StructuralModel::DiagnosticTest => {
            if !matches!(s.noise, NoiseSpec::BernoulliChannel { .. }) {
                out.push("diagnostic test requires a bernoulli channel".into());
            }
        }
        StructuralModel::MarkerPanel { n_subjects, n_markers, selection_threshold } => {
            if !matches!(s.noise, NoiseSpec::StdNormal) {
                out.push("marker panel requires standard normal noise".into());
            }
            if *n_subjects < 2 {
                out.push("marker panel requires at least two subjects".into());
            }
            if *n_markers < 1 {
                out.push("marker panel requires at least one marker".into());
            }
            if !(*selection_threshold > 0.0 && *selection_threshold <= 1.0) {
                out.push("selection threshold must lie in (0, 1]".into());
            }
            if s.n != *n_markers {
                out.push("sample size must equal the number of markers".into());
            }
        }
    }

    if s.structure.has_binary_truth() {
        if s.n != 1 {
            out.push("binary-truth models take a single observation (n = 1)".into());
        }
        let binary = s
            .prior
            .atoms()
            .is_some_and(|a| a.iter().all(|v| *v == 0.0 || *v == 1.0));
        if !binary {
            out.push("binary-truth models require prior support in {0, 1}".into());
        }
    }
    out
}

/// Observed data of a problem; one variant per structural model.
#[derive(Debug, Clone, PartialEq)]
pub enum DataValue {
    /// Additive or multiplicative measurements, with per-measurement lab
    /// labels (1 or 2) when the noise is a two-lab mixture.
    Measurements { values: Vec<f64>, labs: Option<Vec<u8>> },
    PValue(f64),
    /// `true` for a positive test.
    TestResult(bool),
    Regression { outcomes: Vec<f64> },
    MarkerPanel { estimates: Vec<f64>, std_error: f64, selected: BTreeSet<usize> },
}

impl DataValue {
    pub fn measurements(values: Vec<f64>) -> Self {
        DataValue::Measurements { values, labs: None }
    }

    pub fn shape_name(&self) -> &'static str {
        match self {
            DataValue::Measurements { .. } => "measurements",
            DataValue::PValue(_) => "p-value",
            DataValue::TestResult(_) => "test result",
            DataValue::Regression { .. } => "regression outcomes",
            DataValue::MarkerPanel { .. } => "marker panel",
        }
    }

    /// Number of units the data describes.
    pub fn len(&self) -> usize {
        match self {
            DataValue::Measurements { values, .. } => values.len(),
            DataValue::PValue(_) | DataValue::TestResult(_) => 1,
            DataValue::Regression { outcomes } => outcomes.len(),
            DataValue::MarkerPanel { estimates, .. } => estimates.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat real values for delimited dumps.
    pub fn flat_values(&self) -> Vec<f64> {
        match self {
            DataValue::Measurements { values, .. } => values.clone(),
            DataValue::PValue(p) => vec![*p],
            DataValue::TestResult(t) => vec![f64::from(u8::from(*t))],
            DataValue::Regression { outcomes } => outcomes.clone(),
            DataValue::MarkerPanel { estimates, .. } => estimates.clone(),
        }
    }
}

/// θ′: a scalar (including 0/1 labels) or one value per marker.
#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Truth {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Truth::Scalar(v) => Some(*v),
            Truth::Vector(_) => None,
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Truth::Scalar(v) => std::slice::from_ref(v),
            Truth::Vector(v) => v,
        }
    }
}

/// Value of a statistic: a real, a label, or a set of indices.
#[derive(Debug, Clone, PartialEq)]
pub enum StatValue {
    Real(f64),
    Label(String),
    Set(BTreeSet<usize>),
}

impl StatValue {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            StatValue::Real(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for StatValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatValue::Real(v) => write!(f, "{v}"),
            StatValue::Label(l) => write!(f, "{l}"),
            StatValue::Set(s) => {
                let items: Vec<String> = s.iter().map(|i| i.to_string()).collect();
                write!(f, "{{{}}}", items.join(","))
            }
        }
    }
}

/// Write-once cache of derived statistics. Concurrent duplicate computation is
/// allowed; the first stored value wins.
#[derive(Debug, Default)]
pub struct StatCache(Mutex<Vec<(StatisticId, StatValue)>>);

impl StatCache {
    pub fn get(&self, id: &StatisticId) -> Option<StatValue> {
        let guard = self.0.lock().unwrap_or_else(|e| e.into_inner());
        guard.iter().find(|(k, _)| k == id).map(|(_, v)| v.clone())
    }

    /// Stores `value` unless an entry exists; returns the stored entry.
    pub fn insert(&self, id: &StatisticId, value: StatValue) -> StatValue {
        let mut guard = self.0.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((_, v)) = guard.iter().find(|(k, _)| k == id) {
            return v.clone();
        }
        guard.push((id.clone(), value.clone()));
        value
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Clone for StatCache {
    fn clone(&self) -> Self {
        let guard = self.0.lock().unwrap_or_else(|e| e.into_inner());
        StatCache(Mutex::new(guard.clone()))
    }
}

/// A simulated pair (D′, θ′).
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub data: DataValue,
    pub truth: Truth,
    pub stats: StatCache,
}

impl ControlProblem {
    pub fn new(data: DataValue, truth: Truth) -> Self {
        ControlProblem { data, truth, stats: StatCache::default() }
    }
}

impl PartialEq for ControlProblem {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data && self.truth == other.truth
    }
}

/// The problem actually being analysed.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetProblem {
    pub data: DataValue,
    pub known_truth: Option<f64>,
}

impl TargetProblem {
    pub fn new(data: DataValue) -> Self {
        TargetProblem { data, known_truth: None }
    }
}

fn is_probability(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

pub(crate) fn fmt_list(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    format!("[{}]", items.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn additive() -> Scenario {
        Scenario::new(PriorSpec::gaussian(0.0, 1.0), NoiseSpec::StdNormal, StructuralModel::Additive, 5)
    }

    #[test]
    fn canonical_scenario_is_valid() {
        assert!(validate_scenario(&additive()).is_empty());
    }

    #[test]
    fn multiplicative_rejects_signed_noise() {
        let s = Scenario::new(
            PriorSpec::PointMass(1.0),
            NoiseSpec::StdNormal,
            StructuralModel::Multiplicative,
            3,
        );
        assert_eq!(
            validate_scenario(&s),
            vec!["multiplicative model requires positive unit-mean noise".to_string()]
        );
    }

    #[test]
    fn rank_deficient_design_is_reported() {
        let design = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let s = Scenario::new(
            PriorSpec::gaussian(0.0, 1.0),
            NoiseSpec::StdNormal,
            StructuralModel::LinearRegression {
                design,
                target_covariates: DVector::from_vec(vec![1.0, 2.0]),
            },
            3,
        );
        assert_eq!(validate_scenario(&s), vec!["design not full rank".to_string()]);
    }

    #[test]
    fn violations_cover_every_field() {
        let s = Scenario::new(
            PriorSpec::FiniteMixture(vec![
                (PriorSpec::gaussian(0.0, -1.0), 0.7),
                (PriorSpec::PointMass(1.0), 0.7),
            ]),
            NoiseSpec::BetaPValue { a: 0.0, b: 1.0 },
            StructuralModel::PValueChannel,
            1,
        );
        let v = validate_scenario(&s);
        assert!(v.iter().any(|m| m.contains("sd must be positive")));
        assert!(v.iter().any(|m| m.contains("sum to 1")));
        assert!(v.iter().any(|m| m.contains("beta p-value")));
        assert!(v.iter().any(|m| m.contains("{0, 1}")));
    }

    #[test]
    fn diagnostic_needs_channel_noise() {
        let s = Scenario::new(
            PriorSpec::two_point(0.0, 1.0, 0.5),
            NoiseSpec::StdNormal,
            StructuralModel::DiagnosticTest,
            1,
        );
        assert_eq!(validate_scenario(&s), vec!["diagnostic test requires a bernoulli channel"]);
    }

    #[test]
    fn scenarios_compare_by_value() {
        assert_eq!(additive(), additive());
        assert_ne!(additive(), additive().with_prior(PriorSpec::PointMass(0.0)));
    }

    #[test]
    fn unit_mean_noise_has_mean_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        for noise in [
            NoiseSpec::UnitMeanExponential,
            NoiseSpec::UnitMeanLogNormal { sigma: 0.5 },
            NoiseSpec::UnitMeanLogNormal { sigma: 1.2 },
        ] {
            let (mut s, mut ss) = (0.0, 0.0);
            for _ in 0..n {
                let x = noise.sample_scalar(&mut rng);
                s += x;
                ss += x * x;
            }
            let mean = s / n as f64;
            let se = ((ss / n as f64 - mean * mean) / n as f64).sqrt();
            assert!((mean - 1.0).abs() < 5.0 * se, "{noise}: mean {mean} se {se}");
        }
    }

    #[test]
    fn beta_one_one_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| sample_beta(1.0, 1.0, &mut rng)).collect();
        draws.sort_by(f64::total_cmp);
        let d = draws
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let lo = (x - i as f64 / n as f64).abs();
                let hi = ((i + 1) as f64 / n as f64 - x).abs();
                lo.max(hi)
            })
            .fold(0.0, f64::max);
        // 1% critical value of the one-sample KS statistic
        assert!(d < 1.628 / (n as f64).sqrt(), "KS {d}");
    }

    #[test]
    fn tiny_beta_shape_never_hits_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200_000 {
            let p = sample_beta(0.02, 1.35, &mut rng);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn discretized_normal_is_a_valid_law() {
        let noise = NoiseSpec::discretized_normal(0.5, 3.0);
        assert!(noise.violations().is_empty());
        assert!(noise.analytic_mean().unwrap().abs() < 1e-15);
        if let NoiseSpec::Categorical { labels, .. } = noise {
            assert_eq!(labels.len(), 13);
        }
    }

    #[test]
    fn categorical_unit_mean_counts_as_positive() {
        let degenerate = NoiseSpec::Categorical { labels: vec![1.0], probs: vec![1.0] };
        assert!(degenerate.is_positive_unit_mean());
        let signed = NoiseSpec::Categorical { labels: vec![-1.0, 3.0], probs: vec![0.5, 0.5] };
        assert!(!signed.is_positive_unit_mean());
    }

    #[test]
    fn grid_prior_spans_endpoints() {
        let p = PriorSpec::UniformGrid { lo: 0.0, hi: 1.0, points: 5 };
        assert_eq!(p.atoms().unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn cache_is_write_once() {
        let cache = StatCache::default();
        let id = StatisticId::SampleMean;
        assert_eq!(cache.insert(&id, StatValue::Real(1.0)), StatValue::Real(1.0));
        assert_eq!(cache.insert(&id, StatValue::Real(2.0)), StatValue::Real(1.0));
        assert_eq!(cache.get(&id), Some(StatValue::Real(1.0)));
        assert_eq!(cache.len(), 1);
    }
}
