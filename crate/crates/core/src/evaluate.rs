//! Conditional error over relevant controls, prior-sensitivity bands, the
//! finite-population gain/loss decomposition of matching, and the partial
//! matching analysis of least-squares prediction.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::distmodel::{PriorSpec, Scenario, TargetProblem};
use crate::error::{domain, Error, Result};
use crate::genctl::{ensure_valid, generate_problem, SeedSpec};
use crate::linalg;
use crate::procedures::{IntervalRule, Procedure};
use crate::relevance::{extract_statistic, fmt_tau, MatchSpec, Matcher, StatisticId};

/// Controls per parallel work unit. Chunks are reduced in index order, so a
/// result depends on the seed only, never on the worker count.
const CHUNK: u64 = 4096;

/// Average loss over the accepted controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorReport {
    pub estimate: f64,
    pub mc_se: f64,
    pub accepted: u64,
    pub generated: u64,
    pub acceptance_rate: f64,
}

impl ErrorReport {
    /// Single-object JSON record with exactly the five report fields.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields are plain numbers")
    }
}

/// Running count, sum and centered sum of squares; mergeable.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    n: u64,
    sum: f64,
    mean: f64,
    m2: f64,
}

impl Tally {
    fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn merge(&mut self, o: &Tally) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * self.n as f64 * o.n as f64 / n as f64;
        self.sum += o.sum;
        self.n = n;
    }

    fn report(&self, generated: u64, binary: bool) -> Result<ErrorReport> {
        if self.n == 0 {
            return Err(Error::EmptyRelevantSet { generated });
        }
        let n = self.n as f64;
        let estimate = self.sum / n;
        let mc_se = if binary {
            (estimate * (1.0 - estimate) / n).max(0.0).sqrt()
        } else if self.n > 1 {
            (self.m2 / (n - 1.0)).max(0.0).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Ok(ErrorReport {
            estimate,
            mc_se,
            accepted: self.n,
            generated,
            acceptance_rate: n / generated as f64,
        })
    }
}

fn binary_loss(proc: &Procedure) -> bool {
    matches!(proc, Procedure::Interval(_) | Procedure::Test(_))
}

fn chunk_ranges(count: u64) -> Vec<(u64, u64)> {
    (0..count.div_ceil(CHUNK)).map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(count))).collect()
}

/// Streams `count` controls of `s`, keeps those `m` accepts against
/// `target`, and averages the loss of `proc` over them.
pub fn conditional_error(
    s: &Scenario,
    proc: &Procedure,
    m: &MatchSpec,
    target: &TargetProblem,
    count: u64,
    seed: SeedSpec,
) -> Result<ErrorReport> {
    ensure_valid(s)?;
    if count == 0 {
        return domain("count must be at least 1");
    }
    let bound = proc.bind(s, &seed)?;
    let matcher = Matcher::new(target, m)?;
    let tallies: Vec<Result<Tally>> = chunk_ranges(count)
        .into_par_iter()
        .map(|(lo, hi)| {
            let mut t = Tally::default();
            for i in lo..hi {
                let p = generate_problem(s, &seed, i);
                if matcher.accepts(&p)? {
                    let d = bound.apply(&p.data)?;
                    t.push(bound.loss(&d, &p.truth)?.delta);
                }
            }
            Ok(t)
        })
        .collect();
    let mut total = Tally::default();
    for t in tallies {
        total.merge(&t?);
    }
    total.report(count, binary_loss(proc))
}

/// One τ row of a band: extremes over the prior family among the cells that
/// accepted at least one control.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub tau: f64,
    pub err_min: Option<f64>,
    pub err_max: Option<f64>,
    /// Error under the first family member.
    pub err_nominal: Option<f64>,
    /// Largest Monte Carlo standard error among the row's cells.
    pub mc_se: Option<f64>,
    /// Fewest accepted controls among the row's cells (0 if any is empty).
    pub accepted_min: u64,
}

/// Conditional error as a function of τ, bracketed over a prior family.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityBand {
    pub tau_grid: Vec<f64>,
    pub rows: Vec<BandRow>,
    /// `cells[t][j]`: report at `tau_grid[t]` under prior `j`; `None` when no
    /// control was accepted.
    pub cells: Vec<Vec<Option<ErrorReport>>>,
}

pub const BAND_CSV_HEADER: &str = "tau,err_min,err_max,err_nominal,mc_se,accepted_min";

impl SensitivityBand {
    /// CSV with header `tau,err_min,err_max,err_nominal,mc_se,accepted_min`;
    /// missing values are written as `NA`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        let mut out = String::from(BAND_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                fmt_tau(r.tau),
                opt(r.err_min),
                opt(r.err_max),
                opt(r.err_nominal),
                opt(r.mc_se),
                r.accepted_min
            );
        }
        out
    }

    /// True when no cell accepted any control.
    pub fn all_empty(&self) -> bool {
        self.cells.iter().flatten().all(Option::is_none)
    }

    pub fn width(&self, t: usize) -> Option<f64> {
        Some(self.rows[t].err_max? - self.rows[t].err_min?)
    }
}

/// Conditional error of `proc` at every τ of `tau_grid` for every prior of
/// `prior_family`, matching on `statistic` with its default metric. Each prior
/// is one pass over `count` controls; all priors share the seed.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_band(
    s_template: &Scenario,
    proc: &Procedure,
    statistic: &StatisticId,
    tau_grid: &[f64],
    prior_family: &[PriorSpec],
    target: &TargetProblem,
    count: u64,
    seed: SeedSpec,
) -> Result<SensitivityBand> {
    if prior_family.is_empty() {
        return domain("prior family must be nonempty");
    }
    if tau_grid.is_empty() {
        return domain("tau grid must be nonempty");
    }
    if let Some(t) = tau_grid.iter().find(|t| t.is_nan() || **t < 0.0) {
        return domain(format!("tolerances must be non-negative, got {t}"));
    }
    if count == 0 {
        return domain("count must be at least 1");
    }
    let scenarios: Vec<Scenario> = prior_family.iter().map(|p| s_template.with_prior(p.clone())).collect();
    for sc in &scenarios {
        ensure_valid(sc)?;
    }
    let tau_max = tau_grid.iter().copied().fold(0.0, f64::max);
    let spec = MatchSpec::within(statistic.clone(), tau_max);
    let matcher = Matcher::new(target, &spec)?;
    let binary = binary_loss(proc);

    let mut per_prior: Vec<Vec<Option<ErrorReport>>> = Vec::with_capacity(scenarios.len());
    for sc in &scenarios {
        let bound = proc.bind(sc, &seed)?;
        let chunks: Vec<Result<Vec<Tally>>> = chunk_ranges(count)
            .into_par_iter()
            .map(|(lo, hi)| {
                let mut ts = vec![Tally::default(); tau_grid.len()];
                for i in lo..hi {
                    let p = generate_problem(sc, &seed, i);
                    let v = extract_statistic(&p, statistic)?;
                    if !matcher.accepts_value(&v, tau_max)? {
                        continue;
                    }
                    let d = bound.apply(&p.data)?;
                    let delta = bound.loss(&d, &p.truth)?.delta;
                    for (t, tau) in ts.iter_mut().zip(tau_grid) {
                        if matcher.accepts_value(&v, *tau)? {
                            t.push(delta);
                        }
                    }
                }
                Ok(ts)
            })
            .collect();
        let mut total = vec![Tally::default(); tau_grid.len()];
        for c in chunks {
            for (t, x) in total.iter_mut().zip(c?) {
                t.merge(&x);
            }
        }
        per_prior.push(total.iter().map(|t| t.report(count, binary).ok()).collect());
    }

    let cells: Vec<Vec<Option<ErrorReport>>> =
        (0..tau_grid.len()).map(|t| per_prior.iter().map(|col| col[t]).collect()).collect();
    let rows = tau_grid
        .iter()
        .zip(&cells)
        .map(|(tau, row)| {
            let present: Vec<&ErrorReport> = row.iter().flatten().collect();
            let fold = |f: fn(f64, f64) -> f64| present.iter().map(|r| r.estimate).reduce(f);
            BandRow {
                tau: *tau,
                err_min: fold(f64::min),
                err_max: fold(f64::max),
                err_nominal: row[0].map(|r| r.estimate),
                mc_se: present.iter().map(|r| r.mc_se).reduce(f64::max),
                accepted_min: row.iter().map(|r| r.map_or(0, |r| r.accepted)).min().unwrap_or(0),
            }
        })
        .collect();
    Ok(SensitivityBand { tau_grid: tau_grid.to_vec(), rows, cells })
}

/// A record of a finite population: covariate labels ordered by importance,
/// and the outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub covariates: Vec<u32>,
    pub outcome: f64,
}

/// A finite population. The level-`r` subgroup of a record is the set of
/// records sharing its first `r` covariates; level 0 is the whole population.
#[derive(Debug, Clone, PartialEq)]
pub struct FinitePopulation {
    records: Vec<Record>,
    depth: usize,
}

impl FinitePopulation {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let Some(first) = records.first() else {
            return domain("population must be nonempty");
        };
        let depth = first.covariates.len();
        if let Some(i) = records.iter().position(|r| r.covariates.len() != depth) {
            return domain(format!("record {i} has {} covariates, expected {depth}", records[i].covariates.len()));
        }
        if let Some(i) = records.iter().position(|r| !r.outcome.is_finite()) {
            return domain(format!("record {i} has a non-finite outcome"));
        }
        Ok(FinitePopulation { records, depth })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Number of covariates R; levels run from 0 to R.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn check_level(&self, r: usize) -> Result<()> {
        if r > self.depth {
            return domain(format!("level {r} exceeds the {} available covariates", self.depth));
        }
        Ok(())
    }

    /// Per-record mean of its level-`r` subgroup, μ_x⃗₍r₎.
    pub fn subgroup_means(&self, r: usize) -> Result<Vec<f64>> {
        self.check_level(r)?;
        let all: Vec<usize> = (0..self.records.len()).collect();
        let sums = group_sums(&self.records, &all, r);
        Ok(self
            .records
            .iter()
            .map(|rec| {
                let (s, c) = sums[&rec.covariates[..r]];
                s / c as f64
            })
            .collect())
    }

    fn mean(&self) -> f64 {
        self.records.iter().map(|r| r.outcome).sum::<f64>() / self.records.len() as f64
    }
}

fn group_sums<'a>(records: &'a [Record], members: &[usize], r: usize) -> HashMap<&'a [u32], (f64, usize)> {
    let mut sums: HashMap<&[u32], (f64, usize)> = HashMap::new();
    for &i in members {
        let e = sums.entry(&records[i].covariates[..r]).or_insert((0.0, 0));
        e.0 += records[i].outcome;
        e.1 += 1;
    }
    sums
}

/// Ave_Ω[(μ_x⃗₍r₎ − μ)²], the reduction in mean squared error from predicting
/// with level-`r` subgroup means instead of the population mean.
pub fn anova_gain(pop: &FinitePopulation, r: usize) -> Result<f64> {
    let mu = pop.mean();
    let means = pop.subgroup_means(r)?;
    Ok(means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / pop.len() as f64)
}

/// The two sides of the ANOVA identity: `(Ave[(y − μ)²], Ave[(y − μ_x⃗₍r₎)²])`.
/// Their difference equals [`anova_gain`] because the cross term averages to 0.
pub fn anova_sides(pop: &FinitePopulation, r: usize) -> Result<(f64, f64)> {
    let mu = pop.mean();
    let means = pop.subgroup_means(r)?;
    let n = pop.len() as f64;
    let total = pop.records.iter().map(|rec| (rec.outcome - mu).powi(2)).sum::<f64>() / n;
    let within = pop.records.iter().zip(&means).map(|(rec, m)| (rec.outcome - m).powi(2)).sum::<f64>() / n;
    Ok((total, within))
}

/// Gain in relevance against loss in robustness from matching on one more
/// covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tradeoff {
    pub gain: f64,
    pub loss: f64,
    /// `gain − loss`; positive when the extra covariate is worth matching on.
    pub net: f64,
    /// Monte Carlo standard error of `loss` across replications.
    pub loss_se: f64,
    /// Replications in which some record's subgroup was absent from the trial
    /// and a coarser-level mean stood in.
    pub flagged: u64,
}

/// Estimates the matching tradeoff between levels `r` and `r + 1` by drawing
/// `replications` trials of `trial_size` records without replacement.
///
/// A record whose subgroup has no member in a trial is predicted by the mean
/// of the finest coarser subgroup that does, and the replication is flagged.
pub fn tradeoff_estimate(
    pop: &FinitePopulation,
    trial_size: usize,
    r: usize,
    replications: u64,
    seed: SeedSpec,
) -> Result<Tradeoff> {
    if r + 1 > pop.depth() {
        return domain(format!("level {} exceeds the {} available covariates", r + 1, pop.depth()));
    }
    if trial_size == 0 || trial_size > pop.len() {
        return domain(format!("trial size must lie in 1..={}, got {trial_size}", pop.len()));
    }
    if replications == 0 {
        return domain("replications must be at least 1");
    }
    let coarse = pop.subgroup_means(r)?;
    let fine = pop.subgroup_means(r + 1)?;
    let n = pop.len() as f64;
    let gain = coarse.iter().zip(&fine).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;

    let per_rep: Vec<(f64, bool)> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = seed.problem_rng(rep);
            let trial = index::sample(&mut rng, pop.len(), trial_size).into_vec();
            let sums: Vec<_> = (0..=r + 1).map(|l| group_sums(&pop.records, &trial, l)).collect();
            let mut flagged = false;
            let mut estimate = |rec: &Record, level: usize| {
                for l in (0..=level).rev() {
                    if let Some((s, c)) = sums[l].get(&rec.covariates[..l]) {
                        return s / *c as f64;
                    }
                    flagged = true;
                }
                unreachable!("the level-0 group of a nonempty trial is nonempty")
            };
            let mut diff = 0.0;
            for (i, rec) in pop.records.iter().enumerate() {
                let ef = estimate(rec, r + 1) - fine[i];
                let ec = estimate(rec, r) - coarse[i];
                diff += ef * ef - ec * ec;
            }
            (diff / n, flagged)
        })
        .collect();

    let mut t = Tally::default();
    for (x, _) in &per_rep {
        t.push(*x);
    }
    let loss = t.sum / t.n as f64;
    let loss_se = if t.n > 1 { (t.m2 / (t.n - 1) as f64).sqrt() / (t.n as f64).sqrt() } else { 0.0 };
    let flagged = per_rep.iter().filter(|(_, f)| *f).count() as u64;
    Ok(Tradeoff { gain, loss, net: gain - loss, loss_se, flagged })
}

/// Leverage `x0ᵀ(XᵀX)⁻¹x0`.
pub fn leverage(design: &DMatrix<f64>, x0: &DVector<f64>) -> Result<f64> {
    if x0.len() != design.ncols() {
        return domain(format!("x0 has length {}, design has {} columns", x0.len(), design.ncols()));
    }
    let chol = linalg::gram_cholesky(design)?;
    Ok(x0.dot(&chol.solve(x0)))
}

/// Samples of the partial-matching decomposition
/// `x0ᵀ(β̂′ − β′) = (1 − h0)·B′ + h0·F′`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialMatchReport {
    pub h0: f64,
    /// `B′ = x0ᵀ(β̂ − β′)`, the complete-matching (posterior) error.
    pub b: Vec<f64>,
    /// `F′ = x0ᵀ(β̂′ − β′) + (Δ1 − Δ1′)`, free of the prior.
    pub f: Vec<f64>,
    /// `x0ᵀ(β̂′ − β′) − (1 − h0)B′ − h0F′` per draw.
    pub identity_residuals: Vec<f64>,
}

/// Simulates controls that match the observed `outcomes` everywhere except
/// the first record, for `y = Xβ + ε` with standard normal errors and the
/// coefficients iid from a Gaussian `prior`. The first design row must equal
/// `x0`.
///
/// Conditioning on `y2..yn` is exact: β′ is drawn from its Gaussian
/// posterior given those rows, then `y1′ = x0ᵀβ′ + ε1′`.
pub fn partial_match_decomposition(
    design: &DMatrix<f64>,
    x0: &DVector<f64>,
    outcomes: &DVector<f64>,
    prior: &PriorSpec,
    count: usize,
    seed: SeedSpec,
) -> Result<PartialMatchReport> {
    let PriorSpec::Gaussian { mean, sd } = *prior else {
        return domain(format!("partial matching needs a Gaussian coefficient prior, got {prior}"));
    };
    if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
        return domain(format!("invalid Gaussian prior {prior}"));
    }
    let (n, k) = design.shape();
    if outcomes.len() != n {
        return domain(format!("{} outcomes for a design with {n} rows", outcomes.len()));
    }
    if x0.len() != k {
        return domain(format!("x0 has length {}, design has {k} columns", x0.len()));
    }
    let first = design.row(0).transpose();
    let scale = first.amax().max(x0.amax()).max(1.0);
    if (first - x0).amax() > 1e-12 * scale {
        return Err(Error::Precondition("x0 must equal the first design row".into()));
    }
    let chol = linalg::gram_cholesky(design)?;
    let h0 = x0.dot(&chol.solve(x0));
    let beta_hat = chol.solve(&(design.transpose() * outcomes));
    let delta1 = x0.dot(&beta_hat) - outcomes[0];

    // posterior of β given rows 2..n: precision I/sd² + X₋₁ᵀX₋₁
    let rest = design.rows(1, n - 1);
    let prior_prec = 1.0 / (sd * sd);
    let precision = DMatrix::<f64>::identity(k, k) * prior_prec + rest.transpose() * rest;
    let post = precision.cholesky().ok_or_else(|| Error::Domain("posterior precision not positive definite".into()))?;
    let rhs = DVector::from_element(k, mean * prior_prec) + rest.transpose() * outcomes.rows(1, n - 1);
    let post_mean = post.solve(&rhs);
    let l = post.l();

    // influence of y1 on β̂: (XᵀX)⁻¹x1
    let influence = chol.solve(x0);
    let draws: Vec<(f64, f64, f64)> = (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.problem_rng(i);
            let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut rng));
            // Lᵀ u = z gives u with covariance precision⁻¹
            let u = l.transpose().solve_upper_triangular(&z).expect("cholesky factor is invertible");
            let beta = &post_mean + u;
            let eps1: f64 = StandardNormal.sample(&mut rng);
            let y1 = x0.dot(&beta) + eps1;
            let beta_hat_c = &beta_hat + &influence * (y1 - outcomes[0]);
            let lhs = x0.dot(&(&beta_hat_c - &beta));
            let delta1_c = x0.dot(&beta_hat_c) - y1;
            let b = x0.dot(&(&beta_hat - &beta));
            let f = lhs + (delta1 - delta1_c);
            (b, f, lhs - (1.0 - h0) * b - h0 * f)
        })
        .collect();
    Ok(PartialMatchReport {
        h0,
        b: draws.iter().map(|d| d.0).collect(),
        f: draws.iter().map(|d| d.1).collect(),
        identity_residuals: draws.iter().map(|d| d.2).collect(),
    })
}

/// Conditional coverage of `proc` for each of several lab-assignment patterns,
/// a convenience for two-lab ancillarity studies.
pub fn coverage_by_labs(
    s: &Scenario,
    level: f64,
    patterns: &[Vec<u8>],
    count: u64,
    seed: SeedSpec,
) -> Result<Vec<ErrorReport>> {
    let proc = Procedure::Interval(IntervalRule::ZInterval { level });
    patterns
        .iter()
        .map(|labs| {
            let target = TargetProblem::new(crate::distmodel::DataValue::Measurements {
                values: vec![0.0; labs.len()],
                labs: Some(labs.clone()),
            });
            conditional_error(s, &proc, &MatchSpec::exact(StatisticId::LabAssignment), &target, count, seed)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distmodel::{DataValue, NoiseSpec, StructuralModel};
    use crate::procedures::TestRule;

    fn two_sample_ks(a: &[f64], b: &[f64]) -> f64 {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    fn pvalue_scenario(w: f64) -> Scenario {
        Scenario::new(
            PriorSpec::two_point(0.0, 1.0, w),
            NoiseSpec::BetaPValue { a: 0.02, b: 1.35 },
            StructuralModel::PValueChannel,
            1,
        )
    }

    #[test]
    fn report_json_has_exactly_five_fields() {
        let r = ErrorReport { estimate: 0.1, mc_se: 0.01, accepted: 10, generated: 20, acceptance_rate: 0.5 };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 5);
        for k in ["estimate", "mc_se", "accepted", "generated", "acceptance_rate"] {
            assert!(obj.contains_key(k), "{k}");
        }
    }

    #[test]
    fn unconditional_pvalue_test_error_is_five_percent() {
        let proc = Procedure::Test(TestRule::PThresholdTest { alpha: 0.05 });
        let target = TargetProblem::new(DataValue::PValue(0.049));
        let r = conditional_error(&pvalue_scenario(0.5), &proc, &MatchSpec::all(), &target, 200_000, SeedSpec::new(3, 0))
            .unwrap();
        assert_eq!(r.accepted, 200_000);
        assert!((r.estimate - 0.05).abs() < 3.0 * r.mc_se, "{r:?}");
    }

    #[test]
    fn result_does_not_depend_on_worker_count() {
        let proc = Procedure::Test(TestRule::PThresholdTest { alpha: 0.05 });
        let target = TargetProblem::new(DataValue::PValue(0.049));
        let m = MatchSpec::within(StatisticId::AbsLogLR { a: 0.02, b: 1.35 }, 0.5);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
                conditional_error(&pvalue_scenario(0.5), &proc, &m, &target, 50_000, SeedSpec::new(9, 0)).unwrap()
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn empty_relevant_set_is_an_error_not_zero() {
        let proc = Procedure::Test(TestRule::DiagnosticPredict);
        let s = Scenario::new(
            PriorSpec::PointMass(0.0),
            NoiseSpec::BernoulliChannel { sensitivity: 0.9, specificity: 1.0 },
            StructuralModel::DiagnosticTest,
            1,
        );
        let target = TargetProblem::new(DataValue::TestResult(true));
        let err = conditional_error(&s, &proc, &MatchSpec::exact(StatisticId::TestResult), &target, 1000, SeedSpec::new(1, 0));
        assert_eq!(err, Err(Error::EmptyRelevantSet { generated: 1000 }));
    }

    #[test]
    fn band_is_bracketed_and_csv_is_well_formed() {
        let proc = Procedure::Test(TestRule::PThresholdTest { alpha: 0.05 });
        let target = TargetProblem::new(DataValue::PValue(0.049));
        let family: Vec<PriorSpec> = [0.5, 0.0, 1.0].iter().map(|w| PriorSpec::two_point(0.0, 1.0, *w)).collect();
        let band = sensitivity_band(
            &pvalue_scenario(0.5),
            &proc,
            &StatisticId::AbsLogLR { a: 0.02, b: 1.35 },
            &[f64::INFINITY, 0.5, 0.0],
            &family,
            &target,
            20_000,
            SeedSpec::new(5, 0),
        )
        .unwrap();
        let csv = band.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], BAND_CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("inf,"));
        // τ = 0 on a continuous statistic starves every cell
        assert!(lines[3].ends_with(",NA,NA,NA,NA,0"), "{}", lines[3]);
        for r in &band.rows[..2] {
            let (lo, hi, nom) = (r.err_min.unwrap(), r.err_max.unwrap(), r.err_nominal.unwrap());
            assert!(lo <= nom && nom <= hi);
        }
    }

    #[test]
    fn anova_examples() {
        let rec = |g: u32, y: f64| Record { covariates: vec![g], outcome: y };
        let flat = FinitePopulation::new(vec![rec(0, 1.0), rec(0, 3.0), rec(1, 2.0), rec(1, 2.0)]).unwrap();
        assert_eq!(anova_gain(&flat, 1).unwrap(), 0.0);
        let split = FinitePopulation::new(vec![rec(0, 0.0), rec(0, 0.0), rec(1, 1.0), rec(1, 1.0)]).unwrap();
        assert!((anova_gain(&split, 1).unwrap() - 0.25).abs() < 1e-15);
        let (total, within) = anova_sides(&split, 1).unwrap();
        assert!((total - within - 0.25).abs() < 1e-15);
        assert!(anova_gain(&split, 2).is_err());
    }

    #[test]
    fn full_trials_lose_nothing() {
        let recs = (0..40).map(|i| Record { covariates: vec![i % 3, i % 2], outcome: (i as f64).sin() }).collect();
        let pop = FinitePopulation::new(recs).unwrap();
        let t = tradeoff_estimate(&pop, 40, 0, 20, SeedSpec::new(1, 0)).unwrap();
        assert!(t.loss.abs() < 1e-12, "{t:?}");
        assert_eq!(t.flagged, 0);
    }

    #[test]
    fn leverage_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!((leverage(&eye, &DVector::from_vec(vec![1.0, 0.0])).unwrap() - 1.0).abs() < 1e-15);
        let ones = DMatrix::from_element(7, 1, 1.0);
        assert!((leverage(&ones, &DVector::from_element(1, 1.0)).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(leverage(&bad, &DVector::from_vec(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn partial_matching_needs_x0_as_first_row() {
        let x = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let r = partial_match_decomposition(&x, &DVector::from_element(1, 2.0), &y, &PriorSpec::gaussian(0.0, 1.0), 10, SeedSpec::new(1, 0));
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn single_observation_puts_all_weight_on_f() {
        let x = DMatrix::from_element(1, 1, 2.0);
        let y = DVector::from_element(1, 1.0);
        let r = partial_match_decomposition(&x, &DVector::from_element(1, 2.0), &y, &PriorSpec::gaussian(0.0, 1.0), 100, SeedSpec::new(1, 0))
            .unwrap();
        assert!((r.h0 - 1.0).abs() < 1e-15);
        assert!(r.identity_residuals.iter().all(|e| e.abs() < 1e-9));
    }

    #[test]
    fn f_is_prior_free_and_b_is_not() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.5, 1.0, -1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let x0 = x.row(0).transpose();
        let y = DVector::from_vec(vec![4.0, 1.0, 3.0, 5.0, 7.0]);
        let a = partial_match_decomposition(&x, &x0, &y, &PriorSpec::gaussian(0.0, 1.0), 10_000, SeedSpec::new(1, 0)).unwrap();
        let b = partial_match_decomposition(&x, &x0, &y, &PriorSpec::gaussian(5.0, 10.0), 10_000, SeedSpec::new(2, 0)).unwrap();
        let crit = 1.628 * (2.0 / 10_000f64).sqrt();
        assert!(two_sample_ks(&a.f, &b.f) < crit);
        assert!(two_sample_ks(&a.b, &b.b) > crit);
    }
}
