//! The line-oriented scenario config format.
//!
//! Each non-blank line not starting with `#` is `key = value`. Values are
//! numbers (`inf` allowed), identifiers, quoted strings, lists `[a, b]`,
//! ranges `lo:hi:step`, or calls `name(arg, key=arg)`:
//!
//! ```text
//! prior = two_point(0, 1, 0.5)
//! noise = beta_pvalue(0.02, 1.35)
//! structure = pvalue_channel
//! n = 1
//! procedure = p_threshold(0.05)
//! match = abs_log_lr(tau=0.5)
//! target = pvalue(0.049)
//! ```

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::distmodel::{validate_scenario, DataValue, NoiseSpec, PriorSpec, Scenario, StructuralModel, TargetProblem};
use crate::error::{Error, Result};
use crate::genctl::select_markers;
use crate::procedures::{IntervalRule, PointLoss, PointRule, Procedure, TestRule};
use crate::relevance::{MatchSpec, Metric, StatisticId};

/// Operations a config can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operation {
    Error,
    Band,
    Anova,
    Tradeoff,
    Partial,
    Patterns,
    Power,
    Winners,
    Minimax,
    EmpiricalBayes,
    Loo,
}

impl Operation {
    pub const ALL: [Operation; 11] = [
        Operation::Error,
        Operation::Band,
        Operation::Anova,
        Operation::Tradeoff,
        Operation::Partial,
        Operation::Patterns,
        Operation::Power,
        Operation::Winners,
        Operation::Minimax,
        Operation::EmpiricalBayes,
        Operation::Loo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Error => "error",
            Operation::Band => "band",
            Operation::Anova => "anova",
            Operation::Tradeoff => "tradeoff",
            Operation::Partial => "partial",
            Operation::Patterns => "patterns",
            Operation::Power => "power",
            Operation::Winners => "winners",
            Operation::Minimax => "minimax",
            Operation::EmpiricalBayes => "eb",
            Operation::Loo => "loo",
        }
    }
}

impl FromStr for Operation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Operation::ALL.into_iter().find(|op| op.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Operation::ALL.iter().map(|o| o.name()).collect();
            format!("unknown operation `{s}` (expected one of {})", names.join(", "))
        })
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything a config file can declare. Scenario parts are kept separately
/// so that operations needing no scenario (patterns, anova) can omit them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSpec {
    pub prior: Option<PriorSpec>,
    pub noise: Option<NoiseSpec>,
    pub structure: Option<StructuralModel>,
    pub n: Option<usize>,
    pub procedure: Option<Procedure>,
    pub matching: Option<MatchSpec>,
    pub target: Option<TargetProblem>,
    /// Prior family for bands; the first member is nominal.
    pub family: Vec<PriorSpec>,
    pub count: Option<u64>,
    pub seed: Option<u64>,
    pub tau_grid: Option<Vec<f64>>,
    pub op: Option<Operation>,
    pub population: Option<PathBuf>,
    pub level: Option<usize>,
    pub trial_size: Option<usize>,
    pub replications: Option<u64>,
    pub sequence: Option<String>,
    pub block_length: Option<usize>,
    pub min_length: Option<usize>,
    pub image: Option<PathBuf>,
    pub resolution: Option<usize>,
    pub outcomes: Option<Vec<f64>>,
    pub theta_grid: Option<Vec<f64>>,
    pub magnitude_floor: Option<f64>,
    pub panel_sizes: Option<Vec<usize>>,
}

const KEYS: [&str; 25] = [
    "prior",
    "noise",
    "structure",
    "n",
    "procedure",
    "match",
    "target",
    "family",
    "count",
    "seed",
    "tau_grid",
    "op",
    "population",
    "level",
    "trial_size",
    "replications",
    "sequence",
    "block_length",
    "min_length",
    "image",
    "resolution",
    "outcomes",
    "theta_grid",
    "magnitude_floor",
    "panel_sizes",
];

impl RunSpec {
    /// The scenario, when all of prior, noise, structure and n are declared.
    pub fn scenario(&self) -> Result<Scenario> {
        let missing = |k: &str| Error::MissingKey(k.into());
        Ok(Scenario::new(
            self.prior.clone().ok_or_else(|| missing("prior"))?,
            self.noise.clone().ok_or_else(|| missing("noise"))?,
            self.structure.clone().ok_or_else(|| missing("structure"))?,
            self.n.ok_or_else(|| missing("n"))?,
        ))
    }

    pub fn has_scenario(&self) -> bool {
        self.prior.is_some() && self.noise.is_some() && self.structure.is_some() && self.n.is_some()
    }

    /// Scenario and procedure violations, without simulating anything.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.has_scenario() {
            if let Ok(s) = self.scenario() {
                out.extend(validate_scenario(&s));
            }
        }
        if let Some(p) = &self.procedure {
            out.extend(p.violations());
        }
        for (i, p) in self.family.iter().enumerate() {
            out.extend(p.violations().into_iter().map(|v| format!("family member {}: {v}", i + 1)));
        }
        out
    }

    pub fn require<T: Clone>(value: &Option<T>, key: &str) -> Result<T> {
        value.clone().ok_or_else(|| Error::MissingKey(key.into()))
    }

    /// Human-readable summary of the resolved declarations and their
    /// validation status.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                let _ = writeln!(out, "{k:<16}{v}");
            }
        };
        line("prior", self.prior.as_ref().map(|v| camel_head(&v.to_string())));
        line("noise", self.noise.as_ref().map(|v| camel_head(&v.to_string())));
        line("structure", self.structure.as_ref().map(|v| camel_head(&v.to_string())));
        line("n", self.n.map(|n| n.to_string()));
        line("procedure", self.procedure.as_ref().map(|v| camel_head(&v.to_string())));
        line("match", self.matching.as_ref().map(ToString::to_string));
        line("target", self.target.as_ref().map(|t| describe_data(&t.data)));
        if !self.family.is_empty() {
            let f: Vec<String> = self.family.iter().map(ToString::to_string).collect();
            line("family", Some(format!("[{}]", f.join(", "))));
        }
        line("op", self.op.map(|o| o.to_string()));
        line("count", self.count.map(|c| c.to_string()));
        line("seed", self.seed.map(|s| s.to_string()));
        line("tau_grid", self.tau_grid.as_ref().map(|g| fmt_grid(g)));
        line("population", self.population.as_ref().map(|p| p.display().to_string()));
        line("level", self.level.map(|v| v.to_string()));
        line("trial_size", self.trial_size.map(|v| v.to_string()));
        line("replications", self.replications.map(|v| v.to_string()));
        line("sequence", self.sequence.clone());
        line("block_length", self.block_length.map(|v| v.to_string()));
        line("min_length", self.min_length.map(|v| v.to_string()));
        line("image", self.image.as_ref().map(|p| p.display().to_string()));
        line("resolution", self.resolution.map(|v| v.to_string()));
        line("outcomes", self.outcomes.as_ref().map(|v| fmt_grid(v)));
        line("theta_grid", self.theta_grid.as_ref().map(|g| fmt_grid(g)));
        line("magnitude_floor", self.magnitude_floor.map(|v| v.to_string()));
        line("panel_sizes", self.panel_sizes.as_ref().map(|v| format!("{v:?}")));
        let violations = self.violations();
        if violations.is_empty() {
            out.push_str("validation      ok\n");
        } else {
            for v in violations {
                let _ = writeln!(out, "violation       {v}");
            }
        }
        out
    }
}

/// `bernoulli_channel(0.9, 0.9)` → `BernoulliChannel(0.9, 0.9)`.
fn camel_head(s: &str) -> String {
    let split = s.find('(').unwrap_or(s.len());
    let (head, rest) = s.split_at(split);
    let camel: String = head
        .split('_')
        .map(|w| {
            let mut c = w.chars();
            c.next().map(|f| f.to_ascii_uppercase().to_string() + c.as_str()).unwrap_or_default()
        })
        .collect();
    camel + rest
}

fn fmt_grid(g: &[f64]) -> String {
    let items: Vec<String> = g.iter().map(|v| v.to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn describe_data(d: &DataValue) -> String {
    match d {
        DataValue::Measurements { values, labs: None } => format!("measurements({})", fmt_grid(values)),
        DataValue::Measurements { values, labs: Some(labs) } => format!("measurements({}, labs={labs:?})", fmt_grid(values)),
        DataValue::PValue(p) => format!("pvalue({p})"),
        DataValue::TestResult(t) => (if *t { "positive" } else { "negative" }).into(),
        DataValue::Regression { outcomes } => format!("regression({})", fmt_grid(outcomes)),
        DataValue::MarkerPanel { estimates, selected, .. } => {
            format!("marker_panel({}) selected={selected:?}", fmt_grid(estimates))
        }
    }
}

/// A parsed value expression.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Num(f64),
    Ident(String),
    Str(String),
    List(Vec<Value>),
    Range { lo: f64, hi: f64, step: f64 },
    Call { name: String, args: Vec<Value>, kwargs: Vec<(String, Value)> },
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Str(String),
    Punct(char),
}

fn lex(s: &str) -> std::result::Result<Vec<Tok>, String> {
    let chars: Vec<char> = s.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if "()[],=:".contains(c) {
            out.push(Tok::Punct(c));
            i += 1;
        } else if c == '"' {
            let start = i + 1;
            let end = chars[start..].iter().position(|c| *c == '"').ok_or("unterminated string")? + start;
            out.push(Tok::Str(chars[start..end].iter().collect()));
            i = end + 1;
        } else if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' {
            let start = i;
            i += 1;
            while i < chars.len() {
                let d = chars[i];
                let exp_sign = (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                if d.is_ascii_alphanumeric() || d == '.' || d == '_' || exp_sign {
                    i += 1;
                } else {
                    break;
                }
            }
            let text: String = chars[start..i].iter().filter(|c| **c != '_').collect();
            let v = match text.as_str() {
                "-inf" => f64::NEG_INFINITY,
                "+inf" => f64::INFINITY,
                t => t.parse::<f64>().map_err(|_| format!("invalid number `{t}`"))?,
            };
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            out.push(if word == "inf" { Tok::Num(f64::INFINITY) } else { Tok::Ident(word) });
        } else {
            return Err(format!("unexpected character `{c}`"));
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(&Tok::Punct(c)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> std::result::Result<(), String> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(format!("expected `{c}`"))
        }
    }

    fn value(&mut self) -> std::result::Result<Value, String> {
        match self.toks.get(self.pos).cloned() {
            Some(Tok::Num(lo)) => {
                self.pos += 1;
                if self.eat(':') {
                    let hi = self.number()?;
                    self.expect(':')?;
                    let step = self.number()?;
                    return Ok(Value::Range { lo, hi, step });
                }
                Ok(Value::Num(lo))
            }
            Some(Tok::Str(s)) => {
                self.pos += 1;
                Ok(Value::Str(s))
            }
            Some(Tok::Punct('[')) => {
                self.pos += 1;
                let mut items = Vec::new();
                if !self.eat(']') {
                    loop {
                        items.push(self.value()?);
                        if self.eat(']') {
                            break;
                        }
                        self.expect(',')?;
                    }
                }
                Ok(Value::List(items))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if !self.eat('(') {
                    return Ok(Value::Ident(name));
                }
                let mut args = Vec::new();
                let mut kwargs = Vec::new();
                if !self.eat(')') {
                    loop {
                        let is_kw = matches!(self.peek(), Some(Tok::Ident(_)))
                            && self.toks.get(self.pos + 1) == Some(&Tok::Punct('='));
                        if is_kw {
                            let Some(Tok::Ident(k)) = self.peek().cloned() else { unreachable!() };
                            self.pos += 2;
                            kwargs.push((k, self.value()?));
                        } else if !kwargs.is_empty() {
                            return Err("positional argument after keyword argument".into());
                        } else {
                            args.push(self.value()?);
                        }
                        if self.eat(')') {
                            break;
                        }
                        self.expect(',')?;
                    }
                }
                Ok(Value::Call { name, args, kwargs })
            }
            Some(Tok::Punct(c)) => Err(format!("unexpected `{c}`")),
            None => Err("missing value".into()),
        }
    }

    fn number(&mut self) -> std::result::Result<f64, String> {
        match self.toks.get(self.pos) {
            Some(Tok::Num(v)) => {
                let v = *v;
                self.pos += 1;
                Ok(v)
            }
            _ => Err("expected a number".into()),
        }
    }
}

/// Parses one value expression.
pub fn parse_value(s: &str) -> std::result::Result<Value, String> {
    let mut p = Parser { toks: lex(s)?, pos: 0 };
    let v = p.value()?;
    if p.pos != p.toks.len() {
        return Err("trailing input after value".into());
    }
    Ok(v)
}

/// Expands `lo:hi:step` into an inclusive grid (endpoint kept when within
/// 1e-9), values rounded to 12 decimals to cancel accumulated error.
pub fn expand_range(lo: f64, hi: f64, step: f64) -> std::result::Result<Vec<f64>, String> {
    if !(lo.is_finite() && hi.is_finite() && step.is_finite()) {
        return Err("range bounds and step must be finite".into());
    }
    if step == 0.0 || (hi - lo) * step < 0.0 {
        return Err(format!("step {step} does not lead from {lo} to {hi}"));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    if count > 10_000_000 {
        return Err("range has too many points".into());
    }
    Ok((0..count).map(|i| round12(lo + i as f64 * step)).collect())
}

fn round12(x: f64) -> f64 {
    let r = (x * 1e12).round() / 1e12;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Parses a τ grid: `lo:hi:step`, or a comma list such as `inf,1,0.5`
/// (brackets optional). Values must be non-negative.
pub fn parse_tau_grid(s: &str) -> std::result::Result<Vec<f64>, String> {
    let trimmed = s.trim();
    let text = if trimmed.contains(':') || trimmed.starts_with('[') { trimmed.to_string() } else { format!("[{trimmed}]") };
    let grid = real_grid(&parse_value(&text)?)?;
    if let Some(t) = grid.iter().find(|t| t.is_nan() || **t < 0.0) {
        return Err(format!("tolerances must be non-negative, got {t}"));
    }
    Ok(grid)
}

fn real_grid(v: &Value) -> std::result::Result<Vec<f64>, String> {
    match v {
        Value::Range { lo, hi, step } => expand_range(*lo, *hi, *step),
        Value::List(items) => items.iter().map(num).collect(),
        Value::Num(x) => Ok(vec![*x]),
        _ => Err("expected a range `lo:hi:step` or a list of numbers".into()),
    }
}

fn num(v: &Value) -> std::result::Result<f64, String> {
    match v {
        Value::Num(x) => Ok(*x),
        other => Err(format!("expected a number, got {}", show(other))),
    }
}

fn count_of(v: &Value) -> std::result::Result<u64, String> {
    let x = num(v)?;
    if !(x >= 0.0 && x.fract() == 0.0 && x <= 9.007e15) {
        return Err(format!("expected a non-negative integer, got {x}"));
    }
    Ok(x as u64)
}

fn nums(v: &Value) -> std::result::Result<Vec<f64>, String> {
    match v {
        Value::List(items) => items.iter().map(num).collect(),
        other => Err(format!("expected a list of numbers, got {}", show(other))),
    }
}

fn show(v: &Value) -> String {
    match v {
        Value::Num(x) => x.to_string(),
        Value::Ident(s) => s.clone(),
        Value::Str(s) => format!("\"{s}\""),
        Value::List(_) => "a list".into(),
        Value::Range { .. } => "a range".into(),
        Value::Call { name, .. } => format!("{name}(...)"),
    }
}

/// Name, positional and keyword arguments of a call or bare identifier.
fn call(v: &Value) -> std::result::Result<(&str, &[Value], &[(String, Value)]), String> {
    match v {
        Value::Ident(name) => Ok((name, &[], &[])),
        Value::Call { name, args, kwargs } => Ok((name, args, kwargs)),
        other => Err(format!("expected a name or call, got {}", show(other))),
    }
}

fn arity(name: &str, args: &[Value], want: usize) -> std::result::Result<(), String> {
    if args.len() != want {
        return Err(format!("{name} takes {want} argument(s), got {}", args.len()));
    }
    Ok(())
}

fn no_kwargs(name: &str, kwargs: &[(String, Value)]) -> std::result::Result<(), String> {
    match kwargs.first() {
        Some((k, _)) => Err(format!("{name} takes no keyword `{k}`")),
        None => Ok(()),
    }
}

fn real_args<const N: usize>(name: &str, args: &[Value], kwargs: &[(String, Value)]) -> std::result::Result<[f64; N], String> {
    arity(name, args, N)?;
    no_kwargs(name, kwargs)?;
    let mut out = [0.0; N];
    for (o, a) in out.iter_mut().zip(args) {
        *o = num(a)?;
    }
    Ok(out)
}

/// Parses a prior expression, e.g. `two_point(0, 1, 0.5)`.
pub fn prior_from(v: &Value) -> std::result::Result<PriorSpec, String> {
    let (name, args, kwargs) = call(v)?;
    match name {
        "point_mass" => Ok(PriorSpec::PointMass(real_args::<1>(name, args, kwargs)?[0])),
        "two_point" => {
            let [value0, value1, weight1] = real_args(name, args, kwargs)?;
            Ok(PriorSpec::TwoPoint { value0, value1, weight1 })
        }
        "gaussian" => {
            let [mean, sd] = real_args(name, args, kwargs)?;
            Ok(PriorSpec::Gaussian { mean, sd })
        }
        "uniform_grid" => {
            let [lo, hi, points] = real_args(name, args, kwargs)?;
            let points = count_of(&Value::Num(points))? as usize;
            Ok(PriorSpec::UniformGrid { lo, hi, points })
        }
        "mixture" => {
            no_kwargs(name, kwargs)?;
            if args.is_empty() {
                return Err("mixture needs at least one component".into());
            }
            let comps = args
                .iter()
                .map(|a| match a {
                    Value::List(pair) if pair.len() == 2 => Ok((prior_from(&pair[0])?, num(&pair[1])?)),
                    _ => Err("mixture components are written [prior, weight]".to_string()),
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(PriorSpec::FiniteMixture(comps))
        }
        other => Err(format!("unknown prior `{other}`")),
    }
}

/// Parses a noise expression, e.g. `beta_pvalue(0.02, 1.35)`.
pub fn noise_from(v: &Value) -> std::result::Result<NoiseSpec, String> {
    let (name, args, kwargs) = call(v)?;
    match name {
        "std_normal" => real_args::<0>(name, args, kwargs).map(|_| NoiseSpec::StdNormal),
        "unit_exponential" => real_args::<0>(name, args, kwargs).map(|_| NoiseSpec::UnitMeanExponential),
        "unit_lognormal" => Ok(NoiseSpec::UnitMeanLogNormal { sigma: real_args::<1>(name, args, kwargs)?[0] }),
        "beta_pvalue" => {
            let [a, b] = real_args(name, args, kwargs)?;
            Ok(NoiseSpec::BetaPValue { a, b })
        }
        "bernoulli_channel" => {
            let [sensitivity, specificity] = real_args(name, args, kwargs)?;
            Ok(NoiseSpec::BernoulliChannel { sensitivity, specificity })
        }
        "two_lab" => {
            let [sd_lab1, sd_lab2, prob_lab1] = real_args(name, args, kwargs)?;
            Ok(NoiseSpec::TwoLabMixture { sd_lab1, sd_lab2, prob_lab1 })
        }
        "categorical" => {
            arity(name, args, 2)?;
            no_kwargs(name, kwargs)?;
            Ok(NoiseSpec::Categorical { labels: nums(&args[0])?, probs: nums(&args[1])? })
        }
        "discretized_normal" => {
            let [step, half_width] = real_args(name, args, kwargs)?;
            if !(step > 0.0 && half_width >= 0.0 && (half_width / step) <= 1e6) {
                return Err("discretized_normal needs step > 0 and a moderate half width".into());
            }
            Ok(NoiseSpec::discretized_normal(step, half_width))
        }
        other => Err(format!("unknown noise `{other}`")),
    }
}

/// Parses a structural model expression, e.g. `marker_panel(100, 20, 0.05)`.
pub fn structure_from(v: &Value) -> std::result::Result<StructuralModel, String> {
    let (name, args, kwargs) = call(v)?;
    match name {
        "additive" => real_args::<0>(name, args, kwargs).map(|_| StructuralModel::Additive),
        "multiplicative" => real_args::<0>(name, args, kwargs).map(|_| StructuralModel::Multiplicative),
        "pvalue_channel" => real_args::<0>(name, args, kwargs).map(|_| StructuralModel::PValueChannel),
        "diagnostic_test" => real_args::<0>(name, args, kwargs).map(|_| StructuralModel::DiagnosticTest),
        "marker_panel" => {
            let [ns, nm, selection_threshold] = real_args(name, args, kwargs)?;
            Ok(StructuralModel::MarkerPanel {
                n_subjects: count_of(&Value::Num(ns))? as usize,
                n_markers: count_of(&Value::Num(nm))? as usize,
                selection_threshold,
            })
        }
        "linear_regression" => {
            arity(name, args, 2)?;
            no_kwargs(name, kwargs)?;
            let design = matrix_from(&args[0])?;
            let target_covariates = DVector::from_vec(nums(&args[1])?);
            Ok(StructuralModel::LinearRegression { design, target_covariates })
        }
        other => Err(format!("unknown structure `{other}`")),
    }
}

/// A matrix written as a list of equal-length rows.
pub fn matrix_from(v: &Value) -> std::result::Result<DMatrix<f64>, String> {
    let Value::List(rows) = v else {
        return Err("a matrix is written as a list of rows".into());
    };
    let rows: Vec<Vec<f64>> = rows.iter().map(nums).collect::<std::result::Result<_, _>>()?;
    let k = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err("matrix rows must be nonempty and of equal length".into());
    }
    Ok(DMatrix::from_row_iterator(rows.len(), k, rows.into_iter().flatten()))
}

/// Parses a procedure expression, e.g. `z_test(1.96)`.
pub fn procedure_from(v: &Value) -> std::result::Result<Procedure, String> {
    let (name, args, kwargs) = call(v)?;
    let point = |rule| -> std::result::Result<Procedure, String> {
        if !args.is_empty() {
            return Err(format!("{name} takes only the keyword `loss`"));
        }
        let mut loss = PointLoss::Squared;
        for (k, val) in kwargs {
            match (k.as_str(), val) {
                ("loss", Value::Ident(l)) if l == "abs" => loss = PointLoss::Absolute,
                ("loss", Value::Ident(l)) if l == "squared" => loss = PointLoss::Squared,
                _ => return Err(format!("{name}: expected loss=abs or loss=squared")),
            }
        }
        Ok(Procedure::PointEst { rule, loss })
    };
    match name {
        "sample_mean" => point(PointRule::SampleMeanEst),
        "minimax_binomial" => point(PointRule::MinimaxBinomialEst),
        "plugin_marker" => point(PointRule::PlugInMarkerEst),
        "least_squares" => point(PointRule::LeastSquaresPrediction),
        "additive_lower" => {
            Ok(Procedure::Interval(IntervalRule::AdditiveLower { buffer: real_args::<1>(name, args, kwargs)?[0] }))
        }
        "pivot_lower" => Ok(Procedure::Interval(IntervalRule::MultiplicativePivotLower {
            level: real_args::<1>(name, args, kwargs)?[0],
        })),
        "z_interval" => Ok(Procedure::Interval(IntervalRule::ZInterval { level: real_args::<1>(name, args, kwargs)?[0] })),
        "p_threshold" => Ok(Procedure::Test(TestRule::PThresholdTest { alpha: real_args::<1>(name, args, kwargs)?[0] })),
        "z_test" => Ok(Procedure::Test(TestRule::ZTest { critical: real_args::<1>(name, args, kwargs)?[0] })),
        "diagnostic_predict" => real_args::<0>(name, args, kwargs).map(|_| Procedure::Test(TestRule::DiagnosticPredict)),
        other => Err(format!("unknown procedure `{other}`")),
    }
}

/// Parses a match expression, e.g. `abs_log_lr(tau=0.5)`. The Beta
/// parameters of `abs_log_lr` default to those of a `beta_pvalue` noise.
pub fn match_from(v: &Value, noise: Option<&NoiseSpec>) -> std::result::Result<MatchSpec, String> {
    let (name, args, kwargs) = call(v)?;
    if !args.is_empty() {
        return Err(format!("{name} takes keyword arguments only (tau=, metric=)"));
    }
    let kw = |k: &str| kwargs.iter().find(|(key, _)| key == k).map(|(_, v)| v);
    for (k, _) in kwargs {
        if !["tau", "metric", "a", "b"].contains(&k.as_str()) {
            return Err(format!("{name} takes no keyword `{k}`"));
        }
    }
    if name == "all" {
        return Ok(MatchSpec::all());
    }
    let statistic = match name {
        "sample_size" => StatisticId::SampleSize,
        "sample_mean" => StatisticId::SampleMean,
        "lab_assignment" => StatisticId::LabAssignment,
        "raw_value" => StatisticId::RawValue,
        "selected_set" => StatisticId::SelectedSet,
        "test_result" => StatisticId::TestResult,
        "covariate_balance" => StatisticId::CovariateBalance,
        "abs_log_lr" => {
            let (da, db) = match noise {
                Some(NoiseSpec::BetaPValue { a, b }) => (Some(*a), Some(*b)),
                _ => (None, None),
            };
            let a = kw("a").map(num).transpose()?.or(da).ok_or("abs_log_lr needs a= (or a beta_pvalue noise)")?;
            let b = kw("b").map(num).transpose()?.or(db).ok_or("abs_log_lr needs b= (or a beta_pvalue noise)")?;
            StatisticId::AbsLogLR { a, b }
        }
        other => return Err(format!("unknown statistic `{other}`")),
    };
    let metric = match kw("metric") {
        None => statistic.default_metric(),
        Some(Value::Ident(m)) => match m.as_str() {
            "absolute" => Metric::AbsoluteDiff,
            "folded_log" => Metric::FoldedLogDiff,
            "exact" => Metric::ExactEquality,
            other => return Err(format!("unknown metric `{other}`")),
        },
        Some(other) => return Err(format!("metric must be a name, got {}", show(other))),
    };
    let tau = kw("tau").map(num).transpose()?.unwrap_or(0.0);
    if tau.is_nan() || tau < 0.0 {
        return Err(format!("tau must be non-negative, got {tau}"));
    }
    Ok(MatchSpec::new(statistic, tau, metric))
}

/// Parses a target expression, e.g. `pvalue(0.049)` or `positive`.
pub fn target_from(v: &Value, structure: Option<&StructuralModel>) -> std::result::Result<TargetProblem, String> {
    let (name, args, kwargs) = call(v)?;
    let data = match name {
        "positive" | "negative" => {
            real_args::<0>(name, args, kwargs)?;
            DataValue::TestResult(name == "positive")
        }
        "test_result" => match args {
            [Value::Ident(r)] if r == "positive" || r == "negative" => DataValue::TestResult(r == "positive"),
            _ => return Err("test_result takes `positive` or `negative`".into()),
        },
        "pvalue" => DataValue::PValue(real_args::<1>(name, args, kwargs)?[0]),
        "measurements" => {
            arity(name, args, 1)?;
            let values = nums(&args[0])?;
            let mut labs = None;
            for (k, val) in kwargs {
                if k != "labs" {
                    return Err(format!("measurements takes no keyword `{k}`"));
                }
                let l = nums(val)?
                    .into_iter()
                    .map(|x| if x == 1.0 || x == 2.0 { Ok(x as u8) } else { Err(format!("lab labels are 1 or 2, got {x}")) })
                    .collect::<std::result::Result<Vec<u8>, String>>()?;
                if l.len() != values.len() {
                    return Err("labs must have one entry per measurement".into());
                }
                labs = Some(l);
            }
            DataValue::Measurements { values, labs }
        }
        "regression" => {
            arity(name, args, 1)?;
            no_kwargs(name, kwargs)?;
            DataValue::Regression { outcomes: nums(&args[0])? }
        }
        "marker_panel" => {
            arity(name, args, 1)?;
            no_kwargs(name, kwargs)?;
            let Some(StructuralModel::MarkerPanel { n_subjects, selection_threshold, .. }) = structure else {
                return Err("a marker_panel target needs a marker_panel structure declared first".into());
            };
            let estimates = nums(&args[0])?;
            let std_error = StructuralModel::marker_std_error(*n_subjects);
            let selected: BTreeSet<usize> = select_markers(&estimates, std_error, *selection_threshold);
            DataValue::MarkerPanel { estimates, std_error, selected }
        }
        other => return Err(format!("unknown target `{other}`")),
    };
    Ok(TargetProblem::new(data))
}

/// Parses a config. Relative paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: Option<&Path>) -> Result<RunSpec> {
    let mut entries: Vec<(usize, String, Value)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Config { line: line_no, msg };
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(err(format!("unknown key `{key}`")));
        }
        if entries.iter().any(|(_, k, _)| k == key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        let value = parse_value(value).map_err(|m| err(format!("{key}: {m}")))?;
        entries.push((line_no, key.to_string(), value));
    }
    let find = |k: &str| entries.iter().find(|(_, key, _)| key == k).map(|(l, _, v)| (*l, v));
    let at = |line: usize| move |msg: String| Error::Config { line, msg };
    let path = |v: &Value| -> std::result::Result<PathBuf, String> {
        match v {
            Value::Str(s) => {
                let p = PathBuf::from(s);
                Ok(match base_dir {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                })
            }
            other => Err(format!("expected a quoted path, got {}", show(other))),
        }
    };
    let mut spec = RunSpec::default();

    // scenario parts first: match and target defaults depend on them
    if let Some((l, v)) = find("prior") {
        spec.prior = Some(prior_from(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("noise") {
        spec.noise = Some(noise_from(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("structure") {
        spec.structure = Some(structure_from(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("n") {
        let n = count_of(v).map_err(at(l))?;
        spec.n = Some(n as usize);
    }
    if let Some((l, v)) = find("procedure") {
        spec.procedure = Some(procedure_from(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("match") {
        spec.matching = Some(match_from(v, spec.noise.as_ref()).map_err(at(l))?);
    }
    if let Some((l, v)) = find("target") {
        spec.target = Some(target_from(v, spec.structure.as_ref()).map_err(at(l))?);
    }
    if let Some((l, v)) = find("family") {
        let Value::List(items) = v else {
            return Err(at(l)("family is a list of priors".into()));
        };
        spec.family = items.iter().map(prior_from).collect::<std::result::Result<_, _>>().map_err(at(l))?;
        if spec.family.is_empty() {
            return Err(at(l)("family must be nonempty".into()));
        }
    }
    let positive_count = |k: &str| -> Result<Option<u64>> {
        match find(k) {
            Some((l, v)) => {
                let c = count_of(v).map_err(at(l))?;
                if c == 0 {
                    return Err(at(l)(format!("{k} must be at least 1")));
                }
                Ok(Some(c))
            }
            None => Ok(None),
        }
    };
    spec.count = positive_count("count")?;
    spec.replications = positive_count("replications")?;
    spec.trial_size = positive_count("trial_size")?.map(|v| v as usize);
    spec.block_length = positive_count("block_length")?.map(|v| v as usize);
    spec.resolution = positive_count("resolution")?.map(|v| v as usize);
    if let Some((l, v)) = find("seed") {
        spec.seed = Some(count_of(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("level") {
        spec.level = Some(count_of(v).map_err(at(l))? as usize);
    }
    if let Some((l, v)) = find("min_length") {
        spec.min_length = Some(count_of(v).map_err(at(l))? as usize);
    }
    if let Some((l, v)) = find("tau_grid") {
        let grid = real_grid(v).map_err(at(l))?;
        if let Some(t) = grid.iter().find(|t| t.is_nan() || **t < 0.0) {
            return Err(at(l)(format!("tolerances must be non-negative, got {t}")));
        }
        spec.tau_grid = Some(grid);
    }
    if let Some((l, v)) = find("theta_grid") {
        spec.theta_grid = Some(real_grid(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("op") {
        let Value::Ident(name) = v else {
            return Err(at(l)("op is an operation name".into()));
        };
        spec.op = Some(name.parse().map_err(at(l))?);
    }
    if let Some((l, v)) = find("population") {
        spec.population = Some(path(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("image") {
        spec.image = Some(path(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("sequence") {
        match v {
            Value::Str(s) => spec.sequence = Some(s.clone()),
            Value::Ident(s) => spec.sequence = Some(s.clone()),
            other => return Err(at(l)(format!("sequence is a string of symbols, got {}", show(other)))),
        }
    }
    if let Some((l, v)) = find("outcomes") {
        spec.outcomes = Some(nums(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("magnitude_floor") {
        spec.magnitude_floor = Some(num(v).map_err(at(l))?);
    }
    if let Some((l, v)) = find("panel_sizes") {
        let Value::List(items) = v else {
            return Err(at(l)("panel_sizes is a list of counts".into()));
        };
        spec.panel_sizes = Some(items.iter().map(|x| count_of(x).map(|c| c as usize)).collect::<std::result::Result<_, _>>().map_err(at(l))?);
    }
    Ok(spec)
}

/// Reads finite-population records from CSV rows `c1,...,cR,y`: integer
/// covariate labels followed by the outcome. Blank and `#` lines are skipped.
pub fn read_population(text: &str) -> Result<Vec<crate::evaluate::Record>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Config { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (y, xs) = fields.split_last().ok_or_else(|| err("empty row".into()))?;
        let outcome: f64 = y.parse().map_err(|_| err(format!("invalid outcome `{y}`")))?;
        let covariates = xs
            .iter()
            .map(|x| x.parse::<u32>().map_err(|_| err(format!("invalid covariate label `{x}`"))))
            .collect::<Result<Vec<u32>>>()?;
        out.push(crate::evaluate::Record { covariates, outcome });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PVALUE: &str = "\
# equal-precision p-value matching
prior = two_point(0, 1, 0.5)
noise = beta_pvalue(0.02, 1.35)
structure = pvalue_channel
n = 1
procedure = p_threshold(0.05)
match = abs_log_lr(tau=0.5)
target = pvalue(0.049)
tau_grid = 0:2:0.1
count = 1e6
";

    #[test]
    fn parses_a_full_config() {
        let spec = parse_config(PVALUE, None).unwrap();
        let s = spec.scenario().unwrap();
        assert_eq!(s.prior, PriorSpec::two_point(0.0, 1.0, 0.5));
        assert_eq!(spec.matching.unwrap(), MatchSpec::within(StatisticId::AbsLogLR { a: 0.02, b: 1.35 }, 0.5));
        assert_eq!(spec.target.unwrap().data, DataValue::PValue(0.049));
        assert_eq!(spec.count, Some(1_000_000));
        let grid = spec.tau_grid.unwrap();
        assert_eq!(grid.len(), 21);
        assert_eq!(grid[3], 0.3);
        assert_eq!(grid[20], 2.0);
    }

    #[test]
    fn errors_cite_line_numbers() {
        let bad = "prior = point_mass(0)\n\nnoise = std_normal(\n";
        assert!(matches!(parse_config(bad, None), Err(Error::Config { line: 3, .. })));
        let unknown = "prior = point_mass(0)\ncolour = blue\n";
        assert_eq!(
            parse_config(unknown, None),
            Err(Error::Config { line: 2, msg: "unknown key `colour`".into() })
        );
        assert!(matches!(parse_config("n = 2.5", None), Err(Error::Config { line: 1, .. })));
        assert!(matches!(parse_config("n = 1\nn = 2", None), Err(Error::Config { line: 2, .. })));
    }

    #[test]
    fn displayed_specs_parse_back() {
        let priors = [
            PriorSpec::PointMass(2.5),
            PriorSpec::two_point(0.0, 1.0, 0.25),
            PriorSpec::gaussian(5.0, 2.0),
            PriorSpec::UniformGrid { lo: -1.0, hi: 1.0, points: 5 },
            PriorSpec::FiniteMixture(vec![(PriorSpec::PointMass(0.0), 0.8), (PriorSpec::gaussian(0.0, 1.0), 0.2)]),
        ];
        for p in priors {
            assert_eq!(prior_from(&parse_value(&p.to_string()).unwrap()).unwrap(), p);
        }
        let noises = [
            NoiseSpec::StdNormal,
            NoiseSpec::UnitMeanExponential,
            NoiseSpec::UnitMeanLogNormal { sigma: 0.5 },
            NoiseSpec::BetaPValue { a: 0.02, b: 1.35 },
            NoiseSpec::BernoulliChannel { sensitivity: 0.9, specificity: 0.9 },
            NoiseSpec::TwoLabMixture { sd_lab1: 1.0, sd_lab2: 100.0, prob_lab1: 0.5 },
            NoiseSpec::Categorical { labels: vec![0.5, 1.5], probs: vec![0.5, 0.5] },
        ];
        for n in noises {
            assert_eq!(noise_from(&parse_value(&n.to_string()).unwrap()).unwrap(), n);
        }
        let reg = StructuralModel::LinearRegression {
            design: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 1.0, -1.0]),
            target_covariates: DVector::from_vec(vec![1.0, 0.5]),
        };
        assert_eq!(structure_from(&parse_value(&reg.to_string()).unwrap()).unwrap(), reg);
        for p in ["sample_mean(loss=abs)", "pivot_lower(0.95)", "z_test(1.96)", "diagnostic_predict", "least_squares"] {
            assert_eq!(procedure_from(&parse_value(p).unwrap()).unwrap().to_string(), p);
        }
    }

    #[test]
    fn tau_grids() {
        assert_eq!(parse_tau_grid("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_tau_grid("inf,1,0.5").unwrap(), vec![f64::INFINITY, 1.0, 0.5]);
        assert_eq!(parse_tau_grid("2:0:-0.5").unwrap(), vec![2.0, 1.5, 1.0, 0.5, 0.0]);
        assert!(parse_tau_grid("0:1:-0.1").is_err());
        assert!(parse_tau_grid("-1,2").is_err());
        assert_eq!(expand_range(0.0, 0.3, 0.1).unwrap(), vec![0.0, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn marker_targets_select_with_the_scenario_threshold() {
        let text = "structure = marker_panel(100, 3, 0.05)\ntarget = marker_panel([0.1, 0.5, -0.9])\n";
        let spec = parse_config(text, None).unwrap();
        let DataValue::MarkerPanel { selected, .. } = spec.target.unwrap().data else { panic!() };
        // se = 0.2: |z| = 0.5, 2.5, 4.5
        assert_eq!(selected.into_iter().collect::<Vec<_>>(), vec![2, 3]);
        assert!(parse_config("target = marker_panel([1])", None).is_err());
    }

    #[test]
    fn missing_scenario_part_is_named() {
        let spec = parse_config("prior = point_mass(0)\nn = 3", None).unwrap();
        assert_eq!(spec.scenario(), Err(Error::MissingKey("noise".into())));
    }

    #[test]
    fn describe_names_the_resolved_parts() {
        let text = "prior = two_point(0, 1, 0.5)\nnoise = bernoulli_channel(0.9, 0.9)\nstructure = diagnostic_test\nn = 1\n";
        let d = parse_config(text, None).unwrap().describe();
        assert!(d.contains("BernoulliChannel(0.9, 0.9)"), "{d}");
        assert!(d.contains("validation      ok"), "{d}");
        let bad = parse_config("prior = point_mass(0)\nnoise = std_normal\nstructure = diagnostic_test\nn = 2\n", None).unwrap();
        assert!(bad.describe().contains("violation"));
    }

    #[test]
    fn population_rows() {
        let recs = read_population("# c1,c2,y\n0,1,2.5\n1,1,-1\n").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].covariates, vec![1, 1]);
        assert!(matches!(read_population("0,x,1\n"), Err(Error::Config { line: 1, .. })));
    }
}
