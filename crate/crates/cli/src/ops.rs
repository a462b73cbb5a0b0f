//! Operation dispatch: each operation renders one artifact in the requested
//! format.

use std::fmt::Write as _;

use ctrlsim::canon::{eb_consistency, loo_cv_error, minimax_risk_curve, power_curve, winners_curse_report, worst_case_type2};
use ctrlsim::config::{Operation, RunSpec};
use ctrlsim::distmodel::{DataValue, NoiseSpec, PriorSpec, StructuralModel};
use ctrlsim::evaluate::{
    anova_gain, anova_sides, conditional_error, partial_match_decomposition, sensitivity_band, tradeoff_estimate,
    FinitePopulation,
};
use ctrlsim::genctl::SeedSpec;
use ctrlsim::patterns::{fit_block_model, fit_layers, read_pixel_samples, simulate_sequence, SymbolSequence};
use ctrlsim::procedures::{Procedure, TestRule};
use ctrlsim::relevance::MatchSpec;
use ctrlsim::{config, Error, Result};
use nalgebra::DVector;
use serde_json::json;

use crate::Format;

/// Controls simulated when neither the flag nor the config sets `count`.
pub const DEFAULT_COUNT: u64 = 100_000;

pub fn execute(spec: &RunSpec, op: Operation, format: Format) -> Result<String> {
    let seed = SeedSpec::new(spec.seed.unwrap_or(0), 0);
    let count = spec.count.unwrap_or(DEFAULT_COUNT);
    match op {
        Operation::Error => error(spec, count, seed, format),
        Operation::Band => band(spec, count, seed, format),
        Operation::Anova => anova(spec, format),
        Operation::Tradeoff => tradeoff(spec, seed, format),
        Operation::Partial => partial(spec, count, seed, format),
        Operation::Patterns => patterns(spec, seed, format),
        Operation::Power => power(spec, format),
        Operation::Winners => winners(spec, count, seed, format),
        Operation::Minimax => minimax(spec, format),
        Operation::EmpiricalBayes => eb(spec, seed, format),
        Operation::Loo => loo(spec, format),
    }
}

fn need<T: Clone>(v: &Option<T>, key: &str) -> Result<T> {
    RunSpec::require(v, key)
}

fn num(x: f64) -> String {
    if x.is_finite() { x.to_string() } else if x > 0.0 { "inf".into() } else if x < 0.0 { "-inf".into() } else { "NA".into() }
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), num)
}

fn pretty(v: serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(&v).expect("json values serialize");
    s.push('\n');
    s
}

fn error(spec: &RunSpec, count: u64, seed: SeedSpec, format: Format) -> Result<String> {
    let s = spec.scenario()?;
    let proc = need(&spec.procedure, "procedure")?;
    let m = spec.matching.clone().unwrap_or_else(MatchSpec::all);
    let target = need(&spec.target, "target")?;
    let r = conditional_error(&s, &proc, &m, &target, count, seed)?;
    Ok(match format {
        Format::Csv => format!(
            "estimate,mc_se,accepted,generated,acceptance_rate\n{},{},{},{},{}\n",
            num(r.estimate),
            num(r.mc_se),
            r.accepted,
            r.generated,
            num(r.acceptance_rate)
        ),
        Format::Json => format!("{}\n", r.to_json()),
        Format::Text => format!(
            "procedure       {proc}\nmatch           {m}\nerror           {} (mc se {})\naccepted        {} of {} ({})\n",
            num(r.estimate),
            num(r.mc_se),
            r.accepted,
            r.generated,
            num(r.acceptance_rate)
        ),
    })
}

fn band(spec: &RunSpec, count: u64, seed: SeedSpec, format: Format) -> Result<String> {
    let s = spec.scenario()?;
    let proc = need(&spec.procedure, "procedure")?;
    let m = need(&spec.matching, "match")?;
    let target = need(&spec.target, "target")?;
    let grid = need(&spec.tau_grid, "tau_grid")?;
    let family = if spec.family.is_empty() { vec![s.prior.clone()] } else { spec.family.clone() };
    let b = sensitivity_band(&s, &proc, &m.statistic, &grid, &family, &target, count, seed)?;
    if b.all_empty() {
        return Err(Error::EmptyRelevantSet { generated: count });
    }
    Ok(match format {
        Format::Csv => b.to_csv(),
        Format::Json => pretty(json!({
            "statistic": m.statistic.to_string(),
            "family": family.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "rows": b.rows.iter().map(|r| json!({
                "tau": num(r.tau),
                "err_min": r.err_min,
                "err_max": r.err_max,
                "err_nominal": r.err_nominal,
                "mc_se": r.mc_se,
                "accepted_min": r.accepted_min,
            })).collect::<Vec<_>>(),
        })),
        Format::Text => {
            let mut out = format!("statistic {}; {} priors; {} controls each\n", m.statistic, family.len(), count);
            let _ = writeln!(out, "{:>8} {:>12} {:>12} {:>12} {:>12} {:>12}", "tau", "err_min", "err_max", "nominal", "mc_se", "accepted");
            for r in &b.rows {
                let _ = writeln!(
                    out,
                    "{:>8} {:>12} {:>12} {:>12} {:>12} {:>12}",
                    num(r.tau),
                    short(r.err_min),
                    short(r.err_max),
                    short(r.err_nominal),
                    short(r.mc_se),
                    r.accepted_min
                );
            }
            out
        }
    })
}

fn short(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

fn population(spec: &RunSpec) -> Result<FinitePopulation> {
    let path = need(&spec.population, "population")?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
    FinitePopulation::new(config::read_population(&text)?)
}

fn anova(spec: &RunSpec, format: Format) -> Result<String> {
    let pop = population(spec)?;
    let levels: Vec<usize> = match spec.level {
        Some(l) => vec![l],
        None => (0..=pop.depth()).collect(),
    };
    let rows = levels
        .into_iter()
        .map(|r| Ok((r, anova_sides(&pop, r)?, anova_gain(&pop, r)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(match format {
        Format::Csv | Format::Text => {
            let mut out = String::from("level,total,within,gain\n");
            for (r, (t, w), g) in rows {
                let _ = writeln!(out, "{r},{},{},{}", num(t), num(w), num(g));
            }
            out
        }
        Format::Json => pretty(json!(rows
            .iter()
            .map(|(r, (t, w), g)| json!({"level": r, "total": t, "within": w, "gain": g}))
            .collect::<Vec<_>>())),
    })
}

fn tradeoff(spec: &RunSpec, seed: SeedSpec, format: Format) -> Result<String> {
    let pop = population(spec)?;
    let r = spec.level.unwrap_or(0);
    let trial = need(&spec.trial_size, "trial_size")?;
    let reps = spec.replications.unwrap_or(1000);
    let t = tradeoff_estimate(&pop, trial, r, reps, seed)?;
    Ok(match format {
        Format::Csv => format!(
            "level,gain,loss,net,loss_se,flagged\n{r},{},{},{},{},{}\n",
            num(t.gain),
            num(t.loss),
            num(t.net),
            num(t.loss_se),
            t.flagged
        ),
        Format::Json => pretty(json!({
            "level": r, "gain": t.gain, "loss": t.loss, "net": t.net, "loss_se": t.loss_se, "flagged": t.flagged,
        })),
        Format::Text => format!(
            "matching on covariate {} beyond level {r}\ngain            {}\nloss            {} (mc se {})\nnet             {}\nflagged         {} of {reps} replications\n",
            r + 1,
            num(t.gain),
            num(t.loss),
            num(t.loss_se),
            num(t.net),
            t.flagged
        ),
    })
}

fn partial(spec: &RunSpec, count: u64, seed: SeedSpec, format: Format) -> Result<String> {
    let Some(StructuralModel::LinearRegression { design, target_covariates }) = &spec.structure else {
        return Err(Error::MissingKey("structure (linear_regression)".into()));
    };
    let outcomes = match (&spec.outcomes, &spec.target) {
        (Some(y), _) => y.clone(),
        (None, Some(t)) => match &t.data {
            DataValue::Regression { outcomes } => outcomes.clone(),
            _ => return Err(Error::MissingKey("outcomes".into())),
        },
        (None, None) => return Err(Error::MissingKey("outcomes".into())),
    };
    let prior = need(&spec.prior, "prior")?;
    let count = usize::try_from(count).map_err(|_| Error::Domain("count too large".into()))?;
    let r = partial_match_decomposition(design, target_covariates, &DVector::from_vec(outcomes), &prior, count, seed)?;
    let max_resid = r.identity_residuals.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (mb, sb) = mean_sd(&r.b);
    let (mf, sf) = mean_sd(&r.f);
    Ok(match format {
        Format::Csv => {
            let mut out = String::from("draw,b,f,identity_residual\n");
            for i in 0..r.b.len() {
                let _ = writeln!(out, "{},{},{},{}", i + 1, num(r.b[i]), num(r.f[i]), num(r.identity_residuals[i]));
            }
            out
        }
        Format::Json => pretty(json!({
            "h0": r.h0, "mean_b": mb, "sd_b": sb, "mean_f": mf, "sd_f": sf,
            "max_identity_residual": max_resid, "draws": r.b.len(),
        })),
        Format::Text => format!(
            "leverage h0     {}\nB' mean, sd     {}, {}\nF' mean, sd     {}, {}\nmax |identity residual| {:e} over {} draws\n",
            num(r.h0),
            num(mb),
            num(sb),
            num(mf),
            num(sf),
            max_resid,
            r.b.len()
        ),
    })
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, v.sqrt())
}

fn patterns(spec: &RunSpec, seed: SeedSpec, format: Format) -> Result<String> {
    if let Some(seq) = &spec.sequence {
        let seq = SymbolSequence::parse(seq)?;
        let model = fit_block_model(&seq, need(&spec.block_length, "block_length")?)?;
        let simulated = spec.min_length.map(|l| simulate_sequence(&model, l, seed).to_string());
        return Ok(match format {
            Format::Csv => {
                let mut out = String::from("block,count,frequency\n");
                for (b, c) in model.counts() {
                    let _ = writeln!(out, "{b},{c},{}", num(model.frequency(b)));
                }
                out
            }
            Format::Json => pretty(json!({
                "block_length": model.block_length(),
                "blocks": model.block_count(),
                "frequencies": model.frequencies(),
                "simulated": simulated,
            })),
            Format::Text => {
                let mut out = format!("{} blocks of length {}\n", model.block_count(), model.block_length());
                for (b, c) in model.counts() {
                    let _ = writeln!(out, "{b}  {c}/{}", model.block_count());
                }
                if let Some(s) = simulated {
                    let _ = writeln!(out, "simulated       {s}");
                }
                out
            }
        });
    }
    let path = need(&spec.image, "sequence or image")?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io(format!("cannot read {}: {e}", path.display())))?;
    let model = fit_layers(&read_pixel_samples(&text)?, spec.resolution.unwrap_or(2))?;
    let mut rows = Vec::new();
    for l in 0..model.resolution() {
        for (c, m) in model.cell_means(l).iter().enumerate() {
            rows.push((l, c, *m));
        }
    }
    Ok(match format {
        Format::Csv | Format::Text => {
            let mut out = String::from("level,cell,r,g,b\n");
            for (l, c, m) in &rows {
                let _ = writeln!(out, "{l},{c},{},{},{}", num(m[0]), num(m[1]), num(m[2]));
            }
            out
        }
        Format::Json => pretty(json!({
            "resolution": model.resolution(),
            "replications": (0..=model.resolution()).map(|l| model.replications(l)).collect::<Vec<_>>(),
            "cell_means": rows.iter().map(|(l, c, m)| json!({"level": l, "cell": c, "color": m})).collect::<Vec<_>>(),
        })),
    })
}

fn power(spec: &RunSpec, format: Format) -> Result<String> {
    let critical = match spec.procedure {
        Some(Procedure::Test(TestRule::ZTest { critical })) => critical,
        _ => return Err(Error::MissingKey("procedure (z_test)".into())),
    };
    let n = need(&spec.n, "n")?;
    let grid = need(&spec.theta_grid, "theta_grid")?;
    let curve = power_curve(critical, n, &grid)?;
    let worst = spec.magnitude_floor.map(|f| worst_case_type2(critical, n, f)).transpose()?;
    Ok(match format {
        Format::Csv => {
            let mut out = String::from("theta,power\n");
            for (t, p) in &curve {
                let _ = writeln!(out, "{},{}", num(*t), num(*p));
            }
            out
        }
        Format::Json => pretty(json!({
            "critical": critical, "n": n,
            "magnitude_floor": spec.magnitude_floor, "worst_case_type2": worst,
            "curve": curve.iter().map(|(t, p)| json!({"theta": t, "power": p})).collect::<Vec<_>>(),
        })),
        Format::Text => {
            let mut out = format!("z-test, critical {critical}, n = {n}\n");
            for (t, p) in &curve {
                let _ = writeln!(out, "{:>8} {:.6}", num(*t), p);
            }
            if let (Some(f), Some(w)) = (spec.magnitude_floor, worst) {
                let _ = writeln!(out, "worst Type II for |theta| >= {f}: {w:.6}");
            }
            out
        }
    })
}

fn winners(spec: &RunSpec, count: u64, seed: SeedSpec, format: Format) -> Result<String> {
    let s = spec.scenario()?;
    let rows = winners_curse_report(&s, &s.prior, count, seed)?;
    Ok(match format {
        Format::Csv | Format::Text => {
            let mut out = String::from("marker,selection_rate,selected,bias,magnitude_bias,mc_se\n");
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    r.marker,
                    num(r.selection_rate),
                    r.selected,
                    opt(r.bias),
                    opt(r.magnitude_bias),
                    opt(r.mc_se)
                );
            }
            out
        }
        Format::Json => pretty(serde_json::to_value(&rows).expect("rows serialize")),
    })
}

fn minimax(spec: &RunSpec, format: Format) -> Result<String> {
    let n = need(&spec.n, "n")?;
    let grid = need(&spec.theta_grid, "theta_grid")?;
    let rows = minimax_risk_curve(n, &grid)?;
    Ok(match format {
        Format::Csv | Format::Text => {
            let mut out = String::from("theta,minimax_risk,sample_mean_risk\n");
            for r in &rows {
                let _ = writeln!(out, "{},{},{}", num(r.theta), num(r.minimax), num(r.sample_mean));
            }
            out
        }
        Format::Json => pretty(serde_json::to_value(&rows).expect("rows serialize")),
    })
}

fn eb(spec: &RunSpec, seed: SeedSpec, format: Format) -> Result<String> {
    let prevalence = match need(&spec.prior, "prior")? {
        PriorSpec::TwoPoint { value0: 0.0, value1: 1.0, weight1 } => weight1,
        PriorSpec::PointMass(v) if v == 0.0 || v == 1.0 => v,
        other => return Err(Error::Domain(format!("prevalence prior must be two_point(0, 1, p), got {other}"))),
    };
    let (sens, spec_) = match need(&spec.noise, "noise")? {
        NoiseSpec::BernoulliChannel { sensitivity, specificity } => (sensitivity, specificity),
        other => return Err(Error::Domain(format!("empirical Bayes needs a bernoulli_channel noise, got {other}"))),
    };
    let sizes = need(&spec.panel_sizes, "panel_sizes")?;
    let reps = spec.replications.unwrap_or(400);
    let (points, slope) = eb_consistency(prevalence, sens, spec_, &sizes, reps, seed)?;
    Ok(match format {
        Format::Csv => {
            let mut out = String::from("n,mean_abs_error,mc_se\n");
            for p in &points {
                let _ = writeln!(out, "{},{},{}", p.n, num(p.mean_abs_error), num(p.mc_se));
            }
            out
        }
        Format::Json => pretty(json!({"points": points, "log_log_slope": slope})),
        Format::Text => {
            let mut out = format!("prevalence {prevalence}, sensitivity {sens}, specificity {spec_}\n");
            for p in &points {
                let _ = writeln!(out, "n = {:<8} mean |error| {:.6} (mc se {:.6})", p.n, p.mean_abs_error, p.mc_se);
            }
            let _ = writeln!(out, "log-log slope   {slope:.4}");
            out
        }
    })
}

fn loo(spec: &RunSpec, format: Format) -> Result<String> {
    let Some(StructuralModel::LinearRegression { design, .. }) = &spec.structure else {
        return Err(Error::MissingKey("structure (linear_regression)".into()));
    };
    let y = DVector::from_vec(need(&spec.outcomes, "outcomes")?);
    let r = loo_cv_error(design, &y)?;
    Ok(match format {
        Format::Csv => {
            let mut out = String::from("record,error\n");
            for (i, e) in r.errors.iter().enumerate() {
                let _ = writeln!(out, "{},{}", i + 1, num(*e));
            }
            out
        }
        Format::Json => pretty(serde_json::to_value(&r).expect("report serializes")),
        Format::Text => {
            let mut out = String::new();
            for (i, e) in r.errors.iter().enumerate() {
                let _ = writeln!(out, "record {:<4} error {e:.6}", i + 1);
            }
            let _ = writeln!(out, "mean squared    {:.6}", r.mean_squared);
            out
        }
    })
}
