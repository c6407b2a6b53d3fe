//! The four-level test hierarchy: case construction, execution, verdicts.
//!
//! Every case draws randomness from `mix(suite seed, hash(case id))`, so the
//! verdict of a case does not depend on which other cases run or in which
//! order. Data selection uses the suite seed, so two cases over the same data
//! entry see the same rows.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::criteria::{Comparator, Level, Measure, Outcome};
use crate::datasel::{self, DataSpec};
use crate::error::{Error, Result};
use crate::estimators::{input_seed, propagate_chain, Estimator, Stage};
use crate::metrics::{self, MetricKind};
use crate::nn::{Head, Mode};
use crate::rng::{self, purpose};
use crate::suite::{Suite, TECHNICAL};
use crate::synthdata::{self, Dataset};

/// Level-1 checks generated for every estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    OutputValidity,
    InvalidInput,
    Determinism,
    Latency,
}

impl Check {
    pub const ALL: [Check; 4] = [Check::OutputValidity, Check::InvalidInput, Check::Determinism, Check::Latency];

    pub fn as_str(self) -> &'static str {
        match self {
            Check::OutputValidity => "output_validity",
            Check::InvalidInput => "invalid_input",
            Check::Determinism => "determinism",
            Check::Latency => "latency",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub comparator: Comparator,
    pub threshold: f64,
}

impl Rule {
    /// Inclusive comparison; NaN is an error, never a pass or a fail.
    pub fn judge(&self, value: f64) -> Outcome {
        if value.is_nan() {
            Outcome::Error
        } else if self.comparator.holds(value, self.threshold) {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }

    pub fn describe(&self, subject: &str) -> String {
        format!("{subject} {} {}", self.comparator.symbol(), self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestCase {
    pub id: String,
    pub level: Level,
    pub criterion: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub measure: Option<Measure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub id: String,
    pub level: Level,
    pub criterion: String,
    pub verdict: Outcome,
    /// The value the verdict was taken on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<Rule>,
    /// What the rule is applied to, e.g. `group disparity of nll_mean`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default)]
    pub measured: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub artifacts: BTreeMap<String, Value>,
    /// Wall-clock seconds; excluded from determinism comparisons.
    pub runtime_s: f64,
    /// Wall-clock measurements; excluded from determinism comparisons.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timing: BTreeMap<String, f64>,
}

impl TestResult {
    fn blank(case: &TestCase, verdict: Outcome) -> Self {
        TestResult {
            id: case.id.clone(),
            level: case.level,
            criterion: case.criterion.clone(),
            verdict,
            value: None,
            rule: None,
            subject: None,
            measured: BTreeMap::new(),
            message: None,
            artifacts: BTreeMap::new(),
            runtime_s: 0.0,
            timing: BTreeMap::new(),
        }
    }

    pub fn skipped(case: &TestCase, reason: &str) -> Self {
        TestResult {
            message: Some(reason.to_string()),
            ..TestResult::blank(case, Outcome::Skipped)
        }
    }

    fn errored(case: &TestCase, e: &Error) -> Self {
        TestResult {
            message: Some(e.to_string()),
            ..TestResult::blank(case, Outcome::Error)
        }
    }
}

/// JSON cannot carry non-finite numbers, so they are left out.
fn put(map: &mut BTreeMap<String, f64>, key: impl Into<String>, v: f64) {
    if v.is_finite() {
        map.insert(key.into(), v);
    }
}

/// What a runner found; `verdict` overrides the rule when the runner decides.
#[derive(Debug, Default)]
struct Eval {
    value: f64,
    verdict: Option<Outcome>,
    measured: BTreeMap<String, f64>,
    artifacts: BTreeMap<String, Value>,
    message: Option<String>,
}

pub fn case_seed(suite_seed: u64, id: &str) -> u64 {
    rng::mix(suite_seed, &[rng::hash_str(id), purpose::CASE])
}

/// All cases of a suite: the technical checks followed by one case per
/// automatic criterion and level.
pub fn build_cases(suite: &Suite) -> Result<Vec<TestCase>> {
    let mut cases = technical_cases(suite);
    for c in suite.criteria.iter().filter(|c| !c.is_manual()) {
        let data = c.data.as_ref().map(|d| d.resolve(&suite.data).cloned()).transpose()?;
        let rule = match (c.comparator, c.threshold) {
            (Some(comparator), Some(threshold)) => Rule { comparator, threshold },
            _ => return Err(Error::Config(format!("criterion '{}' lacks a rule", c.id))),
        };
        for level in &c.test_depth {
            let id = Suite::case_id(&c.id, *level);
            cases.push(TestCase {
                seed: case_seed(suite.seed, &id),
                id,
                level: *level,
                criterion: c.id.clone(),
                check: None,
                data: data.clone(),
                measure: Some(c.measure.clone()),
                rule: Some(rule),
            });
        }
    }
    Ok(cases)
}

/// Lowest sigma a healthy estimator of this kind can report.
fn sigma_floor(est: &Estimator) -> f64 {
    match est {
        Estimator::ParametricGaussian { model } | Estimator::McDropout { model, .. }
            if model.head() == Head::Gaussian =>
        {
            model.sigma_floor()
        }
        Estimator::DeepEnsemble { members } => members.iter().map(|m| m.sigma_floor()).fold(f64::INFINITY, f64::min),
        Estimator::Scaled { inner, scale } => scale * sigma_floor(inner),
        Estimator::Faulty { inner, .. } => sigma_floor(inner),
        _ => 0.0,
    }
}

fn output_validity(est: &Estimator, data: &Dataset, seed: u64) -> Result<Eval> {
    let floor = sigma_floor(est);
    let mut ev = Eval::default();
    let mut invalid = 0usize;
    let mut first_bad = None;
    let mut min_sigma = f64::INFINITY;
    for r in &data.rows {
        match est.predict(&r.x, input_seed(seed, &r.x)) {
            Ok(p) => {
                min_sigma = min_sigma.min(p.sigma);
                let ok = p.mean.is_finite() && p.sigma.is_finite() && p.sigma >= floor && p.sigma >= 0.0;
                if !ok {
                    invalid += 1;
                    first_bad.get_or_insert_with(|| format!("x = {:?}: mean {}, sigma {}", r.x, p.mean, p.sigma));
                }
            }
            Err(Error::EstimatorFault(m)) => {
                invalid += 1;
                first_bad.get_or_insert(m);
            }
            Err(e) => return Err(Error::EstimatorFault(format!("prediction at {:?} failed: {e}", r.x))),
        }
    }
    put(&mut ev.measured, "n", data.len() as f64);
    put(&mut ev.measured, "invalid", invalid as f64);
    put(&mut ev.measured, "sigma_floor", floor);
    put(&mut ev.measured, "min_sigma", min_sigma);
    ev.value = invalid as f64;
    ev.verdict = Some(if invalid == 0 { Outcome::Pass } else { Outcome::Fail });
    ev.message = first_bad.map(|m| format!("first invalid output: {m}"));
    Ok(ev)
}

fn invalid_input(est: &Estimator, data: &Dataset, seed: u64) -> Result<Eval> {
    let x0 = data
        .rows
        .first()
        .map(|r| r.x.clone())
        .unwrap_or_else(|| vec![0.0; est.input_width()]);
    let mut nan = x0.clone();
    nan[0] = f64::NAN;
    let mut wide = x0.clone();
    wide.push(0.0);
    type Probe<'a> = (&'a str, Box<dyn Fn() -> bool + 'a>);
    let probes: Vec<Probe> = vec![
        ("nan_feature", Box::new(|| matches!(est.predict(&nan, seed), Err(Error::Domain(_))))),
        ("wrong_width", Box::new(|| matches!(est.predict(&wide, seed), Err(Error::Config(_))))),
        (
            "negative_incoming_sigma",
            Box::new(|| {
                matches!(
                    propagate_chain(&[Stage::new(est.clone())], &x0, -1.0, 2, seed),
                    Err(Error::Domain(_))
                )
            }),
        ),
    ];
    let mut ev = Eval::default();
    let mut unhandled = Vec::new();
    for (name, probe) in &probes {
        let handled = catch_unwind(AssertUnwindSafe(probe)).unwrap_or(false);
        put(&mut ev.measured, *name, if handled { 1.0 } else { 0.0 });
        if !handled {
            unhandled.push(*name);
        }
    }
    ev.value = unhandled.len() as f64;
    ev.verdict = Some(if unhandled.is_empty() { Outcome::Pass } else { Outcome::Fail });
    if !unhandled.is_empty() {
        ev.message = Some(format!("no structured error for: {}", unhandled.join(", ")));
    }
    Ok(ev)
}

fn determinism(est: &Estimator, data: &Dataset, seed: u64) -> Result<Eval> {
    let a = est.predict_dataset(data, seed)?;
    let b = est.predict_dataset(data, seed)?;
    let bits = |p: &crate::estimators::UncertaintyPrediction| (p.mean.to_bits(), p.sigma.to_bits());
    let mismatches = a.iter().zip(&b).filter(|(p, q)| bits(p) != bits(q)).count();
    let mut ev = Eval {
        value: mismatches as f64,
        verdict: Some(if mismatches == 0 { Outcome::Pass } else { Outcome::Fail }),
        ..Eval::default()
    };
    put(&mut ev.measured, "n", a.len() as f64);
    put(&mut ev.measured, "mismatches", mismatches as f64);
    if mismatches > 0 {
        ev.message = Some(format!("{mismatches} of {} predictions differ between identical passes", a.len()));
    }
    Ok(ev)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    metrics::quantile(v, 0.5).unwrap_or(f64::NAN)
}

fn latency(est: &Estimator, data: &Dataset, seed: u64, suite: &Suite, timing: &mut BTreeMap<String, f64>) -> Result<Eval> {
    let h = &suite.harness;
    let points: Vec<&[f64]> = data.rows.iter().take(h.latency_points).map(|r| r.x.as_slice()).collect();
    if points.is_empty() {
        return Err(Error::EmptySelection("latency needs at least one point".into()));
    }
    let mut per_point = Vec::new();
    let mut est_batches = Vec::new();
    let mut bare_batches = Vec::new();
    for _ in 0..h.latency_repetitions {
        let batch = Instant::now();
        for x in &points {
            let t = Instant::now();
            est.predict(x, input_seed(seed, x))?;
            per_point.push(t.elapsed().as_secs_f64() * 1e3);
        }
        est_batches.push(batch.elapsed().as_secs_f64());
        if let Some(m) = est.bare_model() {
            let t = Instant::now();
            for x in &points {
                m.forward(x, Mode::Deterministic)?;
            }
            bare_batches.push(t.elapsed().as_secs_f64());
        }
    }
    per_point.sort_by(f64::total_cmp);
    let p50 = metrics::quantile(&per_point, 0.5)?;
    let p99 = metrics::quantile(&per_point, 0.99)?;
    put(timing, "p50_ms", p50);
    put(timing, "p99_ms", p99);
    let overhead = if bare_batches.is_empty() {
        None
    } else {
        let ratio = median(&mut est_batches) / median(&mut bare_batches).max(1e-12);
        put(timing, "overhead_ratio", ratio);
        Some(ratio)
    };
    let mut reasons = Vec::new();
    if p99 > h.max_p99_ms {
        reasons.push(format!("p99 {p99:.3} ms > {} ms", h.max_p99_ms));
    }
    if let Some(r) = overhead.filter(|r| *r > h.max_overhead) {
        reasons.push(format!("overhead {r:.1} > {}", h.max_overhead));
    }
    Ok(Eval {
        value: f64::NAN,
        verdict: Some(if reasons.is_empty() { Outcome::Pass } else { Outcome::Fail }),
        message: (!reasons.is_empty()).then(|| reasons.join("; ")),
        ..Eval::default()
    })
}

/// Runs the four technical checks on `data`.
pub fn run_technical(est: &Estimator, data: &Dataset, suite: &Suite) -> Vec<TestResult> {
    technical_cases(suite)
        .iter().map(|c| run_one(c, est, data, suite)).collect()
}

fn technical_cases(suite: &Suite) -> Vec<TestCase> {
    Check::ALL
        .iter()
        .map(|c| {
            let id = format!("{TECHNICAL}.{}", c.as_str());
            TestCase {
                seed: case_seed(suite.seed, &id),
                id,
                level: Level::Technical,
                criterion: TECHNICAL.into(),
                check: Some(*c),
                data: None,
                measure: None,
                rule: None,
            }
        })
        .collect()
}

/// Points `from + t (to - from)` for `t = 0, 1/steps, ..., 1`.
pub fn straight_path(from: &[f64], to: &[f64], steps: usize) -> Vec<Vec<f64>> {
    (0..=steps)
        .map(|i| {
            let t = i as f64 / steps as f64;
            from.iter().zip(to).map(|(a, b)| a + t * (b - a)).collect()
        })
        .collect()
}

/// Largest `|d sigma| / |d x|` between consecutive path points; the step
/// length is floored at 1e-9.
pub fn max_change_rate(est: &Estimator, path: &[Vec<f64>], seed: u64) -> Result<(f64, usize)> {
    if path.len() < 2 {
        return Err(Error::Config("change-rate path needs at least two points".into()));
    }
    let sigmas = path
        .iter()
        .map(|x| est.predict(x, input_seed(seed, x)).map(|p| p.sigma))
        .collect::<Result<Vec<_>>>()?;
    let mut best = (0.0, 0);
    for i in 1..path.len() {
        let dx = path[i]
            .iter()
            .zip(&path[i - 1])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
            .max(1e-9);
        let rate = (sigmas[i] - sigmas[i - 1]).abs() / dx;
        if rate.is_nan() {
            return Err(Error::EstimatorFault(format!("undefined change rate at step {i}")));
        }
        if rate > best.0 {
            best = (rate, i);
        }
    }
    Ok(best)
}

/// Metric per group and the largest pairwise absolute difference.
pub fn group_disparity(
    est: &Estimator,
    metric: &MetricKind,
    data: &Dataset,
    min_group: usize,
    seed: u64,
) -> Result<(f64, BTreeMap<String, f64>)> {
    let mut groups: BTreeMap<String, Vec<synthdata::Row>> = BTreeMap::new();
    for (i, r) in data.rows.iter().enumerate() {
        let g = r
            .group
            .clone()
            .ok_or_else(|| Error::Config(format!("row {i} has no group label")))?;
        groups.entry(g).or_default().push(r.clone());
    }
    if groups.len() < 2 {
        return Err(Error::Domain(format!("need at least two groups, found {}", groups.len())));
    }
    if let Some((g, rows)) = groups.iter().find(|(_, rows)| rows.len() < min_group) {
        return Err(Error::Domain(format!(
            "insufficient statistics: group '{g}' has {} rows, minimum is {min_group}",
            rows.len()
        )));
    }
    let mut values = BTreeMap::new();
    for (g, rows) in groups {
        let d = Dataset { rows, provenance: Vec::new() };
        let preds = est.predict_dataset(&d, seed)?;
        values.insert(g, metric.evaluate(&preds, &d)?.value);
    }
    let lo = values.values().copied().fold(f64::INFINITY, f64::min);
    let hi = values.values().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((hi - lo, values))
}

/// Evaluates `metric` on every cell; the case passes only if all cells pass.
/// The reported value is the worst cell under the rule.
pub fn evaluate_cells(
    est: &Estimator,
    metric: &MetricKind,
    cells: &[(String, Dataset)],
    rule: Rule,
    seed: u64,
) -> (Outcome, f64, Vec<Value>, Option<String>) {
    let mut curve = Vec::new();
    let mut failed = Vec::new();
    let mut errored = Vec::new();
    let mut worst: Option<f64> = None;
    for (label, d) in cells {
        let r = if d.is_empty() {
            Err(Error::EmptySelection(format!("cell {label} is empty")))
        } else {
            est.predict_dataset(d, seed).and_then(|p| metric.evaluate(&p, d))
        };
        match r {
            Ok(m) => {
                let v = rule.judge(m.value);
                if v == Outcome::Fail {
                    failed.push(label.clone());
                }
                if v == Outcome::Error {
                    errored.push(label.clone());
                }
                worst = Some(match (worst, rule.comparator) {
                    (None, _) => m.value,
                    (Some(w), Comparator::Le) => w.max(m.value),
                    (Some(w), Comparator::Ge) => w.min(m.value),
                });
                curve.push(json!({"cell": label, "value": m.value, "n": m.n, "verdict": v}));
            }
            Err(e) => {
                errored.push(label.clone());
                curve.push(json!({"cell": label, "verdict": Outcome::Error, "error": e.to_string()}));
            }
        }
    }
    if !errored.is_empty() {
        let msg = format!("cells without a result: {}", errored.join(", "));
        return (Outcome::Error, worst.unwrap_or(f64::NAN), curve, Some(msg));
    }
    let verdict = if failed.is_empty() { Outcome::Pass } else { Outcome::Fail };
    let msg = (!failed.is_empty()).then(|| format!("failing cells: {}", failed.join(", ")));
    (verdict, worst.unwrap_or(f64::NAN), curve, msg)
}

fn attribution(est: &Estimator, x: &[f64], seed: u64) -> &'static str {
    match est.predict(x, input_seed(seed, x)) {
        Ok(p) => match (p.aleatoric, p.epistemic) {
            (Some(a), Some(e)) if a >= e => "aleatoric",
            (Some(_), Some(_)) => "epistemic",
            _ => "unattributed",
        },
        Err(_) => "unattributed",
    }
}

fn metric_of(case: &TestCase) -> Result<&MetricKind> {
    match &case.measure {
        Some(Measure::Metric(m)) => Ok(m),
        other => Err(Error::Config(format!(
            "{} cannot measure {}",
            case.level,
            other.as_ref().map_or("nothing", |m| m.name())
        ))),
    }
}

fn data_of(case: &TestCase) -> Result<&DataSpec> {
    case.data
        .as_ref()
        .ok_or_else(|| Error::Config(format!("case {} has no data", case.id)))
}

fn select(case: &TestCase, est: &Estimator, suite: &Suite) -> Result<Dataset> {
    datasel::select(&suite.base_dataset()?, data_of(case)?, Some(est), &suite.selection_context(suite.seed))
}

fn tradeoff_ratio(est: &Estimator, data: &Dataset, seed: u64) -> Result<f64> {
    let ys = data.targets();
    let preds = est.predict_dataset(data, seed)?;
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let bare = data
        .rows
        .iter()
        .map(|r| est.bare_mean(&r.x, input_seed(seed, &r.x)))
        .collect::<Result<Vec<_>>>()?;
    let (a, b) = (metrics::rmse(&means, &ys)?, metrics::rmse(&bare, &ys)?);
    if !(b > 0.0) {
        return Err(Error::Domain("bare model fits the data exactly; ratio undefined".into()));
    }
    Ok(a / b)
}

fn run_global(case: &TestCase, est: &Estimator, suite: &Suite) -> Result<Eval> {
    let mut ev = Eval::default();
    match case.measure.as_ref() {
        Some(Measure::ChangeRate { from, to, steps }) => {
            let path = straight_path(from, to, *steps);
            let (rate, step) = max_change_rate(est, &path, case.seed)?;
            ev.value = rate;
            put(&mut ev.measured, "max_rate", rate);
            ev.artifacts.insert("steepest_step".into(), json!({"from": path[step.max(1) - 1], "to": path[step.max(1)]}));
        }
        Some(Measure::TradeoffRatio) => {
            let data = select(case, est, suite)?;
            ev.value = tradeoff_ratio(est, &data, case.seed)?;
            put(&mut ev.measured, "tradeoff_ratio", ev.value);
            put(&mut ev.measured, "n", data.len() as f64);
        }
        Some(Measure::Metric(m)) => {
            let data = select(case, est, suite)?;
            let preds = est.predict_dataset(&data, case.seed)?;
            let r = m.evaluate(&preds, &data)?;
            ev.value = r.value;
            put(&mut ev.measured, m.name(), r.value);
            put(&mut ev.measured, "n", r.n as f64);
            for (k, v) in &r.extra {
                put(&mut ev.measured, k.clone(), *v);
            }
            if let Ok(t) = tradeoff_ratio(est, &data, case.seed) {
                put(&mut ev.measured, "tradeoff_ratio", t);
            }
            for s in &suite.harness.shifts {
                let key = format!("shift.{}.{}", serde_json::to_value(s.corruption).expect("serialisable").as_str().unwrap_or(""), s.severity);
                let shifted = datasel::corrupt(&data, s.corruption, s.severity, case.seed)?;
                match est.predict_dataset(&shifted, case.seed).and_then(|p| m.evaluate(&p, &shifted)) {
                    Ok(r) => put(&mut ev.measured, key, r.value),
                    Err(e) => {
                        ev.artifacts.insert(key, Value::String(e.to_string()));
                    }
                }
            }
        }
        _ => return Err(Error::Config("manual criteria are not executed".into())),
    }
    Ok(ev)
}

fn run_subset(case: &TestCase, est: &Estimator, suite: &Suite) -> Result<Eval> {
    let m = metric_of(case)?;
    let rule = case.rule.ok_or_else(|| Error::Config("subset case without rule".into()))?;
    let mut ev = Eval::default();
    match data_of(case)? {
        DataSpec::SemanticSweep { generator, dim, grid, n } => {
            let g = suite.selection_context(suite.seed).generator(generator)?.clone();
            let cells: Vec<(String, Dataset)> = datasel::sweep(&g, dim, grid, *n, suite.seed)?
                .into_iter()
                .zip(grid)
                .map(|(d, v)| (format!("{dim}={v}"), d))
                .collect();
            let (verdict, worst, curve, msg) = evaluate_cells(est, m, &cells, rule, case.seed);
            ev.value = worst;
            ev.verdict = Some(verdict);
            ev.message = msg;
            put(&mut ev.measured, "worst_cell", worst);
            ev.artifacts.insert("cells".into(), Value::Array(curve));
        }
        DataSpec::SearchGenerated { search } => {
            let hits = datasel::run_search(Some(est), search, &suite.selection_context(suite.seed))?;
            let worst = hits.first().ok_or_else(|| Error::EmptySelection("search found nothing".into()))?;
            ev.value = worst.score;
            put(&mut ev.measured, "worst_score", worst.score);
            put(&mut ev.measured, "evaluations", hits.iter().map(|h| h.evaluations).sum::<usize>() as f64);
            let listing: Vec<Value> = hits
                .iter()
                .take(10)
                .map(|h| json!({"x": h.x, "score": h.score, "restart": h.restart, "attribution": attribution(est, &h.x, case.seed)}))
                .collect();
            ev.artifacts.insert("worst_inputs".into(), Value::Array(listing));
        }
        _ => {
            let data = select(case, est, suite)?;
            let preds = est.predict_dataset(&data, case.seed)?;
            let r = m.evaluate(&preds, &data)?;
            ev.value = r.value;
            put(&mut ev.measured, m.name(), r.value);
            put(&mut ev.measured, "n", r.n as f64);
            for (k, v) in &r.extra {
                put(&mut ev.measured, k.clone(), *v);
            }
        }
    }
    Ok(ev)
}

fn run_complementary(case: &TestCase, est: &Estimator, suite: &Suite) -> Result<Eval> {
    let m = metric_of(case)?;
    let data = select(case, est, suite)?;
    let (disparity, per_group) = group_disparity(est, m, &data, suite.harness.min_group_size, case.seed)?;
    let mut ev = Eval {
        value: disparity,
        ..Eval::default()
    };
    put(&mut ev.measured, "disparity", disparity);
    for (g, v) in &per_group {
        put(&mut ev.measured, format!("group.{g}"), *v);
    }
    Ok(ev)
}

fn technical_data(suite: &Suite, est: &Estimator) -> Result<Dataset> {
    match &suite.harness.technical_data {
        Some(d) => suite.resolve_data(d, Some(est)),
        None => {
            let g = suite.generators.values().next().ok_or_else(|| Error::Config("no generators".into()))?;
            synthdata::generate(g, suite.harness.technical_rows, suite.seed)
        }
    }
}

fn run_one(case: &TestCase, est: &Estimator, tech: &Dataset, suite: &Suite) -> TestResult {
    let start = Instant::now();
    let mut timing = BTreeMap::new();
    let eval = match (case.level, case.check) {
        (Level::Technical, Some(Check::OutputValidity)) => output_validity(est, tech, case.seed),
        (Level::Technical, Some(Check::InvalidInput)) => invalid_input(est, tech, case.seed),
        (Level::Technical, Some(Check::Determinism)) => determinism(est, tech, case.seed),
        (Level::Technical, Some(Check::Latency)) => latency(est, tech, case.seed, suite, &mut timing),
        (Level::Technical, None) => Err(Error::Config("technical case without a check".into())),
        (Level::Global, _) => run_global(case, est, suite),
        (Level::SubsetPointwise, _) => run_subset(case, est, suite),
        (Level::Complementary, _) => run_complementary(case, est, suite),
    };
    let mut result = match eval {
        Err(e) => TestResult::errored(case, &e),
        Ok(ev) => {
            let verdict = match (ev.verdict, case.rule) {
                (Some(v), _) => v,
                (None, Some(rule)) => rule.judge(ev.value),
                (None, None) => Outcome::Error,
            };
            TestResult {
                verdict,
                value: ev.value.is_finite().then_some(ev.value),
                measured: ev.measured,
                message: ev.message,
                artifacts: ev.artifacts,
                ..TestResult::blank(case, verdict)
            }
        }
    };
    if let (Some(rule), Some(m)) = (case.rule, &case.measure) {
        let what = match case.level {
            Level::Complementary => format!("group disparity of {}", m.name()),
            Level::SubsetPointwise if matches!(case.data, Some(DataSpec::SemanticSweep { .. })) => {
                format!("{} in every cell", m.name())
            }
            Level::SubsetPointwise if matches!(case.data, Some(DataSpec::SearchGenerated { .. })) => {
                format!("worst searched {}", m.name())
            }
            _ => m.name().to_string(),
        };
        result.rule = Some(rule);
        result.subject = Some(what);
    }
    result.timing = timing;
    result.runtime_s = start.elapsed().as_secs_f64();
    result
}

/// Executes the suite level by level, cases within a level in parallel.
/// With fail-fast, any technical result other than pass marks every later
/// case skipped. Results are sorted by id.
pub fn run_suite(suite: &Suite, est: &Estimator) -> Result<Vec<TestResult>> {
    let cases = build_cases(suite)?;
    let tech = technical_data(suite, est);
    let mut results = Vec::with_capacity(cases.len());
    let mut abort: Option<String> = None;
    for level in Level::ALL {
        let here: Vec<&TestCase> = cases.iter().filter(|c| c.level == level).collect();
        if let Some(reason) = &abort {
            results.extend(here.iter().map(|c| TestResult::skipped(c, reason)));
            continue;
        }
        let run = |c: &&TestCase| match &tech {
            Ok(t) => run_one(c, est, t, suite),
            Err(e) if c.level == Level::Technical => TestResult::errored(c, e),
            Err(_) => run_one(c, est, &Dataset::default(), suite),
        };
        let mut level_results: Vec<TestResult> = if level == Level::Technical {
            // sequential, so the latency check is not disturbed by other cases
            here.iter().map(run).collect()
        } else {
            here.par_iter().map(run).collect()
        };
        log::info!(
            "{level}: {} cases, {} passed",
            level_results.len(),
            level_results.iter().filter(|r| r.verdict == Outcome::Pass).count()
        );
        if level == Level::Technical && suite.fail_fast {
            if let Some(bad) = level_results.iter().find(|r| r.verdict != Outcome::Pass) {
                abort = Some(format!("skipped: technical test {} did not pass (fail-fast)", bad.id));
            }
        }
        results.append(&mut level_results);
    }
    results.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::Fault;
    use crate::synthdata::{Generator, Row};
    use std::path::PathBuf;

    fn suite_with(estimator: Value, criteria: Value) -> Suite {
        Suite::from_value(
            json!({
                "suite_id": "unit",
                "seed": 5,
                "generators": {"canon": serde_json::to_value(Generator::canonical()).unwrap()},
                "data": {"id": {"kind":"full_odd","generator":"canon","n":400}},
                "estimator": estimator,
                "criteria": criteria,
            }),
            PathBuf::new(),
        )
        .unwrap()
    }

    fn oracle_suite() -> Suite {
        suite_with(json!({"kind":"oracle","generator":"canon"}), json!([]))
    }

    fn by_id<'a>(rs: &'a [TestResult], id: &str) -> &'a TestResult {
        rs.iter().find(|r| r.id == id).unwrap()
    }

    #[test]
    fn healthy_technical_checks_pass() {
        let s = oracle_suite();
        let est = s.build_estimator().unwrap();
        let data = synthdata::generate(&Generator::canonical(), 100, 1).unwrap();
        for r in run_technical(&est, &data, &s) {
            assert_eq!(r.verdict, Outcome::Pass, "{r:?}");
        }
    }

    #[test]
    fn planted_faults_fail_technical_checks() {
        let s = oracle_suite();
        let base = s.build_estimator().unwrap();
        let data = synthdata::generate(&Generator::canonical(), 50, 1).unwrap();
        let neg = Estimator::faulty(base.clone(), Fault::NegativeSigma);
        let rs = run_technical(&neg, &data, &s);
        assert_eq!(by_id(&rs, "technical.output_validity").verdict, Outcome::Fail);
        let noisy = Estimator::faulty(base, Fault::Unseeded);
        let rs = run_technical(&noisy, &data, &s);
        assert_eq!(by_id(&rs, "technical.determinism").verdict, Outcome::Fail);
        assert_eq!(by_id(&rs, "technical.output_validity").verdict, Outcome::Pass);
    }

    #[test]
    fn change_rate_cases() {
        let oracle = Estimator::oracle(Generator::canonical(), 1.0).unwrap();
        let flat = vec![vec![1.0]; 5];
        assert_eq!(max_change_rate(&oracle, &flat, 0).unwrap().0, 0.0);
        // sigma = 0.1 + 0.2|x| has slope 0.2
        let path = straight_path(&[0.5], &[2.5], 20);
        assert!((max_change_rate(&oracle, &path, 0).unwrap().0 - 0.2).abs() < 1e-9);
        let rule = Rule {
            comparator: Comparator::Le,
            threshold: 0.5,
        };
        let est = Estimator::oracle(
            Generator {
                noise: synthdata::NoiseFn::Affine {
                    intercept: 0.0,
                    slope: 1.0,
                },
                ..Generator::canonical()
            },
            1.0,
        )
        .unwrap();
        let unit = straight_path(&[0.0], &[3.0], 3);
        let (rate, _) = max_change_rate(&est, &unit, 0).unwrap();
        assert!((rate - 1.0).abs() < 1e-12);
        assert_eq!(rule.judge(rate), Outcome::Fail);
    }

    #[test]
    fn disparity_cases() {
        let est = Estimator::oracle(Generator::canonical(), 1.0).unwrap();
        let base = synthdata::generate(&Generator::canonical(), 200, 3).unwrap();
        let mut rows = Vec::new();
        for g in ["a", "b"] {
            for r in &base.rows {
                rows.push(Row {
                    group: Some(g.into()),
                    ..r.clone()
                });
            }
        }
        let twin = Dataset::new(rows).unwrap();
        let (d, groups) = group_disparity(&est, &MetricKind::NllMean, &twin, 30, 0).unwrap();
        assert_eq!(d, 0.0);
        assert_eq!(groups.len(), 2);

        let small = Dataset::new(
            twin.rows
                .iter()
                .take(3)
                .cloned()
                .chain(twin.rows.iter().skip(200).take(50).cloned())
                .collect(),
        )
        .unwrap();
        assert!(matches!(
            group_disparity(&est, &MetricKind::NllMean, &small, 30, 0),
            Err(Error::Domain(m)) if m.contains("insufficient")
        ));
    }

    #[test]
    fn broken_cell_is_named() {
        let est = Estimator::oracle(Generator::canonical(), 1.0).unwrap();
        let g = Generator::canonical();
        let mut cells: Vec<(String, Dataset)> = datasel::sweep(&g, "noise_scale", &[1.0, 1.0, 1.0], 500, 2)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, d)| (format!("cell{i}"), d))
            .collect();
        // shuffle targets of the middle cell by reversing them
        let ys: Vec<f64> = cells[1].1.rows.iter().rev().map(|r| r.y).collect();
        for (r, y) in cells[1].1.rows.iter_mut().zip(ys) {
            r.y = y;
        }
        let rule = Rule {
            comparator: Comparator::Le,
            threshold: 0.1,
        };
        let (v, _, curve, msg) = evaluate_cells(&est, &MetricKind::EceRegression { levels: 9 }, &cells, rule, 0);
        assert_eq!(v, Outcome::Fail);
        assert_eq!(msg.unwrap(), "failing cells: cell1");
        assert_eq!(curve.len(), 3);
    }

    #[test]
    fn tradeoff_of_identical_model_is_one() {
        let s = suite_with(
            json!({"kind":"parametric","model":{"train":{"spec":{"widths":[1,8,1],"head":"gaussian"},
                "data":"id","config":{"learning_rate":0.01,"epochs":5,"batch_size":32,"loss":"gaussian_nll"}}}}),
            json!([{"id":"trade","category":"minimal_tradeoffs","data":"id",
                    "measure":{"metric":"tradeoff_ratio"},"comparator":"le","threshold":1.0}]),
        );
        let est = s.build_estimator().unwrap();
        let rs = run_suite(&s, &est).unwrap();
        let r = by_id(&rs, "trade@global");
        assert_eq!(r.value, Some(1.0));
        assert_eq!(r.verdict, Outcome::Pass);
    }

    #[test]
    fn fail_fast_skips_later_levels() {
        let mut s = suite_with(
            json!({"kind":"faulty","fault":"negative_sigma","inner":{"kind":"oracle","generator":"canon"}}),
            json!([{"id":"cal","category":"calibration","data":"id",
                    "measure":{"metric":"ece_regression"},"comparator":"le","threshold":0.1}]),
        );
        s.fail_fast = true;
        let est = s.build_estimator().unwrap();
        let rs = run_suite(&s, &est).unwrap();
        assert_eq!(rs.len(), 5);
        assert_eq!(by_id(&rs, "cal@global").verdict, Outcome::Skipped);
        assert_eq!(by_id(&rs, "technical.output_validity").verdict, Outcome::Fail);
        s.fail_fast = false;
        let rs = run_suite(&s, &est).unwrap();
        assert_ne!(by_id(&rs, "cal@global").verdict, Outcome::Skipped);
    }

    #[test]
    fn empty_selection_never_passes() {
        let s = suite_with(
            json!({"kind":"oracle","generator":"canon"}),
            json!([{"id":"far","category":"calibration","test_depth":["subset_pointwise"],
                    "data":{"kind":"semantic_slice","source":{"kind":"full_odd","generator":"canon","n":50},
                            "dim":"shift","range":[5,6]},
                    "measure":{"metric":"ece_regression"},"comparator":"le","threshold":1.0}]),
        );
        let est = s.build_estimator().unwrap();
        let rs = run_suite(&s, &est).unwrap();
        let r = by_id(&rs, "far@subset_pointwise");
        assert_eq!(r.verdict, Outcome::Error);
        assert!(r.message.as_ref().unwrap().contains("empty selection"));
    }

    #[test]
    fn case_seeds_depend_only_on_id() {
        assert_eq!(case_seed(1, "a@global"), case_seed(1, "a@global"));
        assert_ne!(case_seed(1, "a@global"), case_seed(1, "b@global"));
    }
}
