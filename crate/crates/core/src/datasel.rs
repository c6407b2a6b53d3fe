//! Turning data specifications into concrete evaluation sets.
//!
//! Covers the four selection strategies of the test hierarchy (whole-domain
//! sampling, quantile slices of point scores, semantic slices and sweeps,
//! curated critical sets, and uncertainty-driven search) plus input
//! corruptions for distribution-shift tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::{input_seed, Estimator};
use crate::metrics::{self, ScoreKind};
use crate::odd::{Domain, OddSpec};
use crate::rng::{self, purpose};
use crate::synthdata::{self, Dataset, Generator, Row, SemanticValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    /// Adds `N(0, severity^2)` to every feature.
    GaussianNoise,
    /// Multiplies every feature by `1 + severity`.
    FeatureScale,
    /// Adds `severity` to every feature.
    ConstantOffset,
    /// Zeroes each feature with probability `min(severity, 1)`.
    FeatureDropout,
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown corruption '{s}'")))
    }
}

/// Applies a seeded corruption to the features; targets and ground truth
/// stay untouched.
pub fn corrupt(data: &Dataset, kind: Corruption, severity: f64, seed: u64) -> Result<Dataset> {
    if !(severity >= 0.0) || !severity.is_finite() {
        return Err(Error::Config(format!("severity must be finite and >= 0, got {severity}")));
    }
    let mut out = data.clone();
    for (i, row) in out.rows.iter_mut().enumerate() {
        match kind {
            Corruption::GaussianNoise => {
                let mut rng = rng::stream(seed, &[i as u64, purpose::CORRUPT]);
                for v in &mut row.x {
                    *v += severity * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Corruption::FeatureScale => row.x.iter_mut().for_each(|v| *v *= 1.0 + severity),
            Corruption::ConstantOffset => row.x.iter_mut().for_each(|v| *v += severity),
            Corruption::FeatureDropout => {
                let p = severity.min(1.0);
                let mut rng = rng::stream(seed, &[i as u64, purpose::CORRUPT]);
                for v in &mut row.x {
                    if rng.random::<f64>() < p {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    Ok(out.with_provenance(format!("corrupt:{kind:?}:{severity}")))
}

/// One dataset per grid value of generator parameter `dim`, everything else
/// fixed. All cells share `seed`, so the underlying draws coincide.
pub fn sweep(g: &Generator, dim: &str, grid: &[f64], n: usize, seed: u64) -> Result<Vec<Dataset>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Config("sweep grid must be sorted".into()));
    }
    if g.params.get(dim).is_none() {
        return Err(Error::Config(format!("'{dim}' is not a parameter of the generator")));
    }
    grid.iter()
        .map(|v| {
            let mut cell = g.clone();
            cell.params.set(dim, *v)?;
            Ok(synthdata::generate(&cell, n, seed)?.with_provenance(format!("sweep:{dim}={v}")))
        })
        .collect()
}

/// Objective maximised by [`search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SearchObjective {
    /// Expected point score of the estimator under the generator's noise.
    Estimator { score: ScoreKind },
    /// `peak - |x - center|^2`; an analytic stand-in with a known maximiser.
    ToyQuadratic { center: Vec<f64>, peak: f64 },
}

fn default_shrink() -> f64 {
    0.5
}
fn default_min_step() -> f64 {
    1e-7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub objective: SearchObjective,
    /// Feature box; derived from the generator and ODD when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
    /// Generator providing ground truth for estimator objectives.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    pub restarts: usize,
    pub steps: usize,
    pub initial_step: f64,
    #[serde(default = "default_shrink")]
    pub shrink: f64,
    /// Stop once the step falls below this fraction of the narrowest box side.
    #[serde(default = "default_min_step")]
    pub min_step_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("search needs at least one restart".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::Config("initial search step must be > 0".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Config("shrink factor must lie in (0, 1)".into()));
        }
        if !(self.min_step_fraction > 0.0) {
            return Err(Error::Config("min_step_fraction must be > 0".into()));
        }
        Ok(())
    }
}

/// Something [`search`] can maximise.
pub trait PointScorer: Sync {
    fn width(&self) -> usize;
    fn score(&self, x: &[f64]) -> Result<f64>;
}

pub struct ToyQuadratic {
    pub center: Vec<f64>,
    pub peak: f64,
}

impl PointScorer for ToyQuadratic {
    fn width(&self) -> usize {
        self.center.len()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        Ok(self.peak - x.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum::<f64>())
    }
}

/// Expected point score of an estimator when `y ~ N(f(x), sigma_gt(x)^2)`.
///
/// Expectations are taken in closed form so the objective is noise-free:
/// `E[nll] = ln s + ((mu - f)^2 + sigma_gt^2) / (2 s^2) + ln(2 pi) / 2`, and
/// `E|r|` is the mean of a folded normal.
pub struct EstimatorScorer<'a> {
    pub estimator: &'a Estimator,
    pub truth: &'a Generator,
    pub score: ScoreKind,
    pub seed: u64,
}

impl PointScorer for EstimatorScorer<'_> {
    fn width(&self) -> usize {
        self.estimator.input_width()
    }

    fn score(&self, x: &[f64]) -> Result<f64> {
        let p = self.estimator.predict(x, input_seed(self.seed, x))?;
        let f = self.truth.mean_at(x);
        let gt = self.truth.sigma_at(x).max(0.0);
        match self.score {
            ScoreKind::Sigma => Ok(p.sigma),
            _ if !(p.sigma > 0.0) => Err(Error::Domain(format!("sigma {} <= 0 at {x:?}", p.sigma))),
            ScoreKind::Nll => {
                let bias2 = (p.mean - f).powi(2);
                Ok(p.sigma.ln() + (bias2 + gt * gt) / (2.0 * p.sigma * p.sigma) + 0.5 * (2.0 * std::f64::consts::PI).ln())
            }
            ScoreKind::AbsNormalizedResidual => {
                let m = (f - p.mean) / p.sigma;
                let s = gt / p.sigma;
                if s == 0.0 {
                    return Ok(m.abs());
                }
                let normal = Normal::standard();
                Ok(s * (2.0 / std::f64::consts::PI).sqrt() * (-m * m / (2.0 * s * s)).exp()
                    + m * (1.0 - 2.0 * normal.cdf(-m / s)))
            }
        }
    }
}

/// A local optimum found by one restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub x: Vec<f64>,
    pub score: f64,
    pub restart: usize,
    pub evaluations: usize,
    /// Best score after the start and after every step.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

fn check_box(bounds: &[[f64; 2]], width: usize) -> Result<()> {
    if bounds.len() != width {
        return Err(Error::Config(format!(
            "search box has {} sides for {} features",
            bounds.len(),
            width
        )));
    }
    if bounds.iter().any(|[lo, hi]| !lo.is_finite() || !hi.is_finite() || !(lo < hi)) {
        return Err(Error::Config("search box must be bounded with low < high".into()));
    }
    Ok(())
}

/// Coordinate pattern search with shrinking steps from `restarts` seeded
/// random starts. Results are sorted worst-first (highest score first), ties
/// broken by coordinates.
pub fn search(scorer: &dyn PointScorer, bounds: &[[f64; 2]], cfg: &SearchConfig) -> Result<Vec<SearchHit>> {
    cfg.validate()?;
    check_box(bounds, scorer.width())?;
    let min_width = bounds.iter().map(|[lo, hi]| hi - lo).fold(f64::INFINITY, f64::min);
    let tol = cfg.min_step_fraction * min_width;
    let mut hits = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(cfg.seed, &[r as u64, purpose::SEARCH]);
            let mut x: Vec<f64> = bounds.iter().map(|[lo, hi]| lo + (hi - lo) * rng.random::<f64>()).collect();
            let mut best = scorer.score(&x)?;
            let mut evaluations = 1;
            let mut trace = vec![best];
            let mut step = cfg.initial_step;
            for _ in 0..cfg.steps {
                if step < tol {
                    break;
                }
                let mut candidate: Option<(Vec<f64>, f64)> = None;
                for j in 0..x.len() {
                    for dir in [-1.0, 1.0] {
                        let mut y = x.clone();
                        y[j] = (y[j] + dir * step).clamp(bounds[j][0], bounds[j][1]);
                        if y[j] == x[j] {
                            continue;
                        }
                        let s = scorer.score(&y)?;
                        evaluations += 1;
                        if s > candidate.as_ref().map_or(best, |c| c.1) {
                            candidate = Some((y, s));
                        }
                    }
                }
                match candidate {
                    Some((y, s)) => {
                        x = y;
                        best = s;
                    }
                    None => step *= cfg.shrink,
                }
                trace.push(best);
            }
            Ok(SearchHit {
                x,
                score: best,
                restart: r,
                evaluations,
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(|a, b| {
        b.score.total_cmp(&a.score).then_with(|| {
            a.x.iter()
                .zip(&b.x)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    Ok(hits)
}

/// Mean absolute change of the predicted sigma when feature `j` is replaced
/// by its dataset mean, for every `j`.
pub fn mask_sensitivity(est: &Estimator, data: &Dataset, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptySelection("mask sensitivity on an empty dataset".into()));
    }
    let means = data.feature_means();
    let base = data
        .rows
        .iter()
        .map(|r| est.predict(&r.x, input_seed(seed, &r.x)))
        .collect::<Result<Vec<_>>>()?;
    (0..means.len())
        .map(|j| {
            let mut total = 0.0;
            for (r, b) in data.rows.iter().zip(&base) {
                let mut x = r.x.clone();
                x[j] = means[j];
                // same seed as the unmasked pass
                total += (est.predict(&x, input_seed(seed, &r.x))?.sigma - b.sigma).abs();
            }
            Ok(total / data.len() as f64)
        })
        .collect()
}

/// A description of evaluation data, as written in suite files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Fresh samples covering the whole domain of a generator.
    FullOdd {
        generator: String,
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Rows whose semantic annotation `dim` lies in `range` (inclusive) or
    /// equals one of `values`.
    SemanticSlice {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<Box<DataSpec>>,
        dim: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        range: Option<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        values: Vec<SemanticValue>,
    },
    SemanticSweep {
        generator: String,
        dim: String,
        grid: Vec<f64>,
        n: usize,
    },
    /// Rows whose point score lies between the `q_lo` and `q_hi` quantiles.
    QuantileSlice {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<Box<DataSpec>>,
        score: ScoreKind,
        q_lo: f64,
        q_hi: f64,
    },
    Curated { path: PathBuf },
    Shifted {
        base: Box<DataSpec>,
        corruption: Corruption,
        severity: f64,
    },
    SearchGenerated { search: SearchConfig },
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataSpec::FullOdd { n, .. } | DataSpec::SemanticSweep { n, .. } if *n == 0 => {
                Err(Error::Config("data spec asks for zero rows".into()))
            }
            DataSpec::SemanticSweep { grid, .. } if grid.is_empty() => Err(Error::Config("sweep grid is empty".into())),
            DataSpec::SemanticSlice { range, values, source, .. } => {
                if range.is_none() && values.is_empty() {
                    return Err(Error::Config("semantic slice needs a range or values".into()));
                }
                if let Some([lo, hi]) = range {
                    if !(lo <= hi) {
                        return Err(Error::Config("semantic slice range is inverted".into()));
                    }
                }
                source.as_ref().map_or(Ok(()), |s| s.validate())
            }
            DataSpec::QuantileSlice { q_lo, q_hi, source, .. } => {
                if !(0.0 <= *q_lo && q_lo < q_hi && *q_hi <= 1.0) {
                    return Err(Error::Config(format!("quantile slice [{q_lo}, {q_hi}] invalid")));
                }
                source.as_ref().map_or(Ok(()), |s| s.validate())
            }
            DataSpec::Shifted { base, severity, .. } => {
                if !(*severity >= 0.0) {
                    return Err(Error::Config("shift severity must be >= 0".into()));
                }
                base.validate()
            }
            DataSpec::SearchGenerated { search } => search.validate(),
            _ => Ok(()),
        }
    }

    /// Short label for reports.
    pub fn label(&self) -> String {
        match self {
            DataSpec::FullOdd { generator, n, .. } => format!("full_odd({generator}, n={n})"),
            DataSpec::SemanticSlice { dim, range, values, .. } => match range {
                Some([lo, hi]) => format!("semantic_slice({dim} in [{lo}, {hi}])"),
                None => format!(
                    "semantic_slice({dim} in {{{}}})",
                    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
                ),
            },
            DataSpec::SemanticSweep { dim, grid, .. } => format!("semantic_sweep({dim}, {} cells)", grid.len()),
            DataSpec::QuantileSlice { score, q_lo, q_hi, .. } => {
                format!("quantile_slice({score:?}, [{q_lo}, {q_hi}])")
            }
            DataSpec::Curated { path } => format!("curated({})", path.display()),
            DataSpec::Shifted { base, corruption, severity } => {
                format!("shifted({}, {corruption:?}, {severity})", base.label())
            }
            DataSpec::SearchGenerated { .. } => "search_generated".into(),
        }
    }
}

/// Everything a [`DataSpec`] may refer to.
pub struct SelectionContext<'a> {
    pub generators: &'a BTreeMap<String, Generator>,
    pub odd: Option<&'a OddSpec>,
    /// Directory relative paths are resolved against.
    pub base_dir: &'a Path,
    pub seed: u64,
}

impl SelectionContext<'_> {
    pub fn generator(&self, name: &str) -> Result<&Generator> {
        self.generators
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown generator '{name}'")))
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Feature box for a search: explicit bounds, or the truth generator's
    /// sampling box widened over the ODD's `shift` range when one exists.
    pub fn search_box(&self, cfg: &SearchConfig) -> Result<Vec<[f64; 2]>> {
        if let Some(b) = &cfg.bounds {
            return Ok(b.clone());
        }
        let name = cfg
            .generator
            .as_ref()
            .ok_or_else(|| Error::Config("search needs explicit bounds or a generator".into()))?;
        let g = self.generator(name)?;
        let mut b: Vec<[f64; 2]> = g.feature_box().into_iter().map(|(lo, hi)| [lo, hi]).collect();
        if let Some(Domain::Continuous { min, max }) = self.odd.and_then(|o| o.dimension("shift")).map(|d| &d.domain) {
            b[0][0] += min - g.params.shift;
            b[0][1] += max - g.params.shift;
        }
        Ok(b)
    }
}

fn semantic_match(row: &Row, dim: &str, range: &Option<[f64; 2]>, values: &[SemanticValue]) -> Result<bool> {
    let v = row
        .semantics
        .get(dim)
        .ok_or_else(|| Error::Config(format!("row lacks semantic annotation '{dim}'")))?;
    if let (Some([lo, hi]), Some(x)) = (range, v.as_number()) {
        if *lo <= x && x <= *hi {
            return Ok(true);
        }
    }
    Ok(values.contains(v))
}

/// Runs `cfg` against an estimator (or the analytic toy objective).
pub fn run_search(est: Option<&Estimator>, cfg: &SearchConfig, ctx: &SelectionContext) -> Result<Vec<SearchHit>> {
    let bounds = ctx.search_box(cfg)?;
    match &cfg.objective {
        SearchObjective::ToyQuadratic { center, peak } => search(
            &ToyQuadratic {
                center: center.clone(),
                peak: *peak,
            },
            &bounds,
            cfg,
        ),
        SearchObjective::Estimator { score } => {
            let est = est.ok_or_else(|| Error::Config("estimator objective without an estimator".into()))?;
            let name = cfg
                .generator
                .as_ref()
                .ok_or_else(|| Error::Config("estimator objective needs a ground-truth generator".into()))?;
            let scorer = EstimatorScorer {
                estimator: est,
                truth: ctx.generator(name)?,
                score: *score,
                seed: cfg.seed,
            };
            search(&scorer, &bounds, cfg)
        }
    }
}

/// Resolves `spec` to a dataset. Slicing specs without their own `source`
/// operate on `base`.
pub fn select(base: &Dataset, spec: &DataSpec, est: Option<&Estimator>, ctx: &SelectionContext) -> Result<Dataset> {
    spec.validate()?;
    let source = |s: &Option<Box<DataSpec>>| -> Result<Dataset> {
        match s {
            Some(inner) => select(base, inner, est, ctx),
            None => Ok(base.clone()),
        }
    };
    let out = match spec {
        DataSpec::FullOdd { generator, n, seed } => {
            synthdata::generate(ctx.generator(generator)?, *n, seed.unwrap_or(ctx.seed))?
        }
        DataSpec::SemanticSlice { source: s, dim, range, values } => {
            let src = source(s)?;
            let mut rows = Vec::new();
            for r in src.rows {
                if semantic_match(&r, dim, range, values)? {
                    rows.push(r);
                }
            }
            Dataset { rows, provenance: src.provenance }
        }
        DataSpec::SemanticSweep { generator, dim, grid, n } => {
            let cells = sweep(ctx.generator(generator)?, dim, grid, *n, ctx.seed)?;
            Dataset {
                rows: cells.into_iter().flat_map(|c| c.rows).collect(),
                provenance: Vec::new(),
            }
        }
        DataSpec::QuantileSlice { source: s, score, q_lo, q_hi } => {
            let est = est.ok_or_else(|| Error::Config("quantile slice needs an estimator to score points".into()))?;
            let src = source(s)?;
            if src.is_empty() {
                return Err(Error::EmptySelection("quantile slice of an empty set".into()));
            }
            let preds = est.predict_dataset(&src, ctx.seed)?;
            let scores: Vec<f64> = metrics::point_scores(&preds, &src.targets(), *score)?
                .iter()
                .map(|p| p.value)
                .collect();
            let lo = metrics::quantile(&scores, *q_lo)?;
            let hi = metrics::quantile(&scores, *q_hi)?;
            let rows = src
                .rows
                .into_iter()
                .zip(&scores)
                .filter(|(_, s)| lo <= **s && **s <= hi)
                .map(|(r, _)| r)
                .collect();
            Dataset { rows, provenance: src.provenance }
        }
        DataSpec::Curated { path } => synthdata::load_curated(ctx.resolve_path(path))?,
        DataSpec::Shifted { base: inner, corruption, severity } => {
            let src = select(base, inner, est, ctx)?;
            corrupt(&src, *corruption, *severity, ctx.seed)?
        }
        DataSpec::SearchGenerated { search: cfg } => {
            let hits = run_search(est, cfg, ctx)?;
            let truth = cfg.generator.as_ref().map(|g| ctx.generator(g)).transpose()?;
            let rows = hits
                .iter()
                .map(|h| {
                    let mut row = Row::new(h.x.clone(), 0.0);
                    if let Some(g) = truth {
                        row.y = g.mean_at(&h.x);
                        row.mean_gt = Some(row.y);
                        row.sigma_gt = Some(g.sigma_at(&h.x).max(0.0));
                    }
                    row
                })
                .collect();
            Dataset { rows, provenance: Vec::new() }
        }
    };
    if out.is_empty() {
        return Err(Error::EmptySelection(format!("{} selected no rows", spec.label())));
    }
    Ok(out.with_provenance(spec.label()))
}
