//! Uncertainty-quality measures.
//!
//! Everything here is a pure function over predictions and targets. Point
//! scores follow the convention "higher is worse" so tail measures such as
//! [`etl`] look at the largest values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimators::UncertaintyPrediction;
use crate::nn::gaussian_nll_loss;
use crate::synthdata::Dataset;

/// Per-point score used by tail and quantile measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Nll,
    AbsNormalizedResidual,
    /// The predicted total sigma itself.
    Sigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointScore {
    pub kind: ScoreKind,
    pub value: f64,
    pub index: usize,
}

/// `(y - mu) / sigma`.
pub fn normalized_residual(p: &UncertaintyPrediction, y: f64) -> f64 {
    (y - p.mean) / p.sigma
}

fn check_aligned(preds: &[UncertaintyPrediction], ys: &[f64]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Domain("metric over an empty set".into()));
    }
    if preds.len() != ys.len() {
        return Err(Error::Domain(format!(
            "{} predictions but {} targets",
            preds.len(),
            ys.len()
        )));
    }
    if let Some(i) = preds.iter().position(|p| !(p.sigma > 0.0)) {
        return Err(Error::Domain(format!("sigma {} <= 0 at index {i}", preds[i].sigma)));
    }
    Ok(())
}

pub fn point_score(kind: ScoreKind, p: &UncertaintyPrediction, y: f64) -> Result<f64> {
    match kind {
        ScoreKind::Nll => gaussian_nll_loss(p.mean, p.sigma, y),
        ScoreKind::AbsNormalizedResidual => {
            if !(p.sigma > 0.0) {
                return Err(Error::Domain(format!("sigma {} <= 0", p.sigma)));
            }
            Ok(normalized_residual(p, y).abs())
        }
        ScoreKind::Sigma => Ok(p.sigma),
    }
}

pub fn point_scores(preds: &[UncertaintyPrediction], ys: &[f64], kind: ScoreKind) -> Result<Vec<PointScore>> {
    check_aligned(preds, ys)?;
    preds
        .iter()
        .zip(ys)
        .enumerate()
        .map(|(index, (p, y))| {
            Ok(PointScore {
                kind,
                value: point_score(kind, p, *y)?,
                index,
            })
        })
        .collect()
}

pub fn nll_mean(preds: &[UncertaintyPrediction], ys: &[f64]) -> Result<f64> {
    let s = point_scores(preds, ys, ScoreKind::Nll)?;
    Ok(s.iter().map(|p| p.value).sum::<f64>() / s.len() as f64)
}

pub fn rmse(means: &[f64], ys: &[f64]) -> Result<f64> {
    if means.is_empty() || means.len() != ys.len() {
        return Err(Error::Domain("rmse needs non-empty aligned inputs".into()));
    }
    let mse = means.iter().zip(ys).map(|(m, y)| (m - y).powi(2)).sum::<f64>() / means.len() as f64;
    Ok(mse.sqrt())
}

/// Coverage curve of central Gaussian intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionCalibration {
    /// Mean absolute gap between expected and empirical coverage.
    pub ece: f64,
    /// Largest single gap.
    pub mce: f64,
    pub expected: Vec<f64>,
    pub observed: Vec<f64>,
}

/// Evaluates `levels` expected coverages `p_j = j / (levels + 1)`; a target
/// is covered when `|y - mu| <= z_{(1+p)/2} sigma`.
pub fn regression_calibration(
    preds: &[UncertaintyPrediction],
    ys: &[f64],
    levels: usize,
) -> Result<RegressionCalibration> {
    check_aligned(preds, ys)?;
    if levels < 2 {
        return Err(Error::Domain(format!("need at least 2 coverage levels, got {levels}")));
    }
    let normal = Normal::standard();
    let abs_r: Vec<f64> = preds.iter().zip(ys).map(|(p, y)| normalized_residual(p, *y).abs()).collect();
    let n = abs_r.len() as f64;
    let expected: Vec<f64> = (1..=levels).map(|j| j as f64 / (levels + 1) as f64).collect();
    let observed: Vec<f64> = expected
        .iter()
        .map(|p| {
            let z = normal.inverse_cdf((1.0 + p) / 2.0);
            abs_r.iter().filter(|r| **r <= z).count() as f64 / n
        })
        .collect();
    let gaps: Vec<f64> = expected.iter().zip(&observed).map(|(p, c)| (c - p).abs()).collect();
    Ok(RegressionCalibration {
        ece: gaps.iter().sum::<f64>() / levels as f64,
        mce: gaps.iter().cloned().fold(0.0, f64::max),
        expected,
        observed,
    })
}

pub fn ece_regression(preds: &[UncertaintyPrediction], ys: &[f64], levels: usize) -> Result<f64> {
    Ok(regression_calibration(preds, ys, levels)?.ece)
}

/// Binned classification ECE over equal-width confidence bins.
pub fn ece_classification(confidences: &[f64], correct: &[bool], bins: usize) -> Result<f64> {
    if confidences.is_empty() || confidences.len() != correct.len() {
        return Err(Error::Domain("ece needs non-empty aligned inputs".into()));
    }
    if bins < 2 {
        return Err(Error::Domain(format!("need at least 2 bins, got {bins}")));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    for (c, ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        hits[b] += *ok as usize;
    }
    let n = confidences.len() as f64;
    Ok((0..bins)
        .filter(|b| count[*b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            nb / n * (hits[b] as f64 / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

/// Number of tail elements for level `alpha`: `ceil((1 - alpha) n)`, at least one.
pub fn tail_count(n: usize, alpha: f64) -> usize {
    // guard against (1 - 0.95) * 1000 = 50.000000000000043
    let k = ((1.0 - alpha) * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Expected tail loss: mean of the `ceil((1 - alpha) n)` largest scores.
pub fn etl(scores: &[f64], alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} not in [0, 1)")));
    }
    if scores.is_empty() {
        return Err(Error::Domain("etl over an empty set".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = tail_count(sorted.len(), alpha);
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

/// Linear-interpolation quantile between order statistics (type 7).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, q)
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Domain("quantile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("quantile level {q} not in [0, 1]")));
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// `sum_i (mu_i - mu_gt_i)^2 + (sigma_i - sigma_gt_i)^2`.
pub fn local_wasserstein(
    preds: &[UncertaintyPrediction],
    gt_means: &[f64],
    gt_sigmas: &[Option<f64>],
) -> Result<f64> {
    if preds.len() != gt_means.len() || preds.len() != gt_sigmas.len() {
        return Err(Error::Domain("local_wasserstein needs aligned inputs".into()));
    }
    preds
        .iter()
        .zip(gt_means)
        .zip(gt_sigmas)
        .enumerate()
        .map(|(i, ((p, m), s))| {
            let s = s.ok_or_else(|| Error::Capability(format!("no ground-truth sigma at index {i}")))?;
            Ok((p.mean - m).powi(2) + (p.sigma - s).powi(2))
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthStats {
    pub mean: f64,
    pub variance: f64,
    /// `(level, value)` pairs.
    pub quantiles: Vec<(f64, f64)>,
}

pub const DEFAULT_WIDTH_QUANTILES: [f64; 5] = [0.01, 0.25, 0.5, 0.75, 0.99];

/// Population statistics of the predicted total sigma.
pub fn width_stats(preds: &[UncertaintyPrediction], levels: &[f64]) -> Result<WidthStats> {
    if preds.is_empty() {
        return Err(Error::Domain("width statistics of an empty set".into()));
    }
    let mut s: Vec<f64> = preds.iter().map(|p| p.sigma).collect();
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let variance = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    s.sort_by(f64::total_cmp);
    let quantiles = levels
        .iter()
        .map(|q| Ok((*q, quantile_sorted(&s, *q)?)))
        .collect::<Result<_>>()?;
    Ok(WidthStats {
        mean,
        variance,
        quantiles,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthStat {
    Mean,
    Variance,
    Quantile,
}

fn default_levels() -> usize {
    9
}
fn default_bins() -> usize {
    10
}
fn default_width_stat() -> WidthStat {
    WidthStat::Mean
}

/// A set-level measure with its parameters, as written in suite files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricKind {
    NllMean,
    EceRegression {
        #[serde(default = "default_levels")]
        levels: usize,
    },
    EceClassification {
        #[serde(default = "default_bins")]
        bins: usize,
    },
    Etl {
        alpha: f64,
        score: ScoreKind,
    },
    Quantile {
        q: f64,
        score: ScoreKind,
    },
    LocalWasserstein,
    Rmse,
    WidthStats {
        #[serde(default = "default_width_stat")]
        stat: WidthStat,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q: Option<f64>,
    },
}

/// Outcome of one measure, as it appears in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: String,
    pub params: serde_json::Value,
    pub value: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::NllMean => "nll_mean",
            MetricKind::EceRegression { .. } => "ece_regression",
            MetricKind::EceClassification { .. } => "ece_classification",
            MetricKind::Etl { .. } => "etl",
            MetricKind::Quantile { .. } => "quantile",
            MetricKind::LocalWasserstein => "local_wasserstein",
            MetricKind::Rmse => "rmse",
            MetricKind::WidthStats { .. } => "width_stats",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            MetricKind::EceRegression { levels } if *levels < 2 => bad(format!("levels {levels} < 2")),
            MetricKind::EceClassification { bins } if *bins < 2 => bad(format!("bins {bins} < 2")),
            MetricKind::Etl { alpha, .. } if !(0.0..1.0).contains(alpha) => bad(format!("alpha {alpha} not in [0, 1)")),
            MetricKind::Quantile { q, .. } if !(0.0..=1.0).contains(q) => bad(format!("q {q} not in [0, 1]")),
            MetricKind::WidthStats { stat, q } => match (stat, q) {
                (WidthStat::Quantile, Some(q)) if (0.0..=1.0).contains(q) => Ok(()),
                (WidthStat::Quantile, _) => bad("width_stats quantile needs q in [0, 1]".into()),
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Measures built on per-point scores, usable on search results.
    pub fn point_score_kind(&self) -> Option<ScoreKind> {
        match self {
            MetricKind::Etl { score, .. } | MetricKind::Quantile { score, .. } => Some(*score),
            _ => None,
        }
    }

    /// True when larger values mean worse uncertainty quality.
    pub fn lower_is_better(&self) -> bool {
        match self {
            MetricKind::Etl { score, .. } | MetricKind::Quantile { score, .. } => *score != ScoreKind::Sigma,
            MetricKind::WidthStats { .. } => false,
            _ => true,
        }
    }

    /// True when the measure cannot be negative.
    pub fn non_negative(&self) -> bool {
        match self {
            MetricKind::NllMean => false,
            MetricKind::Etl { score, .. } | MetricKind::Quantile { score, .. } => *score != ScoreKind::Nll,
            _ => true,
        }
    }

    fn params(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serialisable");
        if let Some(o) = v.as_object_mut() {
            o.remove("metric");
        }
        v
    }

    /// Evaluates the measure on predictions for `data`.
    pub fn evaluate(&self, preds: &[UncertaintyPrediction], data: &Dataset) -> Result<MetricResult> {
        self.validate()?;
        let ys = data.targets();
        if preds.len() != ys.len() {
            return Err(Error::Domain("predictions and dataset differ in length".into()));
        }
        if preds.is_empty() {
            return Err(Error::EmptySelection(format!("{} on an empty set", self.name())));
        }
        let mut extra = BTreeMap::new();
        let value = match self {
            MetricKind::NllMean => nll_mean(preds, &ys)?,
            MetricKind::EceRegression { levels } => {
                let c = regression_calibration(preds, &ys, *levels)?;
                extra.insert("mce".to_string(), c.mce);
                c.ece
            }
            MetricKind::EceClassification { .. } => {
                return Err(Error::Capability(
                    "ece_classification needs class confidences; regression predictions carry none".into(),
                ))
            }
            MetricKind::Etl { alpha, score } => {
                let s: Vec<f64> = point_scores(preds, &ys, *score)?.iter().map(|p| p.value).collect();
                etl(&s, *alpha)?
            }
            MetricKind::Quantile { q, score } => {
                let s: Vec<f64> = point_scores(preds, &ys, *score)?.iter().map(|p| p.value).collect();
                quantile(&s, *q)?
            }
            MetricKind::LocalWasserstein => {
                let means = data
                    .rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        r.mean_gt
                            .ok_or_else(|| Error::Capability(format!("no ground-truth mean at row {i}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sigmas: Vec<Option<f64>> = data.rows.iter().map(|r| r.sigma_gt).collect();
                local_wasserstein(preds, &means, &sigmas)?
            }
            MetricKind::Rmse => {
                let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
                rmse(&means, &ys)?
            }
            MetricKind::WidthStats { stat, q } => {
                let levels: Vec<f64> = q.iter().copied().collect();
                let w = width_stats(preds, &levels)?;
                extra.insert("mean".into(), w.mean);
                extra.insert("variance".into(), w.variance);
                match stat {
                    WidthStat::Mean => w.mean,
                    WidthStat::Variance => w.variance,
                    WidthStat::Quantile => w.quantiles[0].1,
                }
            }
        };
        Ok(MetricResult {
            metric: self.name().to_string(),
            params: self.params(),
            value,
            n: preds.len(),
            extra,
        })
    }
}
