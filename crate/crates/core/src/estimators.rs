//! Uncertainty estimators built on [`Mlp`] models.
//!
//! Each estimator maps an input to an [`UncertaintyPrediction`]: a mean, a
//! total standard deviation and, where the mechanism supports it, an
//! aleatoric/epistemic split with `sigma^2 = aleatoric^2 + epistemic^2`.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Head, ModelSpec, Mlp, Mode, TrainConfig};
use crate::rng::{self, purpose};
use crate::synthdata::{Dataset, Generator};

pub const DEFAULT_DROPOUT_SAMPLES: usize = 50;
pub const DEFAULT_ENSEMBLE_MEMBERS: usize = 5;
pub const DEFAULT_CHAIN_SAMPLES: usize = 100;

const CONSISTENCY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyPrediction {
    pub mean: f64,
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aleatoric: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epistemic: Option<f64>,
}

impl UncertaintyPrediction {
    /// A prediction without attribution.
    pub fn new(mean: f64, sigma: f64) -> Self {
        UncertaintyPrediction {
            mean,
            sigma,
            aleatoric: None,
            epistemic: None,
        }
    }

    /// A prediction whose total follows from its components.
    pub fn from_components(mean: f64, aleatoric: f64, epistemic: f64) -> Self {
        UncertaintyPrediction {
            mean,
            sigma: aleatoric.hypot(epistemic),
            aleatoric: Some(aleatoric),
            epistemic: Some(epistemic),
        }
    }

    /// `|sigma^2 - (ale^2 + epi^2)| <= 1e-9 sigma^2`, vacuously true without
    /// both components.
    pub fn is_consistent(&self) -> bool {
        match (self.aleatoric, self.epistemic) {
            (Some(a), Some(e)) => {
                let s2 = self.sigma * self.sigma;
                (s2 - (a * a + e * e)).abs() <= CONSISTENCY_TOL * s2
            }
            _ => true,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.is_finite()
            && self.sigma.is_finite()
            && self.aleatoric.is_none_or(f64::is_finite)
            && self.epistemic.is_none_or(f64::is_finite)
    }

    fn scaled(self, s: f64) -> Self {
        UncertaintyPrediction {
            mean: self.mean,
            sigma: self.sigma * s,
            aleatoric: self.aleatoric.map(|a| a * s),
            epistemic: self.epistemic.map(|e| e * s),
        }
    }
}

/// Returns `(aleatoric, epistemic)`.
pub fn decompose(p: &UncertaintyPrediction) -> Result<(f64, f64)> {
    match (p.aleatoric, p.epistemic) {
        (Some(a), Some(e)) => {
            if !p.is_consistent() {
                return Err(Error::Domain(format!(
                    "sigma {} inconsistent with components ({a}, {e})",
                    p.sigma
                )));
            }
            Ok((a, e))
        }
        _ => Err(Error::Capability(
            "estimator does not attribute uncertainty to aleatoric and epistemic parts".into(),
        )),
    }
}

/// Planted faults used to exercise the technical test level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Reports `sigma = -1`.
    NegativeSigma,
    /// Reports `sigma = NaN`.
    NanSigma,
    /// Perturbs the mean with unseeded randomness.
    Unseeded,
}

#[derive(Debug, Clone)]
pub enum Estimator {
    /// A Gaussian-head network read directly.
    ParametricGaussian { model: Arc<Mlp> },
    /// `samples` stochastic passes through a network with dropout.
    McDropout { model: Arc<Mlp>, samples: usize },
    /// Gaussian-head members combined by the mixture-moment rule.
    DeepEnsemble { members: Vec<Arc<Mlp>> },
    /// Inner estimator with every sigma multiplied by `scale`.
    Scaled { inner: Box<Estimator>, scale: f64 },
    /// Black-box model that forwards incoming uncertainty plus a margin.
    Bypass { model: Arc<Mlp>, margin: f64 },
    /// The generating process itself, optionally with sigma rescaled.
    Oracle { generator: Generator, sigma_factor: f64 },
    Faulty { inner: Box<Estimator>, fault: Fault },
}

/// Welford mean and population variance; identical inputs give exactly zero spread.
fn population_moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    (mean, m2 / n)
}

impl Estimator {
    pub fn parametric(model: Mlp) -> Result<Self> {
        if model.head() != Head::Gaussian {
            return Err(Error::Config("parametric estimator needs a gaussian head".into()));
        }
        Ok(Estimator::ParametricGaussian { model: Arc::new(model) })
    }

    /// MC dropout; `rate` overrides the model's dropout rates when given.
    pub fn mc_dropout(model: Mlp, rate: Option<f64>, samples: usize) -> Result<Self> {
        if samples < 2 {
            return Err(Error::Config(format!("MC dropout needs >= 2 samples, got {samples}")));
        }
        let model = match rate {
            Some(r) => model.with_dropout(r)?,
            None => model,
        };
        Ok(Estimator::McDropout {
            model: Arc::new(model),
            samples,
        })
    }

    pub fn ensemble(members: Vec<Mlp>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "ensemble needs >= 2 members, got {}",
                members.len()
            )));
        }
        let w = members[0].input_width();
        if members.iter().any(|m| m.head() != Head::Gaussian || m.input_width() != w) {
            return Err(Error::Config(
                "ensemble members need gaussian heads and equal input widths".into(),
            ));
        }
        Ok(Estimator::DeepEnsemble {
            members: members.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn scaled(inner: Estimator, scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config(format!("scale must be > 0, got {scale}")));
        }
        Ok(Estimator::Scaled {
            inner: Box::new(inner),
            scale,
        })
    }

    pub fn bypass(model: Mlp, margin: f64) -> Result<Self> {
        if !(margin >= 0.0) {
            return Err(Error::Config(format!("bypass margin must be >= 0, got {margin}")));
        }
        Ok(Estimator::Bypass {
            model: Arc::new(model),
            margin,
        })
    }

    pub fn oracle(generator: Generator, sigma_factor: f64) -> Result<Self> {
        generator.validate()?;
        if !(sigma_factor > 0.0) {
            return Err(Error::Config("oracle sigma_factor must be > 0".into()));
        }
        Ok(Estimator::Oracle {
            generator,
            sigma_factor,
        })
    }

    pub fn faulty(inner: Estimator, fault: Fault) -> Self {
        Estimator::Faulty {
            inner: Box::new(inner),
            fault,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::ParametricGaussian { .. } => "parametric_gaussian",
            Estimator::McDropout { .. } => "mc_dropout",
            Estimator::DeepEnsemble { .. } => "deep_ensemble",
            Estimator::Scaled { .. } => "scaled",
            Estimator::Bypass { .. } => "bypass",
            Estimator::Oracle { .. } => "oracle",
            Estimator::Faulty { .. } => "faulty",
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Estimator::ParametricGaussian { model }
            | Estimator::McDropout { model, .. }
            | Estimator::Bypass { model, .. } => model.input_width(),
            Estimator::DeepEnsemble { members } => members[0].input_width(),
            Estimator::Scaled { inner, .. } | Estimator::Faulty { inner, .. } => inner.input_width(),
            Estimator::Oracle { generator, .. } => generator.width(),
        }
    }

    /// The plain network underneath the estimator, used as the reference for
    /// performance and latency comparisons.
    pub fn bare_model(&self) -> Option<&Mlp> {
        match self {
            Estimator::ParametricGaussian { model }
            | Estimator::McDropout { model, .. }
            | Estimator::Bypass { model, .. } => Some(model),
            Estimator::DeepEnsemble { members } => Some(&members[0]),
            Estimator::Scaled { inner, .. } | Estimator::Faulty { inner, .. } => inner.bare_model(),
            Estimator::Oracle { .. } => None,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::Config(format!(
                "input has {} features, estimator expects {}",
                x.len(),
                self.input_width()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite input {x:?}")));
        }
        Ok(())
    }

    /// Prediction at `x`; stochastic mechanisms draw from streams keyed by `seed`.
    pub fn predict(&self, x: &[f64], seed: u64) -> Result<UncertaintyPrediction> {
        self.check_input(x)?;
        self.predict_with_input_sigma(x, 0.0, seed)
    }

    fn predict_with_input_sigma(&self, x: &[f64], sigma_in: f64, seed: u64) -> Result<UncertaintyPrediction> {
        let p = match self {
            Estimator::ParametricGaussian { model } => {
                let out = model.forward(x, Mode::Deterministic)?;
                let s = out.sigma.expect("gaussian head")[0];
                UncertaintyPrediction {
                    mean: out.values[0],
                    sigma: s,
                    aleatoric: Some(s),
                    epistemic: Some(0.0),
                }
            }
            Estimator::McDropout { model, samples } => {
                let passes = (0..*samples)
                    .map(|t| model.forward(x, Mode::Stochastic { seed: rng::mix(seed, &[t as u64, purpose::PREDICT]) }))
                    .collect::<Result<Vec<_>>>()?;
                let (mean, var) = population_moments(passes.iter().map(|o| o.values[0]));
                let epistemic = var.sqrt();
                match model.head() {
                    Head::Gaussian => {
                        let ale2 = passes
                            .iter()
                            .map(|o| o.sigma.as_ref().expect("gaussian head")[0].powi(2))
                            .sum::<f64>()
                            / passes.len() as f64;
                        UncertaintyPrediction::from_components(mean, ale2.sqrt(), epistemic)
                    }
                    Head::Point => UncertaintyPrediction {
                        mean,
                        sigma: epistemic,
                        aleatoric: None,
                        epistemic: Some(epistemic),
                    },
                }
            }
            Estimator::DeepEnsemble { members } => {
                let outs = members
                    .iter()
                    .map(|m| m.forward(x, Mode::Deterministic))
                    .collect::<Result<Vec<_>>>()?;
                let (mean, var) = population_moments(outs.iter().map(|o| o.values[0]));
                let ale2 = outs
                    .iter()
                    .map(|o| o.sigma.as_ref().expect("gaussian head")[0].powi(2))
                    .sum::<f64>()
                    / outs.len() as f64;
                UncertaintyPrediction::from_components(mean, ale2.sqrt(), var.sqrt())
            }
            Estimator::Scaled { inner, scale } => inner.predict_with_input_sigma(x, sigma_in, seed)?.scaled(*scale),
            Estimator::Bypass { model, margin } => {
                let out = model.forward(x, Mode::Deterministic)?;
                UncertaintyPrediction::new(out.values[0], sigma_in + margin)
            }
            Estimator::Oracle {
                generator,
                sigma_factor,
            } => {
                let s = sigma_factor * generator.sigma_at(x);
                UncertaintyPrediction {
                    mean: generator.mean_at(x),
                    sigma: s,
                    aleatoric: Some(s),
                    epistemic: Some(0.0),
                }
            }
            Estimator::Faulty { inner, fault } => {
                let mut p = inner.predict_with_input_sigma(x, sigma_in, seed)?;
                match fault {
                    Fault::NegativeSigma => {
                        p = UncertaintyPrediction::new(p.mean, -1.0);
                    }
                    Fault::NanSigma => {
                        p = UncertaintyPrediction::new(p.mean, f64::NAN);
                    }
                    Fault::Unseeded => {
                        p.mean += 1e-3 * rand::rng().random::<f64>();
                    }
                }
                return Ok(p);
            }
        };
        if !p.is_finite() {
            return Err(Error::EstimatorFault(format!(
                "{} produced a non-finite prediction at {x:?}",
                self.name()
            )));
        }
        Ok(p)
    }

    /// Predictions for every row. Each row's seed is derived from `seed` and
    /// the row's features, so results do not depend on row order.
    pub fn predict_dataset(&self, data: &Dataset, seed: u64) -> Result<Vec<UncertaintyPrediction>> {
        data.rows.iter().map(|r| self.predict(&r.x, input_seed(seed, &r.x))).collect()
    }

    /// Point prediction of [`Estimator::bare_model`], or the estimator's own
    /// mean when there is no underlying network.
    pub fn bare_mean(&self, x: &[f64], seed: u64) -> Result<f64> {
        match self.bare_model() {
            Some(m) => Ok(m.forward(x, Mode::Deterministic)?.values[0]),
            None => Ok(self.predict(x, seed)?.mean),
        }
    }
}

/// Seed for predicting at `x`, keyed by the bit patterns of the features.
pub fn input_seed(seed: u64, x: &[f64]) -> u64 {
    let bits: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
    rng::mix(seed, &bits)
}

/// Fits a global sigma multiplier on `calib`.
///
/// With normalized residuals `r_i = (y_i - mu_i) / sigma_i`, the mean
/// Gaussian NLL as a function of `s` is minimised at `s = sqrt(mean r_i^2)`.
pub fn fit_scale(est: &Estimator, calib: &Dataset, seed: u64) -> Result<Estimator> {
    if calib.is_empty() {
        return Err(Error::Config("calibration set is empty".into()));
    }
    let preds = est.predict_dataset(calib, seed)?;
    let mut sum = 0.0;
    for (i, (p, row)) in preds.iter().zip(&calib.rows).enumerate() {
        if !(p.sigma > 0.0) {
            return Err(Error::Domain(format!("sigma {} <= 0 at calibration row {i}", p.sigma)));
        }
        sum += ((row.y - p.mean) / p.sigma).powi(2);
    }
    let s = (sum / preds.len() as f64).sqrt();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Domain(format!("degenerate scale {s}: calibration residuals are all zero")));
    }
    Estimator::scaled(est.clone(), s)
}

/// One element of an estimator chain.
#[derive(Debug, Clone)]
pub struct Stage {
    pub estimator: Estimator,
    /// The stage uses its uncertainty internally and does not pass it on.
    pub internal: bool,
}

impl Stage {
    pub fn new(estimator: Estimator) -> Self {
        Stage {
            estimator,
            internal: false,
        }
    }

    pub fn internal(estimator: Estimator) -> Self {
        Stage {
            estimator,
            internal: true,
        }
    }
}

/// Result of running a chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChainOutput {
    Emitted(UncertaintyPrediction),
    /// The last stage consumed its uncertainty; only the mean leaves the chain.
    Internal { mean: f64 },
}

impl ChainOutput {
    pub fn mean(&self) -> f64 {
        match self {
            ChainOutput::Emitted(p) => p.mean,
            ChainOutput::Internal { mean } => *mean,
        }
    }

    /// The emitted prediction, or a capability error for an internal output.
    pub fn prediction(&self) -> Result<UncertaintyPrediction> {
        match self {
            ChainOutput::Emitted(p) => Ok(*p),
            ChainOutput::Internal { .. } => Err(Error::Capability(
                "chain output carries no uncertainty (internal stage)".into(),
            )),
        }
    }
}

/// Pushes `x` with isotropic input uncertainty `sigma_in` through `chain`.
///
/// Regular stages propagate by sampling: `samples` Gaussian perturbations of
/// the incoming mean are predicted and combined with the mixture rule.
/// Bypass stages evaluate their model once and add their margin to the
/// incoming sigma.
pub fn propagate_chain(
    chain: &[Stage],
    x: &[f64],
    sigma_in: f64,
    samples: usize,
    seed: u64,
) -> Result<ChainOutput> {
    if !(sigma_in >= 0.0) || !sigma_in.is_finite() {
        return Err(Error::Domain(format!("incoming sigma must be finite and >= 0, got {sigma_in}")));
    }
    if chain.is_empty() {
        return Err(Error::Config("empty estimator chain".into()));
    }
    for (k, pair) in chain.windows(2).enumerate() {
        if pair[1].estimator.input_width() != 1 {
            return Err(Error::Config(format!(
                "stage {} expects {} inputs but stage {k} emits 1",
                k + 1,
                pair[1].estimator.input_width()
            )));
        }
    }
    chain[0].estimator.check_input(x)?;

    let mut current = x.to_vec();
    let mut sigma: Option<f64> = Some(sigma_in);
    let mut last: Option<UncertaintyPrediction> = None;
    for (k, stage) in chain.iter().enumerate() {
        let stage_seed = rng::mix(seed, &[k as u64, purpose::CHAIN]);
        let p = match &stage.estimator {
            est @ Estimator::Bypass { .. } => {
                let incoming = sigma.ok_or_else(|| {
                    Error::Capability(format!("bypass stage {k} has no incoming uncertainty to forward"))
                })?;
                est.predict_with_input_sigma(&current, incoming, stage_seed)?
            }
            est => {
                let incoming = sigma.unwrap_or(0.0);
                if incoming == 0.0 {
                    est.predict(&current, stage_seed)?
                } else {
                    if samples < 2 {
                        return Err(Error::Config(format!(
                            "chain propagation needs >= 2 samples, got {samples}"
                        )));
                    }
                    propagate_stage(est, &current, incoming, samples, stage_seed)?
                }
            }
        };
        current = vec![p.mean];
        if stage.internal {
            sigma = None;
            last = None;
        } else {
            sigma = Some(p.sigma);
            last = Some(p);
        }
    }
    Ok(match last {
        Some(p) => ChainOutput::Emitted(p),
        None => ChainOutput::Internal { mean: current[0] },
    })
}

fn propagate_stage(
    est: &Estimator,
    x: &[f64],
    sigma_in: f64,
    samples: usize,
    seed: u64,
) -> Result<UncertaintyPrediction> {
    let preds = (0..samples as u64)
        .map(|s| {
            let mut rng = rng::stream(seed, &[s, purpose::CHAIN]);
            let xs: Vec<f64> = x
                .iter()
                .map(|v| v + sigma_in * rng.sample::<f64, _>(StandardNormal))
                .collect();
            est.predict(&xs, rng::mix(seed, &[s, purpose::PREDICT]))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = preds.len() as f64;
    let (mean, spread) = population_moments(preds.iter().map(|p| p.mean));
    let mean_sq = |f: &dyn Fn(&UncertaintyPrediction) -> Option<f64>| -> Option<f64> {
        preds
            .iter()
            .map(|p| f(p).map(|v| v * v))
            .sum::<Option<f64>>()
            .map(|s| s / n)
    };
    // input-driven spread is data uncertainty, so it joins the aleatoric part
    match (mean_sq(&|p| p.aleatoric), mean_sq(&|p| p.epistemic)) {
        (Some(a2), Some(e2)) => Ok(UncertaintyPrediction::from_components(
            mean,
            (a2 + spread).sqrt(),
            e2.sqrt(),
        )),
        _ => {
            let s2 = mean_sq(&|p| Some(p.sigma)).expect("always present");
            Ok(UncertaintyPrediction::new(mean, (s2 + spread).sqrt()))
        }
    }
}

/// Trains `members` independently initialised copies of `spec` on `data`.
/// Member `m` uses seed `mix(cfg.seed, m)` for initialisation and shuffling.
pub fn train_members(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig, members: usize) -> Result<Vec<Mlp>> {
    (0..members as u64)
        .into_par_iter()
        .map(|m| {
            let seed = rng::mix(cfg.seed, &[m, purpose::MEMBER]);
            let init = Mlp::new(spec, seed)?;
            let member_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            Ok(nn::train(&init, data, &member_cfg)?.model)
        })
        .collect()
}
