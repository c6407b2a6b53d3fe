//! Seeded synthetic regression data with known ground-truth noise.
//!
//! A [`Generator`] draws `x` from a sampler, evaluates a mean function and a
//! non-negative noise function, and emits `y = f(x) + sigma_gt(x) * eps`.
//! Each row records the ground truth `(f(x), sigma_gt(x))` and the semantic
//! parameters used to produce it, so downstream slicing can rely on them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// A semantic annotation value: numeric or categorical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SemanticValue {
    Number(f64),
    Category(String),
}

impl SemanticValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            SemanticValue::Number(v) => Some(*v),
            SemanticValue::Category(_) => None,
        }
    }
}

impl fmt::Display for SemanticValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemanticValue::Number(v) => write!(f, "{v}"),
            SemanticValue::Category(c) => write!(f, "{c}"),
        }
    }
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub x: Vec<f64>,
    pub y: f64,
    /// Ground-truth noise standard deviation, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_gt: Option<f64>,
    /// Ground-truth conditional mean, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_gt: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub semantics: BTreeMap<String, SemanticValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl Row {
    pub fn new(x: Vec<f64>, y: f64) -> Self {
        Row {
            x,
            y,
            sigma_gt: None,
            mean_gt: None,
            semantics: BTreeMap::new(),
            group: None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err("non-finite feature".into());
        }
        if !self.y.is_finite() {
            return Err("non-finite target".into());
        }
        if let Some(s) = self.sigma_gt {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(format!("sigma_gt must be a finite value >= 0, got {s}"));
            }
        }
        if let Some(m) = self.mean_gt {
            if !m.is_finite() {
                return Err("non-finite mean_gt".into());
            }
        }
        Ok(())
    }
}

/// An ordered collection of rows sharing one feature width.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Vec<Row>,
    /// Human-readable description of how the rows were obtained.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

impl Dataset {
    /// Builds a dataset, checking feature width and `sigma_gt >= 0`.
    pub fn new(rows: Vec<Row>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let width = first.x.len();
            for (i, r) in rows.iter().enumerate() {
                if r.x.len() != width {
                    return Err(Error::parse(
                        format!("row {i}"),
                        format!("feature width {} differs from {}", r.x.len(), width),
                    ));
                }
                r.validate().map_err(|m| Error::parse(format!("row {i}"), m))?;
            }
        }
        Ok(Dataset {
            rows,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Feature width, `None` for an empty dataset.
    pub fn width(&self) -> Option<usize> {
        self.rows.first().map(|r| r.x.len())
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.y).collect()
    }

    pub fn with_provenance(mut self, note: impl Into<String>) -> Self {
        self.provenance.push(note.into());
        self
    }

    /// Per-feature mean over all rows.
    pub fn feature_means(&self) -> Vec<f64> {
        let Some(width) = self.width() else {
            return Vec::new();
        };
        let mut acc = vec![0.0; width];
        for r in &self.rows {
            for (a, v) in acc.iter_mut().zip(&r.x) {
                *a += v;
            }
        }
        let n = self.rows.len() as f64;
        acc.iter().map(|a| a / n).collect()
    }

    /// Writes the rows as JSON Lines.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for row in &self.rows {
            let line = serde_json::to_string(row).map_err(|e| Error::State(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a curated JSON Lines dataset, one row object per line.
///
/// Blank lines are skipped. Errors carry the 1-based line number.
pub fn load_curated(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut width: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = || format!("{}:{}", path.display(), i + 1);
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::parse(loc(), e.to_string()))?;
        row.validate().map_err(|m| Error::parse(loc(), m))?;
        match width {
            None => width = Some(row.x.len()),
            Some(w) if w != row.x.len() => {
                return Err(Error::parse(
                    loc(),
                    format!("feature width {} differs from {}", row.x.len(), w),
                ))
            }
            _ => {}
        }
        rows.push(row);
    }
    log::debug!(
        "loaded {} rows of width {:?} from {}",
        rows.len(),
        width,
        path.display()
    );
    Ok(Dataset {
        rows,
        provenance: vec![format!("curated:{}", path.display())],
    })
}

/// Mean function shape, evaluated on the (frequency-scaled) first feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanFn {
    Sin,
    /// Coefficients in increasing degree.
    Polynomial { coefficients: Vec<f64> },
    /// `values[k]` applies on `[breaks[k-1], breaks[k])`; needs `values.len() == breaks.len() + 1`.
    Piecewise { breaks: Vec<f64>, values: Vec<f64> },
}

/// Noise standard deviation as a function of the first feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseFn {
    Constant { value: f64 },
    /// `intercept + slope * |x|`
    Affine { intercept: f64, slope: f64 },
    /// `below` for `x < at`, `above` otherwise.
    Step { at: f64, below: f64, above: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Uniform { low: Vec<f64>, high: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl Sampler {
    pub fn width(&self) -> usize {
        match self {
            Sampler::Uniform { low, .. } => low.len(),
            Sampler::Gaussian { mean, .. } => mean.len(),
        }
    }
}

/// The semantic knobs of a generator. Each one is recorded on every row
/// under its own name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemanticParams {
    pub amplitude: f64,
    pub frequency: f64,
    /// Translation applied to the first feature after sampling.
    pub shift: f64,
    pub noise_scale: f64,
}

impl Default for SemanticParams {
    fn default() -> Self {
        SemanticParams {
            amplitude: 1.0,
            frequency: 1.0,
            shift: 0.0,
            noise_scale: 1.0,
        }
    }
}

pub const SEMANTIC_PARAMS: [&str; 4] = ["amplitude", "frequency", "shift", "noise_scale"];

impl SemanticParams {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "amplitude" => Some(self.amplitude),
            "frequency" => Some(self.frequency),
            "shift" => Some(self.shift),
            "noise_scale" => Some(self.noise_scale),
            _ => None,
        }
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let slot = match name {
            "amplitude" => &mut self.amplitude,
            "frequency" => &mut self.frequency,
            "shift" => &mut self.shift,
            "noise_scale" => &mut self.noise_scale,
            other => {
                return Err(Error::Config(format!(
                    "'{other}' is not a generator parameter (expected one of {SEMANTIC_PARAMS:?})"
                )))
            }
        };
        *slot = value;
        Ok(())
    }
}

/// A synthetic regression task.
///
/// `f(x) = amplitude * g(frequency * x0) + sum_j linear[j] * x_j` and
/// `sigma_gt(x) = noise_scale * h(x0)`, with `x0` the first feature after
/// the shift has been applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub mean: MeanFn,
    pub noise: NoiseFn,
    pub sampler: Sampler,
    #[serde(default)]
    pub params: SemanticParams,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linear: Vec<f64>,
    /// Group labels assigned uniformly at random per row.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<String>,
}

impl Generator {
    /// `x ~ U[-3, 3]`, `f(x) = sin(2x)`, `sigma_gt(x) = 0.1 + 0.2|x|`.
    pub fn canonical() -> Self {
        Generator {
            mean: MeanFn::Sin,
            noise: NoiseFn::Affine {
                intercept: 0.1,
                slope: 0.2,
            },
            sampler: Sampler::Uniform {
                low: vec![-3.0],
                high: vec![3.0],
            },
            params: SemanticParams {
                frequency: 2.0,
                ..SemanticParams::default()
            },
            linear: Vec::new(),
            groups: Vec::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.sampler.width()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        if w == 0 {
            return Err(Error::Config("generator sampler has zero width".into()));
        }
        match &self.sampler {
            Sampler::Uniform { low, high } => {
                if low.len() != high.len() || low.iter().zip(high).any(|(l, h)| !(l < h)) {
                    return Err(Error::Config("uniform sampler needs low < high per feature".into()));
                }
            }
            Sampler::Gaussian { mean, std } => {
                if mean.len() != std.len() || std.iter().any(|s| !(*s >= 0.0)) {
                    return Err(Error::Config("gaussian sampler needs std >= 0 per feature".into()));
                }
            }
        }
        if !self.linear.is_empty() && self.linear.len() != w {
            return Err(Error::Config(format!(
                "linear term has {} coefficients for {} features",
                self.linear.len(),
                w
            )));
        }
        if let MeanFn::Piecewise { breaks, values } = &self.mean {
            if values.len() != breaks.len() + 1 || breaks.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Config(
                    "piecewise mean needs sorted breaks and one more value than breaks".into(),
                ));
            }
        }
        let p = &self.params;
        if ![p.amplitude, p.frequency, p.shift, p.noise_scale]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("generator parameters must be finite".into()));
        }
        Ok(())
    }

    /// Ground-truth mean at `x`.
    pub fn mean_at(&self, x: &[f64]) -> f64 {
        let p = &self.params;
        let t = p.frequency * x[0];
        let base = match &self.mean {
            MeanFn::Sin => t.sin(),
            MeanFn::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, c| acc * t + c)
            }
            MeanFn::Piecewise { breaks, values } => {
                let k = breaks.partition_point(|b| *b <= t);
                values[k]
            }
        };
        let lin: f64 = self.linear.iter().zip(x).map(|(c, v)| c * v).sum();
        p.amplitude * base + lin
    }

    /// Ground-truth noise standard deviation at `x`. May be negative for a
    /// misconfigured generator; [`generate`] rejects that.
    pub fn sigma_at(&self, x: &[f64]) -> f64 {
        let x0 = x[0];
        let base = match self.noise {
            NoiseFn::Constant { value } => value,
            NoiseFn::Affine { intercept, slope } => intercept + slope * x0.abs(),
            NoiseFn::Step { at, below, above } => {
                if x0 < at {
                    below
                } else {
                    above
                }
            }
        };
        self.params.noise_scale * base
    }

    /// The feature box the sampler covers after shifting; gaussian samplers
    /// report `mean +- 4 std`.
    pub fn feature_box(&self) -> Vec<(f64, f64)> {
        let mut b: Vec<(f64, f64)> = match &self.sampler {
            Sampler::Uniform { low, high } => low.iter().copied().zip(high.iter().copied()).collect(),
            Sampler::Gaussian { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(m, s)| (m - 4.0 * s, m + 4.0 * s))
                .collect(),
        };
        b[0].0 += self.params.shift;
        b[0].1 += self.params.shift;
        b
    }

    fn semantics(&self) -> BTreeMap<String, SemanticValue> {
        SEMANTIC_PARAMS
            .iter()
            .map(|name| {
                (
                    name.to_string(),
                    SemanticValue::Number(self.params.get(name).expect("known parameter")),
                )
            })
            .collect()
    }

    fn sample_x(&self, seed: u64, row: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, &[row, purpose::FEATURES]);
        let mut x: Vec<f64> = match &self.sampler {
            Sampler::Uniform { low, high } => low
                .iter()
                .zip(high)
                .map(|(l, h)| l + (h - l) * rng.random::<f64>())
                .collect(),
            Sampler::Gaussian { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        x[0] += self.params.shift;
        x
    }
}

/// Draws `n` rows from `g`. Row `i` depends only on `(seed, i)`.
pub fn generate(g: &Generator, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("cannot generate an empty dataset".into()));
    }
    g.validate()?;
    let semantics = g.semantics();
    let mut rows = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let x = g.sample_x(seed, i);
        let mean = g.mean_at(&x);
        let sigma = g.sigma_at(&x);
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!(
                "noise function yields {sigma} at x = {x:?} (row {i})"
            )));
        }
        let eps: f64 = rng::stream(seed, &[i, purpose::NOISE]).sample(StandardNormal);
        let group = if g.groups.is_empty() {
            None
        } else {
            let k = rng::stream(seed, &[i, purpose::GROUP]).random_range(0..g.groups.len());
            Some(g.groups[k].clone())
        };
        rows.push(Row {
            y: mean + sigma * eps,
            x,
            sigma_gt: Some(sigma),
            mean_gt: Some(mean),
            semantics: semantics.clone(),
            group,
        });
    }
    Ok(Dataset {
        rows,
        provenance: vec![format!("generated:n={n},seed={seed}")],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_generator_hits_the_mean() {
        let mut g = Generator::canonical();
        g.noise = NoiseFn::Constant { value: 0.0 };
        let d = generate(&g, 50, 3).unwrap();
        for r in &d.rows {
            assert_eq!(r.y, (2.0 * r.x[0]).sin());
            assert_eq!(r.sigma_gt, Some(0.0));
        }
    }

    #[test]
    fn same_seed_same_rows() {
        let g = Generator::canonical();
        assert_eq!(generate(&g, 100, 9).unwrap(), generate(&g, 100, 9).unwrap());
        assert_ne!(generate(&g, 100, 9).unwrap(), generate(&g, 100, 10).unwrap());
    }

    #[test]
    fn prefix_is_stable_under_larger_n() {
        let g = Generator::canonical();
        let small = generate(&g, 10, 1).unwrap();
        let big = generate(&g, 100, 1).unwrap();
        assert_eq!(small.rows[..], big.rows[..10]);
    }

    #[test]
    fn negative_noise_is_a_config_error() {
        let mut g = Generator::canonical();
        g.noise = NoiseFn::Affine {
            intercept: 0.1,
            slope: -0.2,
        };
        assert!(matches!(generate(&g, 100, 0), Err(Error::Config(_))));
    }

    #[test]
    fn semantics_record_parameters() {
        let mut g = Generator::canonical();
        g.params.shift = 2.5;
        let d = generate(&g, 5, 0).unwrap();
        for r in &d.rows {
            assert_eq!(r.semantics["shift"], SemanticValue::Number(2.5));
            assert_eq!(r.semantics["frequency"], SemanticValue::Number(2.0));
            assert!(r.x[0] >= -0.5 && r.x[0] <= 5.5);
        }
    }

    #[test]
    fn mean_shapes() {
        let mut g = Generator::canonical();
        g.params.frequency = 1.0;
        g.mean = MeanFn::Polynomial {
            coefficients: vec![1.0, 0.0, 2.0],
        };
        assert_eq!(g.mean_at(&[3.0]), 19.0);
        g.mean = MeanFn::Piecewise {
            breaks: vec![0.0, 1.0],
            values: vec![-1.0, 0.5, 2.0],
        };
        assert_eq!(g.mean_at(&[-0.1]), -1.0);
        assert_eq!(g.mean_at(&[0.0]), 0.5);
        assert_eq!(g.mean_at(&[4.0]), 2.0);
    }

    #[test]
    fn curated_rejects_negative_sigma_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"x\":[0.0],\"y\":1.0}\n{\"x\":[1.0],\"y\":2.0,\"sigma_gt\":-1}\n",
        )
        .unwrap();
        match load_curated(&p) {
            Err(Error::Parse { location, .. }) => assert!(location.ends_with(":2"), "{location}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn curated_three_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(
            &p,
            "{\"x\":[0.0],\"y\":1.0}\n{\"x\":[1.0],\"y\":2.0,\"group\":\"a\"}\n\n{\"x\":[2.0],\"y\":0.5,\"semantics\":{\"weather\":\"rain\"}}\n",
        )
        .unwrap();
        let d = load_curated(&p).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.width(), Some(1));
        assert_eq!(
            d.rows[2].semantics["weather"],
            SemanticValue::Category("rain".into())
        );
    }
}
