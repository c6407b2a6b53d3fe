//! The suite document: generators, data, ODD, estimator, criteria, trees.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::aggregate::{LogicNode, Policy};
use crate::criteria::{self, AcceptanceCriterion, DataRef, Level, Measure};
use crate::datasel::{self, Corruption, DataSpec, SearchObjective, SelectionContext};
use crate::error::{Error, Result};
use crate::estimators::{self, Estimator, Fault};
use crate::nn::{self, Mlp, ModelSpec, TrainConfig};
use crate::odd::OddSpec;
use crate::synthdata::{Dataset, Generator};

/// Id of the pseudo-criterion grouping the auto-generated technical tests.
pub const TECHNICAL: &str = "technical";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBlock {
    pub spec: ModelSpec,
    pub data: DataRef,
    pub config: TrainConfig,
}

/// Where network weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    Checkpoints(Vec<PathBuf>),
    Train(TrainBlock),
}

fn default_samples() -> usize {
    estimators::DEFAULT_DROPOUT_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorConfig {
    Parametric {
        model: ModelSource,
    },
    McDropout {
        model: ModelSource,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate: Option<f64>,
    },
    /// `members` networks trained from distinct seeds, or one per checkpoint.
    Ensemble {
        model: ModelSource,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        members: Option<usize>,
    },
    Bypass {
        model: ModelSource,
        margin: f64,
    },
    Oracle {
        generator: String,
        #[serde(default = "one")]
        sigma_factor: f64,
    },
    /// A fixed `scale`, or one fitted on the `fit_on` data.
    Scaled {
        inner: Box<EstimatorConfig>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fit_on: Option<DataRef>,
    },
    Faulty {
        inner: Box<EstimatorConfig>,
        fault: Fault,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub corruption: Corruption,
    pub severity: f64,
}

fn default_latency_repetitions() -> usize {
    5
}
fn default_latency_points() -> usize {
    32
}
fn default_max_p99_ms() -> f64 {
    1000.0
}
fn default_max_overhead() -> f64 {
    1e4
}
fn default_min_group_size() -> usize {
    30
}
fn default_technical_rows() -> usize {
    256
}

/// Knobs of the harness itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessParams {
    /// Data for the technical tests; defaults to fresh samples from the
    /// first generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub technical_data: Option<DataRef>,
    #[serde(default = "default_technical_rows")]
    pub technical_rows: usize,
    #[serde(default = "default_latency_repetitions")]
    pub latency_repetitions: usize,
    #[serde(default = "default_latency_points")]
    pub latency_points: usize,
    #[serde(default = "default_max_p99_ms")]
    pub max_p99_ms: f64,
    /// Upper bound on estimator time over bare-model time.
    #[serde(default = "default_max_overhead")]
    pub max_overhead: f64,
    #[serde(default = "default_min_group_size")]
    pub min_group_size: usize,
    /// Corruptions applied to global-level data for extra shift measurements.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shifts: Vec<ShiftSpec>,
}

impl Default for HarnessParams {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Default::default())).expect("all fields defaulted")
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSuite {
    suite_id: String,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    fail_fast: bool,
    generators: BTreeMap<String, Generator>,
    #[serde(default)]
    odd: Option<OddSpec>,
    #[serde(default)]
    base: Option<DataRef>,
    #[serde(default)]
    data: BTreeMap<String, DataSpec>,
    estimator: EstimatorConfig,
    criteria: Value,
    #[serde(default)]
    trees: BTreeMap<String, LogicNode>,
    #[serde(default)]
    overall: Policy,
    #[serde(default)]
    harness: HarnessParams,
}

/// A parsed and validated suite.
#[derive(Debug, Clone)]
pub struct Suite {
    pub suite_id: String,
    pub seed: u64,
    pub fail_fast: bool,
    pub generators: BTreeMap<String, Generator>,
    pub odd: Option<OddSpec>,
    pub base: Option<DataRef>,
    pub data: BTreeMap<String, DataSpec>,
    pub estimator: EstimatorConfig,
    pub criteria: Vec<AcceptanceCriterion>,
    /// The `criteria` array exactly as written.
    pub criteria_doc: Value,
    pub trees: BTreeMap<String, LogicNode>,
    pub overall: Policy,
    pub harness: HarnessParams,
    pub base_dir: PathBuf,
    /// SHA-256 of the canonical (key-sorted, compact) config JSON.
    pub digest: String,
}

/// Canonical digest of a JSON document; independent of formatting and key order.
pub fn digest(doc: &Value) -> String {
    let canonical = serde_json::to_string(doc).expect("serialisable");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn json_location(e: &serde_json::Error) -> String {
    format!("line {} column {}", e.line(), e.column())
}

impl Suite {
    pub fn load(path: impl AsRef<Path>) -> Result<Suite> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::parse(format!("{}: {}", path.display(), json_location(&e)), e.to_string()))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Suite::from_value(doc, base_dir)
    }

    pub fn from_value(doc: Value, base_dir: PathBuf) -> Result<Suite> {
        let digest = digest(&doc);
        let raw: RawSuite = serde_json::from_value(doc).map_err(|e| Error::parse("suite", e.to_string()))?;
        let criteria = criteria::parse_criteria(&raw.criteria, &raw.data)?;
        let suite = Suite {
            suite_id: raw.suite_id,
            seed: raw.seed,
            fail_fast: raw.fail_fast,
            generators: raw.generators,
            odd: raw.odd,
            base: raw.base,
            data: raw.data,
            estimator: raw.estimator,
            criteria,
            criteria_doc: raw.criteria,
            trees: raw.trees,
            overall: raw.overall,
            harness: raw.harness,
            base_dir,
            digest,
        };
        suite.validate()?;
        Ok(suite)
    }

    fn validate(&self) -> Result<()> {
        if self.generators.is_empty() {
            return Err(Error::Config("suite defines no generators".into()));
        }
        for (name, g) in &self.generators {
            g.validate().map_err(|e| Error::Config(format!("generator '{name}': {e}")))?;
        }
        if let Some(odd) = &self.odd {
            odd.validate()?;
        }
        for (name, spec) in &self.data {
            spec.validate().map_err(|e| Error::Config(format!("data '{name}': {e}")))?;
            self.check_generators(spec)
                .map_err(|e| Error::Config(format!("data '{name}': {e}")))?;
        }
        for c in &self.criteria {
            if let Some(d) = &c.data {
                let spec = d.resolve(&self.data)?;
                self.check_generators(spec)?;
                self.check_search_objective(c, spec)?;
            }
        }
        if let Some(d) = &self.base {
            d.resolve(&self.data)?;
        }
        if let Some(d) = &self.harness.technical_data {
            d.resolve(&self.data)?;
        }
        let h = &self.harness;
        if h.latency_repetitions == 0 || h.latency_points == 0 || h.technical_rows == 0 {
            return Err(Error::Config("harness repetitions and sizes must be positive".into()));
        }
        if h.min_group_size == 0 {
            return Err(Error::Config("min_group_size must be positive".into()));
        }
        for s in &h.shifts {
            if !(s.severity >= 0.0) {
                return Err(Error::Config("shift severity must be >= 0".into()));
            }
        }
        self.check_estimator(&self.estimator)?;
        for id in self.trees.keys() {
            if id == TECHNICAL {
                continue;
            }
            let c = self
                .criteria
                .iter()
                .find(|c| &c.id == id)
                .ok_or_else(|| Error::Structural(format!("tree for unknown criterion '{id}'")))?;
            if c.is_manual() {
                return Err(Error::Structural(format!("manual criterion '{id}' cannot have a test tree")));
            }
        }
        let cases = self.case_ids();
        for (id, tree) in &self.trees {
            tree.validate(&|leaf| cases.get(id).is_some_and(|ids| ids.iter().any(|c| c == leaf)))
                .map_err(|e| Error::Structural(format!("tree of '{id}': {e}")))?;
        }
        if let Policy::Tree(t) = &self.overall {
            let names = self.automatic_criteria();
            t.validate(&|leaf| names.iter().any(|n| n == leaf))
                .map_err(|e| Error::Structural(format!("overall tree: {e}")))?;
            if let Some(missing) = names.iter().find(|n| !t.leaves().contains(&n.as_str())) {
                return Err(Error::Structural(format!("criterion '{missing}' missing from the overall tree")));
            }
        }
        Ok(())
    }

    fn check_generators(&self, spec: &DataSpec) -> Result<()> {
        let need = |g: &String| -> Result<()> {
            if self.generators.contains_key(g) {
                Ok(())
            } else {
                Err(Error::Config(format!("unknown generator '{g}'")))
            }
        };
        match spec {
            DataSpec::FullOdd { generator, .. } | DataSpec::SemanticSweep { generator, .. } => need(generator),
            DataSpec::SemanticSlice { source, .. } | DataSpec::QuantileSlice { source, .. } => {
                source.as_ref().map_or(Ok(()), |s| self.check_generators(s))
            }
            DataSpec::Shifted { base, .. } => self.check_generators(base),
            DataSpec::SearchGenerated { search } => search.generator.as_ref().map_or(Ok(()), need),
            // A missing curated file is a configuration problem, caught before any case runs.
            DataSpec::Curated { path } => {
                let full = if path.is_absolute() { path.clone() } else { self.base_dir.join(path) };
                if full.is_file() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("curated file {} not found", full.display())))
                }
            }
        }
    }

    fn check_search_objective(&self, c: &AcceptanceCriterion, spec: &DataSpec) -> Result<()> {
        if let (
            DataSpec::SearchGenerated { search },
            Measure::Metric(m),
        ) = (spec, &c.measure)
        {
            if let SearchObjective::Estimator { score } = &search.objective {
                if m.point_score_kind() != Some(*score) {
                    return Err(Error::Config(format!(
                        "criterion '{}': search objective scores {score:?} but the measure scores {:?}",
                        c.id,
                        m.point_score_kind()
                    )));
                }
                if search.generator.is_none() {
                    return Err(Error::Config(format!(
                        "criterion '{}': estimator search objective needs a ground-truth generator",
                        c.id
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_estimator(&self, cfg: &EstimatorConfig) -> Result<()> {
        let source = |m: &ModelSource| -> Result<()> {
            if let ModelSource::Train(t) = m {
                self.check_generators(t.data.resolve(&self.data)?)?;
            }
            Ok(())
        };
        match cfg {
            EstimatorConfig::Parametric { model }
            | EstimatorConfig::McDropout { model, .. }
            | EstimatorConfig::Ensemble { model, .. }
            | EstimatorConfig::Bypass { model, .. } => source(model),
            EstimatorConfig::Oracle { generator, .. } => {
                if self.generators.contains_key(generator) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("unknown generator '{generator}'")))
                }
            }
            EstimatorConfig::Scaled { inner, scale, fit_on } => {
                if scale.is_some() == fit_on.is_some() {
                    return Err(Error::Config("scaled estimator needs exactly one of scale and fit_on".into()));
                }
                if let Some(d) = fit_on {
                    d.resolve(&self.data)?;
                }
                self.check_estimator(inner)
            }
            EstimatorConfig::Faulty { inner, .. } => self.check_estimator(inner),
        }
    }

    /// Case id for a criterion at a level.
    pub fn case_id(criterion: &str, level: Level) -> String {
        format!("{criterion}@{level}")
    }

    /// Ids of the auto-generated technical tests.
    pub fn technical_ids() -> Vec<String> {
        crate::harness::Check::ALL
            .iter()
            .map(|c| format!("{TECHNICAL}.{}", c.as_str()))
            .collect()
    }

    /// Case ids per criterion, including the technical pseudo-criterion.
    pub fn case_ids(&self) -> BTreeMap<String, Vec<String>> {
        let mut out = BTreeMap::new();
        out.insert(TECHNICAL.to_string(), Suite::technical_ids());
        for c in self.criteria.iter().filter(|c| !c.is_manual()) {
            out.insert(
                c.id.clone(),
                c.test_depth.iter().map(|l| Suite::case_id(&c.id, *l)).collect(),
            );
        }
        out
    }

    /// Names that take part in the overall verdict.
    pub fn automatic_criteria(&self) -> Vec<String> {
        self.case_ids().into_keys().collect()
    }

    pub fn selection_context(&self, seed: u64) -> SelectionContext<'_> {
        SelectionContext {
            generators: &self.generators,
            odd: self.odd.as_ref(),
            base_dir: &self.base_dir,
            seed,
        }
    }

    /// Dataset every source-less slice works on.
    pub fn base_dataset(&self) -> Result<Dataset> {
        match &self.base {
            None => Ok(Dataset::default()),
            Some(d) => {
                let spec = d.resolve(&self.data)?;
                datasel::select(&Dataset::default(), spec, None, &self.selection_context(self.seed))
            }
        }
    }

    pub fn resolve_data(&self, d: &DataRef, est: Option<&Estimator>) -> Result<Dataset> {
        let spec = d.resolve(&self.data)?;
        datasel::select(&self.base_dataset()?, spec, est, &self.selection_context(self.seed))
    }

    fn load_models(&self, m: &ModelSource, members: Option<usize>) -> Result<Vec<Mlp>> {
        match m {
            ModelSource::Checkpoint(p) => Ok(vec![Mlp::load(self.base_dir.join(p))?]),
            ModelSource::Checkpoints(ps) => ps.iter().map(|p| Mlp::load(self.base_dir.join(p))).collect(),
            ModelSource::Train(t) => {
                let data = self.resolve_data(&t.data, None)?;
                match members {
                    Some(n) => estimators::train_members(&t.spec, &data, &t.config, n),
                    None => {
                        let init = Mlp::new(&t.spec, t.config.seed)?;
                        Ok(vec![nn::train(&init, &data, &t.config)?.model])
                    }
                }
            }
        }
    }

    fn single(&self, m: &ModelSource) -> Result<Mlp> {
        let mut v = self.load_models(m, None)?;
        if v.len() != 1 {
            return Err(Error::Config("expected exactly one model".into()));
        }
        Ok(v.remove(0))
    }

    /// Builds (and if needed trains) the configured estimator.
    pub fn build_estimator(&self) -> Result<Estimator> {
        self.build(&self.estimator)
    }

    fn build(&self, cfg: &EstimatorConfig) -> Result<Estimator> {
        match cfg {
            EstimatorConfig::Parametric { model } => Estimator::parametric(self.single(model)?),
            EstimatorConfig::McDropout { model, samples, rate } => {
                Estimator::mc_dropout(self.single(model)?, *rate, *samples)
            }
            EstimatorConfig::Ensemble { model, members } => {
                let members = match model {
                    ModelSource::Train(_) => Some(members.unwrap_or(estimators::DEFAULT_ENSEMBLE_MEMBERS)),
                    _ => None,
                };
                Estimator::ensemble(self.load_models(model, members)?)
            }
            EstimatorConfig::Bypass { model, margin } => Estimator::bypass(self.single(model)?, *margin),
            EstimatorConfig::Oracle {
                generator,
                sigma_factor,
            } => Estimator::oracle(self.generators[generator].clone(), *sigma_factor),
            EstimatorConfig::Scaled { inner, scale, fit_on } => {
                let inner = self.build(inner)?;
                match (scale, fit_on) {
                    (Some(s), _) => Estimator::scaled(inner, *s),
                    (None, Some(d)) => {
                        let calib = self.resolve_data(d, None)?;
                        estimators::fit_scale(&inner, &calib, self.seed)
                    }
                    (None, None) => Err(Error::Config("scaled estimator needs scale or fit_on".into())),
                }
            }
            EstimatorConfig::Faulty { inner, fault } => Ok(Estimator::faulty(self.build(inner)?, *fault)),
        }
    }
}
