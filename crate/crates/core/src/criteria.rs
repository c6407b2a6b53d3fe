//! Acceptance criteria: a data specification, a quality measure and a
//! threshold, tagged with the requirement category they serve.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::datasel::DataSpec;
use crate::error::{Error, Result};
use crate::metrics::MetricKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementCategory {
    Calibration,
    LocalCalibration,
    DownstreamTasks,
    ArgumentativelySubstantiated,
    UncertaintyAttribution,
    LargeNetworkApplicability,
    MinimalOverhead,
    MinimalTradeoffs,
    TechnicalSimplicity,
    ApplicationSpecific,
}

impl RequirementCategory {
    pub const ALL: [RequirementCategory; 10] = [
        RequirementCategory::Calibration,
        RequirementCategory::LocalCalibration,
        RequirementCategory::DownstreamTasks,
        RequirementCategory::ArgumentativelySubstantiated,
        RequirementCategory::UncertaintyAttribution,
        RequirementCategory::LargeNetworkApplicability,
        RequirementCategory::MinimalOverhead,
        RequirementCategory::MinimalTradeoffs,
        RequirementCategory::TechnicalSimplicity,
        RequirementCategory::ApplicationSpecific,
    ];

    /// Categories that only a human argument can establish.
    pub fn is_qualitative(self) -> bool {
        matches!(
            self,
            RequirementCategory::ArgumentativelySubstantiated
                | RequirementCategory::LargeNetworkApplicability
                | RequirementCategory::TechnicalSimplicity
        )
    }
}

/// Hierarchy level; the declaration order is the execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Technical,
    Global,
    SubsetPointwise,
    Complementary,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Technical, Level::Global, Level::SubsetPointwise, Level::Complementary];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Technical => "technical",
            Level::Global => "global",
            Level::SubsetPointwise => "subset_pointwise",
            Level::Complementary => "complementary",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    #[serde(alias = "<=")]
    Le,
    #[serde(alias = ">=")]
    Ge,
}

impl Comparator {
    pub fn holds(self, measured: f64, threshold: f64) -> bool {
        match self {
            Comparator::Le => measured <= threshold,
            Comparator::Ge => measured >= threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Le => "<=",
            Comparator::Ge => ">=",
        }
    }
}

/// What a criterion measures.
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    Metric(MetricKind),
    /// Maximum `|d sigma| / |d x|` along the straight path `from -> to`.
    ChangeRate { from: Vec<f64>, to: Vec<f64>, steps: usize },
    /// RMSE of the estimator's mean over RMSE of the bare model.
    TradeoffRatio,
    /// Asserted by the configuration author; never tested automatically.
    Manual,
}

impl Measure {
    pub fn name(&self) -> &'static str {
        match self {
            Measure::Metric(m) => m.name(),
            Measure::ChangeRate { .. } => "change_rate",
            Measure::TradeoffRatio => "tradeoff_ratio",
            Measure::Manual => "manual",
        }
    }

    fn to_value(&self) -> Value {
        match self {
            Measure::Metric(m) => serde_json::to_value(m).expect("serialisable"),
            Measure::ChangeRate { from, to, steps } => serde_json::json!({
                "metric": "change_rate", "from": from, "to": to, "steps": steps
            }),
            Measure::TradeoffRatio => serde_json::json!({"metric": "tradeoff_ratio"}),
            Measure::Manual => Value::String("manual".into()),
        }
    }

    fn from_value(v: &Value, at: &str) -> Result<Self> {
        if v.as_str() == Some("manual") {
            return Ok(Measure::Manual);
        }
        let obj = v
            .as_object()
            .ok_or_else(|| Error::parse(at, "measure must be \"manual\" or an object with a \"metric\" field"))?;
        let name = obj
            .get("metric")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::parse(format!("{at}.metric"), "missing metric name"))?;
        match name {
            "change_rate" => {
                #[derive(Deserialize)]
                #[serde(deny_unknown_fields)]
                struct Raw {
                    #[allow(dead_code)]
                    metric: String,
                    from: Vec<f64>,
                    to: Vec<f64>,
                    steps: usize,
                }
                let r: Raw = serde_json::from_value(v.clone()).map_err(|e| Error::parse(at, e.to_string()))?;
                if r.from.is_empty() || r.from.len() != r.to.len() {
                    return Err(Error::parse(at, "change_rate path ends must share a non-zero width"));
                }
                if r.steps == 0 {
                    return Err(Error::parse(format!("{at}.steps"), "path needs at least one step"));
                }
                Ok(Measure::ChangeRate {
                    from: r.from,
                    to: r.to,
                    steps: r.steps,
                })
            }
            "tradeoff_ratio" => {
                if obj.len() > 1 {
                    return Err(Error::parse(at, "tradeoff_ratio takes no parameters"));
                }
                Ok(Measure::TradeoffRatio)
            }
            _ => {
                let m: MetricKind = serde_json::from_value(v.clone()).map_err(|e| {
                    if e.to_string().starts_with("unknown variant") {
                        Error::parse(format!("{at}.metric"), format!("unknown measure '{name}'"))
                    } else {
                        Error::parse(at, e.to_string())
                    }
                })?;
                m.validate().map_err(|e| Error::parse(at, e.to_string()))?;
                Ok(Measure::Metric(m))
            }
        }
    }
}

impl Serialize for Measure {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_value().serialize(s)
    }
}

/// Evaluation data: a key into the suite's data map or an inline spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataRef {
    Named(String),
    Inline(DataSpec),
}

impl DataRef {
    pub fn resolve<'a>(&'a self, data: &'a BTreeMap<String, DataSpec>) -> Result<&'a DataSpec> {
        match self {
            DataRef::Inline(s) => Ok(s),
            DataRef::Named(n) => data
                .get(n)
                .ok_or_else(|| Error::Config(format!("unknown data entry '{n}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AcceptanceCriterion {
    pub id: String,
    pub category: RequirementCategory,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<DataRef>,
    pub measure: Measure,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparator: Option<Comparator>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub test_depth: Vec<Level>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub note: String,
}

/// Result of one test case or criterion check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Error,
    Skipped,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Pass => "pass",
            Outcome::Fail => "fail",
            Outcome::Error => "error",
            Outcome::Skipped => "skipped",
        })
    }
}

impl AcceptanceCriterion {
    pub fn is_manual(&self) -> bool {
        self.measure == Measure::Manual
    }

    /// Binary decision on a measured value; inclusive at the threshold.
    pub fn evaluate(&self, measured: f64) -> Outcome {
        match (self.comparator, self.threshold) {
            (Some(c), Some(t)) if !measured.is_nan() => {
                if c.holds(measured, t) {
                    Outcome::Pass
                } else {
                    Outcome::Fail
                }
            }
            _ => Outcome::Error,
        }
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, at: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::parse(format!("{at}.{key}"), "missing field"))
}

fn parse_comparator(v: &Value, at: &str) -> Result<Comparator> {
    match v.as_str() {
        Some("le" | "<=") => Ok(Comparator::Le),
        Some("ge" | ">=") => Ok(Comparator::Ge),
        _ => Err(Error::parse(at, format!("comparator must be le or ge, got {v}"))),
    }
}

const KNOWN_FIELDS: [&str; 8] = [
    "id",
    "category",
    "data",
    "measure",
    "comparator",
    "threshold",
    "test_depth",
    "note",
];

fn parse_one(v: &Value, at: &str, data: &BTreeMap<String, DataSpec>) -> Result<AcceptanceCriterion> {
    let obj = v.as_object().ok_or_else(|| Error::parse(at, "criterion must be an object"))?;
    if let Some(k) = obj.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
        return Err(Error::parse(format!("{at}.{k}"), "unknown field"));
    }
    let id = field(obj, "id", at)?
        .as_str()
        .filter(|s| !s.is_empty() && !s.contains('@'))
        .ok_or_else(|| Error::parse(format!("{at}.id"), "id must be a non-empty string without '@'"))?
        .to_string();
    let category: RequirementCategory = serde_json::from_value(field(obj, "category", at)?.clone())
        .map_err(|e| Error::parse(format!("{at}.category"), e.to_string()))?;
    let measure = Measure::from_value(field(obj, "measure", at)?, &format!("{at}.measure"))?;
    let note = match obj.get("note") {
        None => String::new(),
        Some(n) => n
            .as_str()
            .ok_or_else(|| Error::parse(format!("{at}.note"), "note must be a string"))?
            .to_string(),
    };
    let data_ref = obj
        .get("data")
        .map(|d| {
            serde_json::from_value::<DataRef>(d.clone())
                .map_err(|_| Error::parse(format!("{at}.data"), "expected a data name or a data spec"))
        })
        .transpose()?;
    let test_depth: Vec<Level> = match obj.get("test_depth") {
        None => vec![Level::Global],
        Some(d) => serde_json::from_value(d.clone()).map_err(|e| Error::parse(format!("{at}.test_depth"), e.to_string()))?,
    };

    if measure == Measure::Manual {
        return Ok(AcceptanceCriterion {
            id,
            category,
            data: data_ref,
            measure,
            comparator: None,
            threshold: None,
            test_depth: Vec::new(),
            note,
        });
    }
    if category.is_qualitative() {
        return Err(Error::parse(
            format!("{at}.measure"),
            format!("category {category:?} can only be asserted with measure \"manual\""),
        ));
    }

    let comparator = parse_comparator(field(obj, "comparator", at)?, &format!("{at}.comparator"))?;
    let threshold = field(obj, "threshold", at)?
        .as_f64()
        .filter(|t| t.is_finite())
        .ok_or_else(|| Error::parse(format!("{at}.threshold"), "threshold must be a finite number"))?;

    if test_depth.is_empty() {
        return Err(Error::parse(format!("{at}.test_depth"), "at least one level required"));
    }
    if test_depth.contains(&Level::Technical) {
        return Err(Error::parse(
            format!("{at}.test_depth"),
            "technical tests are generated for every estimator and cannot be criterion-backed",
        ));
    }
    if test_depth.iter().collect::<BTreeSet<_>>().len() != test_depth.len() {
        return Err(Error::parse(format!("{at}.test_depth"), "repeated level"));
    }
    // complementary cases bound the disparity between groups from above
    if test_depth.contains(&Level::Complementary) && (comparator != Comparator::Le || threshold < 0.0) {
        return Err(Error::parse(
            format!("{at}.comparator"),
            "complementary cases bound group disparity and need 'le' with a threshold >= 0",
        ));
    }

    // Comparators that can never express "good enough".
    let inverted = match &measure {
        Measure::Metric(m) => {
            (comparator == Comparator::Ge && m.lower_is_better())
                || (comparator == Comparator::Le && m.non_negative() && threshold < 0.0)
        }
        Measure::ChangeRate { .. } | Measure::TradeoffRatio => comparator == Comparator::Ge || threshold < 0.0,
        Measure::Manual => false,
    };
    if inverted {
        return Err(Error::parse(
            format!("{at}.comparator"),
            format!(
                "'{} {} {threshold}' inverts the direction of {}",
                measure.name(),
                comparator.symbol(),
                measure.name()
            ),
        ));
    }

    match &measure {
        Measure::ChangeRate { .. } => {
            if test_depth != [Level::Global] {
                return Err(Error::parse(format!("{at}.test_depth"), "change_rate runs at the global level only"));
            }
        }
        _ => {
            let d = data_ref
                .as_ref()
                .ok_or_else(|| Error::parse(format!("{at}.data"), "missing field"))?;
            let spec = d.resolve(data).map_err(|e| Error::parse(format!("{at}.data"), e.to_string()))?;
            let is_search = matches!(spec, DataSpec::SearchGenerated { .. });
            if is_search {
                let point = matches!(&measure, Measure::Metric(m) if m.point_score_kind().is_some());
                if !point {
                    return Err(Error::parse(
                        format!("{at}.measure"),
                        "search-generated data needs a point-score measure (etl or quantile)",
                    ));
                }
                if test_depth != [Level::SubsetPointwise] {
                    return Err(Error::parse(format!("{at}.test_depth"), "search results are subset_pointwise data"));
                }
            }
            if measure == Measure::TradeoffRatio && test_depth != [Level::Global] {
                return Err(Error::parse(format!("{at}.test_depth"), "tradeoff_ratio runs at the global level only"));
            }
        }
    }

    Ok(AcceptanceCriterion {
        id,
        category,
        data: data_ref,
        measure,
        comparator: Some(comparator),
        threshold: Some(threshold),
        test_depth,
        note,
    })
}

/// Parses and validates a `criteria` array. Errors carry the JSON path of the
/// offending element, e.g. `criteria[2].measure.metric`.
pub fn parse_criteria(doc: &Value, data: &BTreeMap<String, DataSpec>) -> Result<Vec<AcceptanceCriterion>> {
    let items = doc
        .as_array()
        .ok_or_else(|| Error::parse("criteria", "expected an array"))?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(items.len());
    for (i, v) in items.iter().enumerate() {
        let at = format!("criteria[{i}]");
        let c = parse_one(v, &at, data)?;
        if !seen.insert(c.id.clone()) {
            return Err(Error::parse(format!("{at}.id"), format!("duplicate criterion id '{}'", c.id)));
        }
        out.push(c);
    }
    Ok(out)
}
