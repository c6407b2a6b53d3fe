//! Operational design domain as semantic boundaries plus labelled scenarios.
//!
//! A point is `Out` when any dimension leaves its bounds, `Borderline` when it
//! is inside but within `epsilon * (max - min)` of a continuous bound, and
//! `In` otherwise. The band lies inside the boundary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::SemanticValue;

pub const DEFAULT_BORDER_BAND: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Domain {
    Continuous { min: f64, max: f64 },
    Categorical { values: Vec<String> },
}

impl Domain {
    fn validate(&self, name: &str) -> Result<()> {
        match self {
            Domain::Continuous { min, max } if !(min < max) => Err(Error::Spec(format!(
                "dimension '{name}': min {min} must be below max {max}"
            ))),
            Domain::Categorical { values } if values.is_empty() => {
                Err(Error::Spec(format!("dimension '{name}': empty category set")))
            }
            _ => Ok(()),
        }
    }

    /// `self` lies within `outer`.
    fn within(&self, outer: &Domain) -> bool {
        match (self, outer) {
            (Domain::Continuous { min, max }, Domain::Continuous { min: lo, max: hi }) => min >= lo && max <= hi,
            (Domain::Categorical { values }, Domain::Categorical { values: allowed }) => {
                values.iter().all(|v| allowed.contains(v))
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDimension {
    pub name: String,
    #[serde(flatten)]
    pub domain: Domain,
}

pub type SemanticPoint = BTreeMap<String, SemanticValue>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub values: SemanticPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddSpec {
    pub dimensions: Vec<SemanticDimension>,
    #[serde(default = "default_band")]
    pub epsilon: f64,
    /// Narrower ranges where the model itself must perform; each has to lie
    /// inside the corresponding uncertainty range.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub performance: BTreeMap<String, Domain>,
    #[serde(default)]
    pub in_domain: Vec<Scenario>,
    #[serde(default)]
    pub out_of_domain: Vec<Scenario>,
    #[serde(default)]
    pub borderline: Vec<Scenario>,
}

fn default_band() -> f64 {
    DEFAULT_BORDER_BAND
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Containment {
    In,
    Borderline,
    Out,
}

impl fmt::Display for Containment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Containment::In => "in",
            Containment::Borderline => "borderline",
            Containment::Out => "out",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// A scenario whose classification contradicts the set it is listed in.
    Scenario {
        set: String,
        name: String,
        expected: String,
        actual: Containment,
    },
    /// A scenario that cannot be classified at all.
    InvalidScenario { set: String, name: String, reason: String },
    /// A performance range that is not contained in the uncertainty range.
    PerformanceRange { dimension: String, reason: String },
}

impl OddSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Spec(format!("border band {} not in (0, 0.5)", self.epsilon)));
        }
        let mut seen = BTreeSet::new();
        for d in &self.dimensions {
            if !seen.insert(d.name.as_str()) {
                return Err(Error::Spec(format!("dimension '{}' declared twice", d.name)));
            }
            d.domain.validate(&d.name)?;
        }
        Ok(())
    }

    pub fn dimension(&self, name: &str) -> Option<&SemanticDimension> {
        self.dimensions.iter().find(|d| d.name == name)
    }

    /// Classifies a semantic point.
    pub fn contains(&self, point: &SemanticPoint) -> Result<Containment> {
        let mut border = false;
        for d in &self.dimensions {
            let v = point
                .get(&d.name)
                .ok_or_else(|| Error::Spec(format!("point has no value for dimension '{}'", d.name)))?;
            match (&d.domain, v) {
                (Domain::Continuous { min, max }, SemanticValue::Number(x)) => {
                    if !x.is_finite() {
                        return Err(Error::Spec(format!("non-finite value for '{}'", d.name)));
                    }
                    if x < min || x > max {
                        return Ok(Containment::Out);
                    }
                    let band = self.epsilon * (max - min);
                    if x - min <= band || max - x <= band {
                        border = true;
                    }
                }
                (Domain::Categorical { values }, SemanticValue::Category(c)) => {
                    if !values.contains(c) {
                        return Ok(Containment::Out);
                    }
                }
                _ => {
                    return Err(Error::Spec(format!(
                        "value {v} has the wrong kind for dimension '{}'",
                        d.name
                    )))
                }
            }
        }
        Ok(if border {
            Containment::Borderline
        } else {
            Containment::In
        })
    }

    /// Re-classifies every scenario and checks the performance ranges.
    pub fn check_consistency(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let sets: [(&str, &[Scenario], &dyn Fn(Containment) -> bool, &str); 3] = [
            ("in_domain", &self.in_domain, &|c| c != Containment::Out, "in or borderline"),
            ("out_of_domain", &self.out_of_domain, &|c| c == Containment::Out, "out"),
            ("borderline", &self.borderline, &|c| c == Containment::Borderline, "borderline"),
        ];
        for (set, scenarios, ok, expected) in sets {
            for s in scenarios {
                match self.contains(&s.values) {
                    Ok(c) if ok(c) => {}
                    Ok(c) => out.push(Violation::Scenario {
                        set: set.into(),
                        name: s.name.clone(),
                        expected: expected.into(),
                        actual: c,
                    }),
                    Err(e) => out.push(Violation::InvalidScenario {
                        set: set.into(),
                        name: s.name.clone(),
                        reason: e.to_string(),
                    }),
                }
            }
        }
        for (name, range) in &self.performance {
            match self.dimension(name) {
                None => out.push(Violation::PerformanceRange {
                    dimension: name.clone(),
                    reason: "no such dimension".into(),
                }),
                Some(d) if !range.within(&d.domain) => out.push(Violation::PerformanceRange {
                    dimension: name.clone(),
                    reason: format!("{range:?} exceeds {:?}", d.domain),
                }),
                _ => {}
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(v: f64) -> SemanticValue {
        SemanticValue::Number(v)
    }

    fn point(pairs: &[(&str, SemanticValue)]) -> SemanticPoint {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn scenario(name: &str, pairs: &[(&str, SemanticValue)]) -> Scenario {
        Scenario {
            name: name.into(),
            values: point(pairs),
        }
    }

    /// One continuous axis [0, 10] and a weather category, with crosses
    /// outside the interval and borderline points hugging the edges.
    fn toy() -> OddSpec {
        let cat = |s: &str| SemanticValue::Category(s.into());
        OddSpec {
            dimensions: vec![
                SemanticDimension {
                    name: "brightness".into(),
                    domain: Domain::Continuous { min: 0.0, max: 10.0 },
                },
                SemanticDimension {
                    name: "weather".into(),
                    domain: Domain::Categorical {
                        values: vec!["clear".into(), "rain".into()],
                    },
                },
            ],
            epsilon: 0.05,
            performance: [(
                "brightness".to_string(),
                Domain::Continuous { min: 2.0, max: 8.0 },
            )]
            .into(),
            in_domain: vec![
                scenario("i1", &[("brightness", num(3.0)), ("weather", cat("clear"))]),
                scenario("i2", &[("brightness", num(6.5)), ("weather", cat("rain"))]),
            ],
            out_of_domain: vec![
                scenario("o1", &[("brightness", num(-1.0)), ("weather", cat("clear"))]),
                scenario("o2", &[("brightness", num(11.0)), ("weather", cat("rain"))]),
                scenario("o3", &[("brightness", num(5.0)), ("weather", cat("snow"))]),
            ],
            borderline: vec![
                scenario("b1", &[("brightness", num(0.2)), ("weather", cat("clear"))]),
                scenario("b2", &[("brightness", num(9.9)), ("weather", cat("rain"))]),
            ],
        }
    }

    #[test]
    fn classification_cases() {
        let odd = toy();
        odd.validate().unwrap();
        let cat = SemanticValue::Category("clear".into());
        assert_eq!(
            odd.contains(&point(&[("brightness", num(5.0)), ("weather", cat.clone())])).unwrap(),
            Containment::In
        );
        assert_eq!(
            odd.contains(&point(&[("brightness", num(10.01)), ("weather", cat.clone())])).unwrap(),
            Containment::Out
        );
        assert_eq!(
            odd.contains(&point(&[("brightness", num(10.0 - 0.1)), ("weather", cat.clone())]))
                .unwrap(),
            Containment::Borderline
        );
        assert!(matches!(
            odd.contains(&point(&[("brightness", num(5.0))])),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn toy_is_consistent_by_reclassification() {
        let odd = toy();
        assert!(odd.check_consistency().is_empty());
        // brute force: every listed point really carries its set's label
        for s in &odd.in_domain {
            assert_ne!(odd.contains(&s.values).unwrap(), Containment::Out);
        }
        for s in &odd.out_of_domain {
            assert_eq!(odd.contains(&s.values).unwrap(), Containment::Out);
        }
        for s in &odd.borderline {
            assert_eq!(odd.contains(&s.values).unwrap(), Containment::Borderline);
        }
    }

    #[test]
    fn planted_ood_point_is_reported() {
        let mut odd = toy();
        odd.out_of_domain.push(scenario(
            "planted",
            &[("brightness", num(5.0)), ("weather", SemanticValue::Category("rain".into()))],
        ));
        let v = odd.check_consistency();
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::Scenario { name, actual: Containment::In, .. } if name == "planted"));
    }

    #[test]
    fn performance_overflow_is_reported() {
        let mut odd = toy();
        odd.performance
            .insert("brightness".into(), Domain::Continuous { min: -1.0, max: 8.0 });
        let v = odd.check_consistency();
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::PerformanceRange { dimension, .. } if dimension == "brightness"));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut odd = toy();
        odd.epsilon = 0.5;
        assert!(odd.validate().is_err());
        let mut odd = toy();
        odd.dimensions[0].domain = Domain::Continuous { min: 1.0, max: 1.0 };
        assert!(odd.validate().is_err());
        let mut odd = toy();
        odd.dimensions[1].domain = Domain::Categorical { values: vec![] };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn parses_from_json() {
        let odd: OddSpec = serde_json::from_str(
            r#"{"dimensions":[{"name":"shift","kind":"continuous","min":0,"max":2}],
                "in_domain":[{"name":"mid","values":{"shift":1.0}}]}"#,
        )
        .unwrap();
        assert_eq!(odd.epsilon, DEFAULT_BORDER_BAND);
        assert!(odd.check_consistency().is_empty());
    }
}
