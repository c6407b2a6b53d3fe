//! Suite reports: verdict aggregation, integrity recomputation, rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aggregate::{self, LogicNode, NodeAnnotation, Policy, Verdict};
use crate::criteria::{Outcome, RequirementCategory};
use crate::error::{Error, Result};
use crate::harness::TestResult;
use crate::odd::Violation;
use crate::suite::{Suite, TECHNICAL};

pub const SCHEMA_VERSION: u32 = 1;

/// Keys holding wall-clock data inside each result.
pub const TIMING_KEYS: [&str; 2] = ["runtime_s", "timing"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionVerdict {
    pub id: String,
    /// Absent for the technical pseudo-criterion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<RequirementCategory>,
    pub verdict: Verdict,
    pub cases: Vec<String>,
    pub tree: LogicNode,
    pub nodes: Vec<NodeAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManualCriterion {
    pub id: String,
    pub category: RequirementCategory,
    #[serde(default)]
    pub note: String,
    pub status: String,
}

/// A criterion whose cases disagree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conflict {
    pub criterion: String,
    pub verdicts: BTreeMap<String, Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub tool_version: String,
    pub os: String,
    pub arch: String,
    pub note: String,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            note: "timing fields (runtime_s, timing) vary between runs and are excluded from comparisons".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub suite_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub estimator: String,
    pub fail_fast: bool,
    pub results: Vec<TestResult>,
    pub criteria: Vec<CriterionVerdict>,
    pub manual_criteria: Vec<ManualCriterion>,
    pub overall_policy: Policy,
    pub overall: Verdict,
    pub overall_nodes: Vec<NodeAnnotation>,
    /// Set when the overall verdict is inconclusive; such runs exit like failures.
    pub inconclusive: bool,
    pub conflicts: Vec<Conflict>,
    pub odd_violations: Vec<Violation>,
    /// The `criteria` array of the config, verbatim.
    pub criteria_config: Value,
    pub environment: Environment,
}

fn leaf_verdicts(results: &[TestResult]) -> BTreeMap<String, Verdict> {
    results.iter().map(|r| (r.id.clone(), Verdict::from(r.verdict))).collect()
}

fn conflicts(results: &[TestResult]) -> Vec<Conflict> {
    let mut by_criterion: BTreeMap<&str, BTreeMap<String, Outcome>> = BTreeMap::new();
    for r in results {
        by_criterion
            .entry(&r.criterion)
            .or_default()
            .insert(r.id.clone(), r.verdict);
    }
    by_criterion
        .into_iter()
        .filter(|(_, v)| v.values().collect::<BTreeSet<_>>().len() > 1)
        .map(|(c, verdicts)| Conflict {
            criterion: c.to_string(),
            verdicts,
        })
        .collect()
}

impl Report {
    /// Aggregates `results` (sorted by id) into criterion and overall verdicts.
    pub fn build(suite: &Suite, estimator: &str, results: Vec<TestResult>) -> Result<Report> {
        let leaves = leaf_verdicts(&results);
        let mut criteria = Vec::new();
        for (id, cases) in suite.case_ids() {
            let tree = suite
                .trees
                .get(&id)
                .cloned()
                .unwrap_or_else(|| LogicNode::and_of(cases.iter().cloned()));
            let eval = aggregate::evaluate_tree(&tree, &leaves)?;
            criteria.push(CriterionVerdict {
                category: suite.criteria.iter().find(|c| c.id == id).map(|c| c.category),
                id,
                verdict: eval.verdict,
                cases,
                tree,
                nodes: eval.nodes,
            });
        }
        let per_criterion: BTreeMap<String, Verdict> = criteria.iter().map(|c| (c.id.clone(), c.verdict)).collect();
        let overall = aggregate::overall(&per_criterion, &suite.overall)?;
        let manual_criteria = suite
            .criteria
            .iter()
            .filter(|c| c.is_manual())
            .map(|c| ManualCriterion {
                id: c.id.clone(),
                category: c.category,
                note: c.note.clone(),
                status: "asserted_by_config".into(),
            })
            .collect();
        let odd_violations = suite.odd.as_ref().map(|o| o.check_consistency()).unwrap_or_default();
        for v in &odd_violations {
            log::warn!("ODD inconsistency: {v:?}");
        }
        Ok(Report {
            schema_version: SCHEMA_VERSION,
            suite_id: suite.suite_id.clone(),
            seed: suite.seed,
            config_digest: suite.digest.clone(),
            estimator: estimator.to_string(),
            fail_fast: suite.fail_fast,
            conflicts: conflicts(&results),
            results,
            criteria,
            manual_criteria,
            overall_policy: suite.overall.clone(),
            overall: overall.verdict,
            overall_nodes: overall.nodes,
            inconclusive: overall.verdict == Verdict::Inconclusive,
            odd_violations,
            criteria_config: suite.criteria_doc.clone(),
            environment: Environment::current(),
        })
    }

    /// Parses a report, rejecting other schema versions.
    pub fn from_json(text: &str) -> Result<Report> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::parse("report", e.to_string()))?;
        match v.get("schema_version").and_then(Value::as_u64) {
            Some(n) if n == SCHEMA_VERSION as u64 => {}
            other => {
                return Err(Error::Spec(format!(
                    "report schema version {other:?} is not {SCHEMA_VERSION}"
                )))
            }
        }
        serde_json::from_value(v).map_err(|e| Error::parse("report", e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serialisable") + "\n"
    }

    /// Re-derives every verdict from the embedded results and trees.
    /// Returns one message per inconsistency.
    pub fn check_integrity(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for r in &self.results {
            if let (Some(rule), Some(v)) = (r.rule, r.value) {
                let expect = rule.judge(v);
                if matches!(r.verdict, Outcome::Pass | Outcome::Fail) && r.verdict != expect {
                    warnings.push(format!(
                        "test {}: verdict {} but value {v} gives {expect}",
                        r.id, r.verdict
                    ));
                }
            }
        }
        let leaves = leaf_verdicts(&self.results);
        let mut per_criterion = BTreeMap::new();
        for c in &self.criteria {
            match aggregate::evaluate_tree(&c.tree, &leaves) {
                Ok(e) if e.verdict == c.verdict => {}
                Ok(e) => warnings.push(format!(
                    "criterion {}: recorded {} but results give {}",
                    c.id, c.verdict, e.verdict
                )),
                Err(e) => warnings.push(format!("criterion {}: {e}", c.id)),
            }
            per_criterion.insert(c.id.clone(), c.verdict);
        }
        match aggregate::overall(&per_criterion, &self.overall_policy) {
            Ok(e) if e.verdict == self.overall => {}
            Ok(e) => warnings.push(format!(
                "overall: recorded {} but criteria give {}",
                self.overall, e.verdict
            )),
            Err(e) => warnings.push(format!("overall: {e}")),
        }
        if self.inconclusive != (self.overall == Verdict::Inconclusive) {
            warnings.push("inconclusive flag disagrees with the overall verdict".into());
        }
        warnings
    }

    /// Markdown summary: one table per criterion with one row per test case.
    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Uncertainty test report: {}\n", self.suite_id);
        let _ = writeln!(md, "- overall verdict: **{}**", self.overall.to_string().to_uppercase());
        let policy = match &self.overall_policy {
            Policy::Strict => "strict",
            Policy::Tree(_) => "custom tree",
        };
        let _ = writeln!(md, "- policy: {policy}");
        let _ = writeln!(md, "- estimator: {}", self.estimator);
        let _ = writeln!(md, "- seed: {}", self.seed);
        let _ = writeln!(md, "- config digest: `{}`", self.config_digest);
        let _ = writeln!(md, "- fail-fast: {}\n", self.fail_fast);

        let warnings = self.check_integrity();
        if !warnings.is_empty() {
            let _ = writeln!(md, "## Integrity warnings\n");
            for w in &warnings {
                let _ = writeln!(md, "- WARNING: {w}");
            }
            md.push('\n');
        }

        let _ = writeln!(md, "## Criteria\n");
        let by_id: BTreeMap<&str, &TestResult> = self.results.iter().map(|r| (r.id.as_str(), r)).collect();
        for c in &self.criteria {
            let category = c
                .category
                .map(|k| serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
                .unwrap_or_else(|| TECHNICAL.to_string());
            let _ = writeln!(md, "### {} ({category}): {}\n", c.id, c.verdict);
            let _ = writeln!(md, "| test | level | verdict | value | rule | note |");
            let _ = writeln!(md, "|---|---|---|---|---|---|");
            for case in &c.cases {
                let Some(r) = by_id.get(case.as_str()) else {
                    let _ = writeln!(md, "| {case} | | missing | | | |");
                    continue;
                };
                let value = r.value.map(|v| format!("{v:.6}")).unwrap_or_default();
                let rule = match (&r.rule, &r.subject) {
                    (Some(rule), Some(s)) => rule.describe(s),
                    _ => String::new(),
                };
                let note = r.message.as_deref().unwrap_or("").replace('|', "\\|");
                let _ = writeln!(md, "| {} | {} | {} | {value} | {rule} | {note} |", r.id, r.level, r.verdict);
            }
            md.push('\n');
        }

        let _ = writeln!(md, "## Conflicting results\n");
        if self.conflicts.is_empty() {
            let _ = writeln!(md, "None.\n");
        } else {
            for c in &self.conflicts {
                let list: Vec<String> = c.verdicts.iter().map(|(k, v)| format!("{k}: {v}")).collect();
                let _ = writeln!(md, "- FLAGGED {}: {}", c.criterion, list.join(", "));
            }
            md.push('\n');
        }

        if !self.manual_criteria.is_empty() {
            let _ = writeln!(md, "## Manually asserted criteria\n");
            for m in &self.manual_criteria {
                let _ = writeln!(md, "- {} ({:?}): {} {}", m.id, m.category, m.status, m.note);
            }
            md.push('\n');
        }
        if !self.odd_violations.is_empty() {
            let _ = writeln!(md, "## ODD inconsistencies\n");
            for v in &self.odd_violations {
                let _ = writeln!(md, "- {}", serde_json::to_string(v).unwrap_or_default());
            }
            md.push('\n');
        }
        md
    }
}

/// Removes wall-clock fields from a serialised report so two runs can be
/// compared byte for byte.
pub fn strip_timing(report: &mut Value) {
    if let Some(results) = report.get_mut("results").and_then(Value::as_array_mut) {
        for r in results {
            if let Some(o) = r.as_object_mut() {
                for k in TIMING_KEYS {
                    o.remove(k);
                }
            }
        }
    }
}
