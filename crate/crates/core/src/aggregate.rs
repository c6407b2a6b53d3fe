//! Logic trees over test verdicts, evaluated in three-valued Kleene logic.
//!
//! Errored or skipped tests enter as `Inconclusive` and a node only decides
//! when the decision holds for every completion of its inconclusive inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::criteria::Outcome;
use crate::error::{Error, Result};

/// Ordered `Fail < Inconclusive < Pass`, so `And` is `min` and `Or` is `max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Fail,
    Inconclusive,
    Pass,
}

impl From<Outcome> for Verdict {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Pass => Verdict::Pass,
            Outcome::Fail => Verdict::Fail,
            Outcome::Error | Outcome::Skipped => Verdict::Inconclusive,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
            Verdict::Pass => "pass",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LogicNode {
    Leaf(String),
    And(Vec<LogicNode>),
    Or(Vec<LogicNode>),
    #[serde(rename = "k_of_n")]
    KOfN { k: usize, children: Vec<LogicNode> },
    Weighted {
        weights: Vec<f64>,
        threshold: f64,
        children: Vec<LogicNode>,
    },
}

impl LogicNode {
    pub fn and_of<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        LogicNode::And(ids.into_iter().map(|s| LogicNode::Leaf(s.into())).collect())
    }

    fn kind(&self) -> &'static str {
        match self {
            LogicNode::Leaf(_) => "leaf",
            LogicNode::And(_) => "and",
            LogicNode::Or(_) => "or",
            LogicNode::KOfN { .. } => "k_of_n",
            LogicNode::Weighted { .. } => "weighted",
        }
    }

    /// Leaf ids in depth-first order.
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            LogicNode::Leaf(id) => out.push(id),
            LogicNode::And(c) | LogicNode::Or(c) => c.iter().for_each(|n| n.collect_leaves(out)),
            LogicNode::KOfN { children, .. } | LogicNode::Weighted { children, .. } => {
                children.iter().for_each(|n| n.collect_leaves(out))
            }
        }
    }

    fn check_shape(&self, path: &str) -> Result<()> {
        let bad = |m: String| Err(Error::Structural(format!("{path}: {m}")));
        let children = match self {
            LogicNode::Leaf(_) => return Ok(()),
            LogicNode::And(c) | LogicNode::Or(c) => c,
            LogicNode::KOfN { k, children } => {
                if *k < 1 || *k > children.len() {
                    return bad(format!("k = {k} outside 1..={}", children.len()));
                }
                children
            }
            LogicNode::Weighted {
                weights,
                threshold,
                children,
            } => {
                if weights.len() != children.len() {
                    return bad(format!("{} weights for {} children", weights.len(), children.len()));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                    return bad("weights must be finite and >= 0".into());
                }
                if !(weights.iter().sum::<f64>() > 0.0) {
                    return bad("weights sum to zero".into());
                }
                if !threshold.is_finite() {
                    return bad("threshold must be finite".into());
                }
                children
            }
        };
        if children.is_empty() {
            return bad(format!("{} node without children", self.kind()));
        }
        for (i, c) in children.iter().enumerate() {
            c.check_shape(&format!("{path}.{i}"))?;
        }
        Ok(())
    }

    /// Shape checks plus: every leaf resolvable, no leaf id repeated.
    pub fn validate(&self, known: &dyn Fn(&str) -> bool) -> Result<()> {
        self.check_shape("root")?;
        let mut seen = BTreeSet::new();
        for id in self.leaves() {
            if !known(id) {
                return Err(Error::Structural(format!("dangling leaf '{id}'")));
            }
            if !seen.insert(id) {
                return Err(Error::Structural(format!("leaf '{id}' referenced twice")));
            }
        }
        Ok(())
    }
}

/// Verdict of one tree node; `path` is `root` followed by child indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAnnotation {
    pub path: String,
    pub node: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeEvaluation {
    pub verdict: Verdict,
    pub nodes: Vec<NodeAnnotation>,
}

fn kleene_count(children: &[Verdict], k: usize) -> Verdict {
    let n = children.len();
    let pass = children.iter().filter(|v| **v == Verdict::Pass).count();
    let fail = children.iter().filter(|v| **v == Verdict::Fail).count();
    if pass >= k {
        Verdict::Pass
    } else if fail > n - k {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    }
}

fn kleene_weighted(children: &[Verdict], weights: &[f64], threshold: f64) -> Verdict {
    let total: f64 = weights.iter().sum();
    let share = |keep: &dyn Fn(Verdict) -> bool| -> f64 {
        children
            .iter()
            .zip(weights)
            .filter(|(v, _)| keep(**v))
            .map(|(_, w)| w)
            .sum::<f64>()
            / total
    };
    if share(&|v| v == Verdict::Pass) >= threshold {
        Verdict::Pass
    } else if share(&|v| v != Verdict::Fail) < threshold {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    }
}

fn eval_node(node: &LogicNode, leaf: &dyn Fn(&str) -> Verdict, path: String, out: &mut Vec<NodeAnnotation>) -> Verdict {
    let mut children = |c: &[LogicNode]| -> Vec<Verdict> {
        c.iter()
            .enumerate()
            .map(|(i, n)| eval_node(n, leaf, format!("{path}.{i}"), out))
            .collect()
    };
    let (label, verdict) = match node {
        LogicNode::Leaf(id) => (format!("leaf:{id}"), leaf(id)),
        LogicNode::And(c) => ("and".into(), children(c).into_iter().min().expect("non-empty")),
        LogicNode::Or(c) => ("or".into(), children(c).into_iter().max().expect("non-empty")),
        LogicNode::KOfN { k, children: c } => (format!("k_of_n({k})"), kleene_count(&children(c), *k)),
        LogicNode::Weighted {
            weights,
            threshold,
            children: c,
        } => (format!("weighted({threshold})"), kleene_weighted(&children(c), weights, *threshold)),
    };
    out.push(NodeAnnotation {
        path,
        node: label,
        verdict,
    });
    verdict
}

/// Evaluates a validated tree; annotations come in path order.
pub fn evaluate_tree(tree: &LogicNode, results: &BTreeMap<String, Verdict>) -> Result<TreeEvaluation> {
    tree.validate(&|id| results.contains_key(id))?;
    let mut nodes = Vec::new();
    let verdict = eval_node(tree, &|id| results[id], "root".into(), &mut nodes);
    nodes.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(TreeEvaluation { verdict, nodes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Every criterion must pass.
    #[default]
    Strict,
    /// A custom argument whose leaves are criterion ids.
    Tree(LogicNode),
}

/// Combines per-criterion verdicts. Under `Tree`, every criterion listed in
/// `verdicts` must appear as a leaf and no leaf may be unknown.
pub fn overall(verdicts: &BTreeMap<String, Verdict>, policy: &Policy) -> Result<TreeEvaluation> {
    let tree = match policy {
        Policy::Strict => {
            if verdicts.is_empty() {
                return Ok(TreeEvaluation {
                    verdict: Verdict::Pass,
                    nodes: Vec::new(),
                });
            }
            LogicNode::and_of(verdicts.keys().cloned())
        }
        Policy::Tree(t) => {
            let leaves: BTreeSet<&str> = t.leaves().into_iter().collect();
            if let Some(missing) = verdicts.keys().find(|k| !leaves.contains(k.as_str())) {
                return Err(Error::Structural(format!("criterion '{missing}' missing from the overall tree")));
            }
            t.clone()
        }
    };
    evaluate_tree(&tree, verdicts)
}
