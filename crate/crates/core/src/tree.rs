//! Concept trees: pairs grouped by branching layer into a chain.
//!
//! The root holds every pair, undifferentiated. Walking down the chain, each
//! node at layer `l` splits off the pairs whose branching layer is `l`, and
//! `remaining` counts the pairs still unbranched below it. Pairs that never
//! separate end up in the terminal inseparable set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::concept::PairAnalysis;
use crate::error::{Error, Result};

/// One counterfactual edit of a base text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConceptPairSpec {
    pub original_token: String,
    pub counterfactual_token: String,
    pub original_trace_label: String,
    pub counterfactual_trace_label: String,
    #[serde(default)]
    pub edited_token_index: Option<usize>,
}

impl ConceptPairSpec {
    /// A pair whose counterfactual trace is labeled by its replacement token.
    pub fn against_base(
        base_label: &str,
        original_token: &str,
        counterfactual_token: &str,
        edited_token_index: Option<usize>,
    ) -> Self {
        Self {
            original_token: original_token.to_string(),
            counterfactual_token: counterfactual_token.to_string(),
            original_trace_label: base_label.to_string(),
            counterfactual_trace_label: counterfactual_token.to_string(),
            edited_token_index,
        }
    }

    /// Parses `orig/cf` or `orig/cf@index`. The counterfactual trace label is
    /// `cf`; the original trace is `base_label`.
    pub fn parse_inline(spec: &str, base_label: &str) -> Result<Self> {
        let (pair, index) = match spec.rsplit_once('@') {
            Some((pair, idx)) => {
                let idx = idx.parse::<usize>().map_err(|_| {
                    Error::InvalidInput(format!("bad token index in pair {spec:?}"))
                })?;
                (pair, Some(idx))
            }
            None => (spec, None),
        };
        match pair.split_once('/') {
            Some((orig, cf)) if !orig.is_empty() && !cf.is_empty() => {
                Ok(Self::against_base(base_label, orig, cf, index))
            }
            _ => Err(Error::InvalidInput(format!(
                "pair {spec:?} is not of the form orig/cf[@index]"
            ))),
        }
    }

    /// `original/counterfactual`.
    pub fn label(&self) -> String {
        format!("{}/{}", self.original_token, self.counterfactual_token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchNode {
    pub layer: usize,
    /// Pair labels that first separate at `layer`, sorted.
    pub pairs: Vec<String>,
    /// Pairs still unbranched after this node.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TreeJson", try_from = "TreeJson")]
pub struct ConceptTree {
    pub total: usize,
    pub branches: Vec<BranchNode>,
    pub inseparable: Vec<String>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RootJson {
    layer: usize,
    remaining: usize,
}

#[derive(Clone, Serialize, Deserialize)]
struct TreeJson {
    root: RootJson,
    branches: Vec<BranchNode>,
    inseparable: Vec<String>,
}

impl From<ConceptTree> for TreeJson {
    fn from(t: ConceptTree) -> Self {
        Self {
            root: RootJson {
                layer: 0,
                remaining: t.total,
            },
            branches: t.branches,
            inseparable: t.inseparable,
        }
    }
}

impl TryFrom<TreeJson> for ConceptTree {
    type Error = Error;

    fn try_from(raw: TreeJson) -> Result<Self> {
        let tree = Self {
            total: raw.root.remaining,
            branches: raw.branches,
            inseparable: raw.inseparable,
        };
        tree.check()?;
        Ok(tree)
    }
}

pub fn build_tree(analyses: &[PairAnalysis]) -> Result<ConceptTree> {
    let first = analyses
        .first()
        .ok_or_else(|| Error::EmptyInput("no pair analyses to build a tree from".into()))?;
    let n_layers = first.n_layers();
    if let Some(bad) = analyses.iter().find(|a| a.n_layers() != n_layers) {
        return Err(Error::DimensionMismatch(format!(
            "pair {:?} has {} layers, expected {n_layers}",
            bad.pair_label,
            bad.n_layers()
        )));
    }

    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut inseparable = Vec::new();
    for a in analyses {
        match a.branching_layer {
            Some(l) => groups.entry(l).or_default().push(a.pair_label.clone()),
            None => inseparable.push(a.pair_label.clone()),
        }
    }
    inseparable.sort();

    let total = analyses.len();
    let mut remaining = total;
    let branches = groups
        .into_iter()
        .map(|(layer, mut pairs)| {
            pairs.sort();
            remaining -= pairs.len();
            BranchNode {
                layer,
                pairs,
                remaining,
            }
        })
        .collect();
    Ok(ConceptTree {
        total,
        branches,
        inseparable,
    })
}

impl ConceptTree {
    /// Checks the chain invariants.
    pub fn check(&self) -> Result<()> {
        let mut remaining = self.total;
        let mut last_layer = None;
        for b in &self.branches {
            if b.pairs.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "branch at layer {} is empty",
                    b.layer
                )));
            }
            if last_layer.is_some_and(|l| b.layer <= l) {
                return Err(Error::InvalidInput(format!(
                    "branch layers not strictly increasing at layer {}",
                    b.layer
                )));
            }
            last_layer = Some(b.layer);
            remaining = remaining.checked_sub(b.pairs.len()).ok_or_else(|| {
                Error::InvalidInput("branches hold more pairs than the root".into())
            })?;
            if b.remaining != remaining {
                return Err(Error::InvalidInput(format!(
                    "branch at layer {} declares remaining {} but {} are left",
                    b.layer, b.remaining, remaining
                )));
            }
        }
        if remaining != self.inseparable.len() {
            return Err(Error::InvalidInput(format!(
                "{} pairs unaccounted for but {} inseparable",
                remaining,
                self.inseparable.len()
            )));
        }
        Ok(())
    }

    /// `{root: {layer, remaining}, branches: [{layer, pairs, remaining}], inseparable}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("tree serializes")
    }

    /// Parses and checks the chain invariants.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: TreeJson = serde_json::from_str(text)?;
        Self::try_from(raw)
    }

    /// Graphviz rendering: the chain of branch points top to bottom, each
    /// with its split-off pairs as leaves, and a cluster for inseparable pairs.
    pub fn to_dot(&self) -> String {
        let mut s = String::new();
        s.push_str("digraph concept_tree {\n");
        s.push_str("  rankdir=TB;\n");
        s.push_str("  node [shape=box, fontname=\"Helvetica\"];\n");
        let _ = writeln!(s, "  root [label=\"root\\nn={}\"];", self.total);
        let mut parent = "root".to_string();
        let mut leaf = 0usize;
        for b in &self.branches {
            let id = format!("L{}", b.layer);
            let _ = writeln!(
                s,
                "  {id} [label=\"layer {}\\nn={}\"];",
                b.layer, b.remaining
            );
            let _ = writeln!(s, "  {parent} -> {id};");
            for p in &b.pairs {
                let _ = writeln!(
                    s,
                    "  leaf_{leaf} [label=\"{}\", shape=ellipse];",
                    dot_escape(p)
                );
                let _ = writeln!(s, "  {id} -> leaf_{leaf};");
                leaf += 1;
            }
            parent = id;
        }
        s.push_str("  subgraph cluster_inseparable {\n");
        s.push_str("    label=\"inseparable\";\n");
        s.push_str("    style=dashed;\n");
        for (i, p) in self.inseparable.iter().enumerate() {
            let _ = writeln!(
                s,
                "    insep_{i} [label=\"{}\", shape=ellipse];",
                dot_escape(p)
            );
        }
        s.push_str("  }\n");
        for i in 0..self.inseparable.len() {
            let _ = writeln!(s, "  {parent} -> insep_{i} [style=dashed];");
        }
        s.push_str("}\n");
        s
    }
}

fn dot_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out
}

pub fn tree_to_json(t: &ConceptTree) -> String {
    t.to_json()
}

pub fn tree_to_dot(t: &ConceptTree) -> String {
    t.to_dot()
}
