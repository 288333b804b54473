// SPDX-License-Identifier: Apache-2.0

//! Dataflow specifications and the pure graph algorithms used by the
//! deployer: JSON parsing with structured validation, edge-cut
//! fragmentation, and placement graph diff.

mod graph;

pub use graph::{edge_cut, graph_diff, LinkDirection, MigrationSet, ReachabilityMatrix};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three data models a processor port can use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataModelKind {
    Stream,
    Microbatch,
    File,
}

/// Resource demands of one processor, in milli-cores and MB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResourceDemand {
    pub cpu_millis: i64,
    pub mem_mb: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessorSpec {
    pub id: String,
    /// `builtin:<name>`, `cep`, `exec` or `bridge`.
    pub kind: String,
    pub input_model: DataModelKind,
    pub output_model: DataModelKind,
    #[serde(default)]
    pub config: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub demands: ResourceDemand,
    /// Resource tags the hosting worker must carry.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
}

impl EdgeSpec {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
        }
    }
}

/// A user-submitted directed dataflow graph. Cycles are permitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataflowSpec {
    pub name: String,
    pub processors: Vec<ProcessorSpec>,
    pub edges: Vec<EdgeSpec>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub qos: BTreeMap<String, String>,
}

impl DataflowSpec {
    pub fn processor(&self, id: &str) -> Option<&ProcessorSpec> {
        self.processors.iter().find(|p| p.id == id)
    }

    pub fn processor_ids(&self) -> BTreeSet<String> {
        self.processors.iter().map(|p| p.id.clone()).collect()
    }

    /// Processors with no incoming edge (self-loops count as incoming).
    pub fn sources(&self) -> Vec<&ProcessorSpec> {
        self.processors
            .iter()
            .filter(|p| !self.edges.iter().any(|e| e.to == p.id))
            .collect()
    }

    /// Undirected neighbors of a processor.
    pub fn neighbors(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for e in &self.edges {
            if e.from == id && e.to != id {
                out.insert(e.to.clone());
            }
            if e.to == id && e.from != id {
                out.insert(e.from.clone());
            }
        }
        out
    }

    /// Processor ids in topological order, cycles broken by lexicographic id.
    ///
    /// Kahn's algorithm with an ordered frontier; when the frontier empties
    /// while nodes remain (a cycle), the lexicographically smallest remaining
    /// node is forced.
    pub fn topo_order(&self) -> Vec<String> {
        let mut indegree: BTreeMap<&str, usize> = self
            .processors
            .iter()
            .map(|p| (p.id.as_str(), 0))
            .collect();
        for e in &self.edges {
            if e.from != e.to {
                if let Some(d) = indegree.get_mut(e.to.as_str()) {
                    *d += 1;
                }
            }
        }
        let mut remaining: BTreeSet<&str> = indegree.keys().copied().collect();
        let mut order = Vec::with_capacity(remaining.len());
        while !remaining.is_empty() {
            let next = remaining
                .iter()
                .find(|id| indegree[**id] == 0)
                .copied()
                .or_else(|| remaining.iter().next().copied())
                .expect("remaining not empty");
            remaining.remove(next);
            order.push(next.to_string());
            for e in self.edges.iter().filter(|e| e.from == next && e.from != e.to) {
                if let Some(d) = indegree.get_mut(e.to.as_str()) {
                    *d = d.saturating_sub(1);
                }
            }
        }
        order
    }
}

/// One structured violation found during validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// The offending element (processor id, edge, or field).
    pub element: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.element, self.message)
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dataflow JSON is not valid: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataflow spec invalid: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("mapping is not total: no resource for processor {0}")]
    PartialMapping(String),
    #[error("mappings cover different processor sets")]
    MappingMismatch,
    #[error("unschedulable link {from}->{to}: neither push nor pull is reachable")]
    UnschedulableLink { from: String, to: String },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Parses and validates a dataflow JSON document.
///
/// Collects every violation rather than stopping at the first; warnings
/// (currently: cycles, which have undefined pause ordering when they span
/// resources) are returned alongside the spec.
pub fn parse_and_validate(json: &[u8]) -> Result<(DataflowSpec, Vec<Violation>), FlowError> {
    let spec: DataflowSpec = serde_json::from_slice(json)?;
    let warnings = validate(&spec)?;
    Ok((spec, warnings))
}

/// Validates an already-parsed spec. Returns warnings on success.
pub fn validate(spec: &DataflowSpec) -> Result<Vec<Violation>, FlowError> {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();

    if spec.name.is_empty() {
        violations.push(Violation {
            element: "name".into(),
            message: "dataflow name must be non-empty".into(),
        });
    }
    if spec.processors.is_empty() {
        violations.push(Violation {
            element: "processors".into(),
            message: "dataflow has no processors".into(),
        });
    }

    let mut seen = BTreeSet::new();
    for p in &spec.processors {
        if p.id.is_empty() {
            violations.push(Violation {
                element: "<empty>".into(),
                message: "processor id must be non-empty".into(),
            });
            continue;
        }
        if !seen.insert(p.id.as_str()) {
            violations.push(Violation {
                element: p.id.clone(),
                message: format!("duplicate id {}", p.id),
            });
        }
        if p.demands.cpu_millis < 0 || p.demands.mem_mb < 0 {
            violations.push(Violation {
                element: p.id.clone(),
                message: "demands must be non-negative".into(),
            });
        }
        let known_kind = p.kind.starts_with("builtin:")
            || matches!(p.kind.as_str(), "cep" | "exec" | "bridge");
        if !known_kind {
            violations.push(Violation {
                element: p.id.clone(),
                message: format!("unknown processor kind {}", p.kind),
            });
        }
    }

    let ids = spec.processor_ids();
    for e in &spec.edges {
        for endpoint in [&e.from, &e.to] {
            if !ids.contains(endpoint) {
                violations.push(Violation {
                    element: format!("{}->{}", e.from, e.to),
                    message: format!("unknown processor {endpoint}"),
                });
            }
        }
    }

    // A graph with no ingestion point cannot run: every experiment needs a
    // source, and a pure cycle has none.
    if !spec.processors.is_empty() && spec.sources().is_empty() {
        violations.push(Violation {
            element: spec.name.clone(),
            message: "no source: every processor has an incoming edge (pure cycle)".into(),
        });
    } else if has_cycle(spec) {
        warnings.push(Violation {
            element: spec.name.clone(),
            message: "graph contains a cycle; pause ordering for cyclic fragments spanning \
                      resources is best-effort"
                .into(),
        });
    }

    if violations.is_empty() {
        Ok(warnings)
    } else {
        Err(FlowError::Invalid(violations))
    }
}

fn has_cycle(spec: &DataflowSpec) -> bool {
    // Iterative DFS with colors; self-loops are cycles.
    let ids: Vec<&str> = spec.processors.iter().map(|p| p.id.as_str()).collect();
    let mut color: BTreeMap<&str, u8> = ids.iter().map(|id| (*id, 0u8)).collect();
    for start in &ids {
        if color[start] != 0 {
            continue;
        }
        let mut stack = vec![(*start, false)];
        while let Some((node, processed)) = stack.pop() {
            if processed {
                color.insert(node, 2);
                continue;
            }
            if color[node] == 1 {
                continue;
            }
            color.insert(node, 1);
            stack.push((node, true));
            for e in spec.edges.iter().filter(|e| e.from == node) {
                if e.from == e.to {
                    return true;
                }
                match color.get(e.to.as_str()) {
                    Some(0) => stack.push((e.to.as_str(), false)),
                    Some(1) => {
                        if stack.iter().any(|(n, p)| *p && *n == e.to) {
                            return true;
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    false
}

/// The scheduler's assignment of every processor to a resource (worker id).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlacementMapping {
    pub assignments: BTreeMap<String, String>,
}

impl PlacementMapping {
    pub fn new(assignments: BTreeMap<String, String>) -> Self {
        Self { assignments }
    }

    pub fn resource_for(&self, processor: &str) -> Option<&str> {
        self.assignments.get(processor).map(String::as_str)
    }

    pub fn resources(&self) -> BTreeSet<String> {
        self.assignments.values().cloned().collect()
    }

    /// Errors unless every processor of `spec` is assigned.
    pub fn ensure_total(&self, spec: &DataflowSpec) -> Result<(), FlowError> {
        for p in &spec.processors {
            if !self.assignments.contains_key(&p.id) {
                return Err(FlowError::PartialMapping(p.id.clone()));
            }
        }
        Ok(())
    }
}

/// A cut edge annotated with its transport.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutEdge {
    pub link_id: String,
    pub from: String,
    pub to: String,
    pub direction: LinkDirection,
    /// Resource hosting the upstream (`from`) processor.
    pub from_resource: String,
    /// Resource hosting the downstream (`to`) processor.
    pub to_resource: String,
}

/// The sub-dataflow deployed on one resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentEntry {
    pub resource: String,
    pub processors: BTreeSet<String>,
    pub internal_edges: Vec<EdgeSpec>,
    /// Cut edges touching this fragment (each appears in exactly the two
    /// fragments it joins).
    pub cut_edges: Vec<CutEdge>,
}

/// Partition of a dataflow into per-resource fragments.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FragmentPlan {
    pub fragments: BTreeMap<String, FragmentEntry>,
}

impl FragmentPlan {
    /// All distinct cut edges in the plan.
    pub fn cut_edges(&self) -> Vec<&CutEdge> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for frag in self.fragments.values() {
            for ce in &frag.cut_edges {
                if seen.insert(ce.link_id.clone()) {
                    out.push(ce);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests;
