// SPDX-License-Identifier: Apache-2.0

//! Edge-cut fragmentation and placement diff.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    CutEdge, DataflowSpec, FlowError, FragmentEntry, FragmentPlan, PlacementMapping,
};

/// Transport direction of a remote link.
///
/// `Push`: the upstream side opens connections to the downstream side.
/// `Pull`: the downstream side opens connections to the upstream side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkDirection {
    Push,
    Pull,
}

/// Which resources can open connections to which.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReachabilityMatrix {
    /// `open.get(a)` = set of resources `a` can open connections to.
    open: BTreeMap<String, BTreeSet<String>>,
    /// Resources reachable from everywhere (declared `reachable_from: ["*"]`).
    public: BTreeSet<String>,
}

impl ReachabilityMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Everything can reach everything among `resources`.
    pub fn full(resources: impl IntoIterator<Item = String>) -> Self {
        let mut m = Self::default();
        for r in resources {
            m.public.insert(r);
        }
        m
    }

    pub fn allow(&mut self, from: &str, to: &str) {
        self.open
            .entry(from.to_string())
            .or_default()
            .insert(to.to_string());
    }

    pub fn mark_public(&mut self, resource: &str) {
        self.public.insert(resource.to_string());
    }

    /// True when `from` may open a connection to `to`. A resource always
    /// reaches itself.
    pub fn can_open(&self, from: &str, to: &str) -> bool {
        if from == to || self.public.contains(to) {
            return true;
        }
        self.open
            .get(from)
            .map(|s| s.contains(to))
            .unwrap_or(false)
    }
}

/// Deterministic link id for a cut edge.
pub fn link_id(flow_id: &str, from: &str, to: &str) -> String {
    format!("{flow_id}-{from}-{to}")
}

/// Partitions a placed dataflow into per-resource fragments, introducing a
/// remote link at every edge whose endpoints map to different resources.
///
/// Direction: push when the upstream resource can open connections to the
/// downstream one, otherwise pull when the reverse holds. Both feasible
/// prefers push. Link ids are deterministic so re-deployments are idempotent.
pub fn edge_cut(
    spec: &DataflowSpec,
    mapping: &PlacementMapping,
    reach: &ReachabilityMatrix,
    flow_id: &str,
) -> Result<FragmentPlan, FlowError> {
    mapping.ensure_total(spec)?;

    let mut plan = FragmentPlan::default();
    for p in &spec.processors {
        let resource = mapping.resource_for(&p.id).expect("total mapping");
        plan.fragments
            .entry(resource.to_string())
            .or_insert_with(|| FragmentEntry {
                resource: resource.to_string(),
                processors: BTreeSet::new(),
                internal_edges: Vec::new(),
                cut_edges: Vec::new(),
            })
            .processors
            .insert(p.id.clone());
    }

    for e in &spec.edges {
        let from_res = mapping.resource_for(&e.from).expect("total mapping");
        let to_res = mapping.resource_for(&e.to).expect("total mapping");
        if from_res == to_res {
            plan.fragments
                .get_mut(from_res)
                .expect("fragment exists")
                .internal_edges
                .push(e.clone());
            continue;
        }
        let direction = if reach.can_open(from_res, to_res) {
            LinkDirection::Push
        } else if reach.can_open(to_res, from_res) {
            LinkDirection::Pull
        } else {
            return Err(FlowError::UnschedulableLink {
                from: e.from.clone(),
                to: e.to.clone(),
            });
        };
        let cut = CutEdge {
            link_id: link_id(flow_id, &e.from, &e.to),
            from: e.from.clone(),
            to: e.to.clone(),
            direction,
            from_resource: from_res.to_string(),
            to_resource: to_res.to_string(),
        };
        for res in [from_res, to_res] {
            plan.fragments
                .get_mut(res)
                .expect("fragment exists")
                .cut_edges
                .push(cut.clone());
        }
    }
    Ok(plan)
}

/// Processors to migrate and to pause for a placement change.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MigrationSet {
    /// Processors whose resource changed.
    pub moved: BTreeSet<String>,
    /// Moved plus their graph-adjacent neighbors: the pause set.
    pub affected: BTreeSet<String>,
}

/// Diffs two total mappings over the same dataflow.
pub fn graph_diff(
    spec: &DataflowSpec,
    old: &PlacementMapping,
    new: &PlacementMapping,
) -> Result<MigrationSet, FlowError> {
    old.ensure_total(spec)?;
    new.ensure_total(spec)?;
    let keys_old: BTreeSet<&String> = old.assignments.keys().collect();
    let keys_new: BTreeSet<&String> = new.assignments.keys().collect();
    let ids = spec.processor_ids();
    let keys_spec: BTreeSet<&String> = ids.iter().collect();
    if keys_old != keys_spec || keys_new != keys_spec {
        return Err(FlowError::MappingMismatch);
    }

    let moved: BTreeSet<String> = spec
        .processors
        .iter()
        .filter(|p| old.assignments[&p.id] != new.assignments[&p.id])
        .map(|p| p.id.clone())
        .collect();
    let mut affected = moved.clone();
    for m in &moved {
        affected.extend(spec.neighbors(m));
    }
    Ok(MigrationSet { moved, affected })
}
