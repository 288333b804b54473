// SPDX-License-Identifier: Apache-2.0

//! Pluggable placement. The default plugin is a capacity- and
//! tag-respecting first fit with placement stability.

use std::collections::BTreeMap;

use crate::flowmodel::{DataflowSpec, PlacementMapping, ResourceDemand};

use super::{ResourceView, WorkerView};

#[derive(Debug, Clone)]
pub struct Infeasible {
    pub reason: String,
}

pub trait SchedulerPlugin: Send + Sync {
    fn name(&self) -> &str;

    /// Produces a total mapping respecting capacity and constraint tags.
    /// `current` (during rebalance) asks for placement stability where the
    /// preference ordering allows it.
    fn schedule(
        &self,
        spec: &DataflowSpec,
        view: &ResourceView,
        current: Option<&PlacementMapping>,
    ) -> Result<PlacementMapping, Infeasible>;
}

/// First fit: processors in topological order (cycles broken
/// lexicographically), workers ordered by class preference then id. Cloud
/// sorts last by default, reflecting data locality near the edge; a
/// `prefer_class` QoS hint reorders that class first. A processor keeps its
/// current worker when it is still feasible and in the same preference tier
/// as the first-fit candidate, minimizing the moved set while still
/// honoring an explicit preference change.
pub struct FirstFitScheduler;

impl FirstFitScheduler {
    fn class_rank(class: &str, prefer: Option<&str>) -> u8 {
        if prefer == Some(class) {
            return 0;
        }
        match class {
            "edge" => 1,
            "fog" => 2,
            "cloud" => 3,
            _ => 4,
        }
    }
}

fn fits(free: &ResourceDemand, demand: &ResourceDemand) -> bool {
    free.cpu_millis >= demand.cpu_millis && free.mem_mb >= demand.mem_mb
}

fn tags_match(worker: &WorkerView, constraints: &[String]) -> bool {
    constraints.iter().all(|c| worker.tags.contains(c))
}

impl SchedulerPlugin for FirstFitScheduler {
    fn name(&self) -> &str {
        "firstfit"
    }

    fn schedule(
        &self,
        spec: &DataflowSpec,
        view: &ResourceView,
        current: Option<&PlacementMapping>,
    ) -> Result<PlacementMapping, Infeasible> {
        let prefer = spec.qos.get("prefer_class").map(String::as_str);
        let mut order: Vec<&WorkerView> = view.workers.iter().collect();
        order.sort_by_key(|w| (Self::class_rank(&w.class, prefer), w.worker_id.clone()));

        let mut free: BTreeMap<&str, ResourceDemand> = order
            .iter()
            .map(|w| (w.worker_id.as_str(), w.free))
            .collect();
        let mut assignments = BTreeMap::new();

        for pid in spec.topo_order() {
            let proc_spec = spec.processor(&pid).expect("topo order covers spec");
            let candidate = order
                .iter()
                .find(|w| fits(&free[w.worker_id.as_str()], &proc_spec.demands)
                    && tags_match(w, &proc_spec.constraints));
            let Some(candidate) = candidate else {
                let any_tag_match = order.iter().any(|w| tags_match(w, &proc_spec.constraints));
                let reason = if any_tag_match {
                    format!(
                        "no worker has {} milli-cores / {} MB free for processor {pid}",
                        proc_spec.demands.cpu_millis, proc_spec.demands.mem_mb
                    )
                } else {
                    format!(
                        "no worker carries required tags {:?} for processor {pid}",
                        proc_spec.constraints
                    )
                };
                return Err(Infeasible { reason });
            };

            // Stability: keep the current worker when feasible and in the
            // candidate's preference tier.
            let chosen = current
                .and_then(|m| m.resource_for(&pid))
                .and_then(|cur_id| view.worker(cur_id))
                .filter(|cur| {
                    fits(&free[cur.worker_id.as_str()], &proc_spec.demands)
                        && tags_match(cur, &proc_spec.constraints)
                        && Self::class_rank(&cur.class, prefer)
                            == Self::class_rank(&candidate.class, prefer)
                })
                .unwrap_or(candidate);

            let f = free.get_mut(chosen.worker_id.as_str()).expect("known worker");
            f.cpu_millis -= proc_spec.demands.cpu_millis;
            f.mem_mb -= proc_spec.demands.mem_mb;
            assignments.insert(pid, chosen.worker_id.clone());
        }
        Ok(PlacementMapping::new(assignments))
    }
}

/// Soundness gate run on every plugin output before it is enacted: the
/// mapping must be total, respect free capacity per worker, and satisfy
/// every constraint tag.
pub fn validate_mapping(
    spec: &DataflowSpec,
    view: &ResourceView,
    mapping: &PlacementMapping,
) -> Result<(), String> {
    let mut used: BTreeMap<&str, ResourceDemand> = BTreeMap::new();
    for p in &spec.processors {
        let Some(resource) = mapping.resource_for(&p.id) else {
            return Err(format!("mapping is not total: processor {} unplaced", p.id));
        };
        let Some(worker) = view.worker(resource) else {
            return Err(format!("processor {} mapped to unknown worker {resource}", p.id));
        };
        if !tags_match(worker, &p.constraints) {
            return Err(format!(
                "worker {resource} lacks tags {:?} required by {}",
                p.constraints, p.id
            ));
        }
        let u = used.entry(worker.worker_id.as_str()).or_default();
        u.cpu_millis += p.demands.cpu_millis;
        u.mem_mb += p.demands.mem_mb;
    }
    for (worker_id, u) in used {
        let w = view.worker(worker_id).expect("checked above");
        if u.cpu_millis > w.free.cpu_millis || u.mem_mb > w.free.mem_mb {
            return Err(format!(
                "capacity violated on {worker_id}: needs {}m/{}MB, free {}m/{}MB",
                u.cpu_millis, u.mem_mb, w.free.cpu_millis, w.free.mem_mb
            ));
        }
    }
    Ok(())
}
