// SPDX-License-Identifier: Apache-2.0

//! The platform master: a stateless REST service that validates, schedules,
//! deploys, stops and live-rebalances dataflows. Every piece of dataflow
//! state lives in the catalog under `/dataflow/<uuid>/...`; the master
//! process holds nothing that survives a request, so killing and restarting
//! it between calls changes no outcome.

mod deployer;
mod scheduler;
mod service;

pub use deployer::{fragment_spec, start_order, Deployer};
pub use scheduler::{FirstFitScheduler, Infeasible, SchedulerPlugin};
pub use service::{MasterConfig, MasterService};

use std::collections::BTreeMap;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{
    CatalogClient, CatalogClientError, CatalogItem, REL_CLASS, REL_CPU_MILLIS, REL_ENDPOINT,
    REL_JSON, REL_MEM_MB, REL_PARENT_DEVICE, REL_REACHABLE_FROM, REL_TAGS,
};
use crate::flowmodel::{
    DataflowSpec, FlowError, FragmentPlan, PlacementMapping, ReachabilityMatrix, ResourceDemand,
};

#[derive(Debug, Error)]
pub enum MasterError {
    #[error("invalid dataflow: {0}")]
    Invalid(#[from] FlowError),
    #[error("infeasible schedule: {0}")]
    Infeasible(String),
    #[error("dataflow {0} not found")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("worker {worker}: {detail}")]
    WorkerFailure { worker: String, detail: String },
    #[error("catalog: {0}")]
    Catalog(#[from] CatalogClientError),
    #[error("{0}")]
    Internal(String),
}

impl MasterError {
    pub fn http_status(&self) -> u16 {
        match self {
            MasterError::Invalid(_) => 400,
            MasterError::NotFound(_) => 404,
            MasterError::Infeasible(_) | MasterError::Conflict(_) => 409,
            MasterError::WorkerFailure { .. } => 502,
            MasterError::Catalog(_) | MasterError::Internal(_) => 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowState {
    Scheduling,
    Deploying,
    Running,
    Rebalancing,
    Stopping,
    Stopped,
    Failed,
}

/// Everything known about one dataflow, stored whole in the catalog.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataflowRecord {
    pub uuid: String,
    pub spec: DataflowSpec,
    pub mapping: PlacementMapping,
    pub plan: FragmentPlan,
    pub state: FlowState,
    /// (state, ISO timestamp) per transition, oldest first.
    pub transitions: Vec<(FlowState, String)>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl DataflowRecord {
    pub fn href(uuid: &str) -> String {
        format!("/dataflow/{uuid}/record")
    }

    pub fn transition(&mut self, state: FlowState) {
        self.state = state;
        self.transitions
            .push((state, crate::databatch::now_iso()));
    }

    pub fn save(&self, catalog: &CatalogClient) -> Result<(), MasterError> {
        let item = CatalogItem::new(Self::href(&self.uuid)).with(
            REL_JSON,
            serde_json::to_string(self).expect("record is json"),
        );
        catalog.register(&item)?;
        Ok(())
    }

    pub fn load(catalog: &CatalogClient, uuid: &str) -> Result<Self, MasterError> {
        let item = catalog
            .get(&Self::href(uuid))?
            .ok_or_else(|| MasterError::NotFound(uuid.to_string()))?;
        let json = item
            .rel(REL_JSON)
            .ok_or_else(|| MasterError::Internal("record item has no payload".into()))?;
        serde_json::from_str(json)
            .map_err(|e| MasterError::Internal(format!("record unreadable: {e}")))
    }
}

/// One schedulable worker as seen in the catalog at scheduling time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerView {
    pub worker_id: String,
    pub device_id: String,
    pub class: String,
    pub endpoint: String,
    pub tags: Vec<String>,
    pub caps: ResourceDemand,
    /// Caps minus demands of processors currently placed there.
    pub free: ResourceDemand,
}

/// Derived purely from catalog queries; no master-side caching.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResourceView {
    pub workers: Vec<WorkerView>,
    #[serde(skip)]
    pub reachability: ReachabilityMatrix,
}

impl ResourceView {
    pub fn worker(&self, id: &str) -> Option<&WorkerView> {
        self.workers.iter().find(|w| w.worker_id == id)
    }
}

/// Builds the scheduling view: live (non-stale) workers, their free
/// capacity after every placed dataflow, and worker-level reachability
/// derived from device declarations. `exclude_flow` adds one flow's own
/// demands back, so rescheduling it sees its own slots as free.
pub fn build_resource_view(
    catalog: &CatalogClient,
    exclude_flow: Option<&str>,
) -> Result<ResourceView, MasterError> {
    let mut workers = Vec::new();
    let mut device_reach: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for item in catalog.query_prefix("/device/")? {
        if item.href.matches('/').count() != 2 {
            continue;
        }
        let device_id = item.href.trim_start_matches("/device/").to_string();
        let reach: Vec<String> = item
            .rel(REL_REACHABLE_FROM)
            .and_then(|v| serde_json::from_str(v).ok())
            .unwrap_or_default();
        device_reach.insert(device_id, reach);
    }

    for item in catalog.query_prefix("/worker/")? {
        if item.href.matches('/').count() != 2 {
            continue;
        }
        if item.is_stale() {
            continue;
        }
        let worker_id = item.href.trim_start_matches("/worker/").to_string();
        let caps = ResourceDemand {
            cpu_millis: item
                .rel(REL_CPU_MILLIS)
                .and_then(|v| v.parse().ok())
                .unwrap_or(0),
            mem_mb: item.rel(REL_MEM_MB).and_then(|v| v.parse().ok()).unwrap_or(0),
        };
        workers.push(WorkerView {
            worker_id,
            device_id: item.rel(REL_PARENT_DEVICE).unwrap_or("").to_string(),
            class: item.rel(REL_CLASS).unwrap_or("edge").to_string(),
            endpoint: item.rel(REL_ENDPOINT).unwrap_or("").to_string(),
            tags: item
                .rel(REL_TAGS)
                .and_then(|v| serde_json::from_str(v).ok())
                .unwrap_or_default(),
            caps,
            free: caps,
        });
    }

    // Subtract demands of every dataflow that currently occupies capacity.
    for item in catalog.query_prefix("/dataflow/")? {
        if !item.href.ends_with("/record") {
            continue;
        }
        let Some(json) = item.rel(REL_JSON) else { continue };
        let Ok(record) = serde_json::from_str::<DataflowRecord>(json) else {
            continue;
        };
        if exclude_flow == Some(record.uuid.as_str()) {
            continue;
        }
        if !matches!(
            record.state,
            FlowState::Deploying | FlowState::Running | FlowState::Rebalancing
        ) {
            continue;
        }
        for p in &record.spec.processors {
            if let Some(resource) = record.mapping.resource_for(&p.id) {
                if let Some(w) = workers.iter_mut().find(|w| w.worker_id == resource) {
                    w.free.cpu_millis -= p.demands.cpu_millis;
                    w.free.mem_mb -= p.demands.mem_mb;
                }
            }
        }
    }

    // Worker-level reachability: a worker may open a connection to another
    // when its device may reach the target's device.
    let mut reachability = ReachabilityMatrix::new();
    for target in &workers {
        let reach = device_reach.get(&target.device_id).cloned().unwrap_or_default();
        if reach.iter().any(|d| d == "*") {
            reachability.mark_public(&target.worker_id);
            continue;
        }
        for source in &workers {
            if source.device_id == target.device_id || reach.contains(&source.device_id) {
                reachability.allow(&source.worker_id, &target.worker_id);
            }
        }
    }

    Ok(ResourceView {
        workers,
        reachability,
    })
}

/// Advisory per-uuid lock living in the catalog, so mutual exclusion
/// survives master restarts. Expired leases count as free.
pub struct FlowLock<'a> {
    catalog: &'a CatalogClient,
    href: String,
    released: bool,
}

pub const LOCK_TTL_MS: i64 = 120_000;

impl<'a> FlowLock<'a> {
    pub fn acquire(catalog: &'a CatalogClient, uuid: &str) -> Result<Self, MasterError> {
        let href = format!("/dataflow/{uuid}/lock");
        let item = CatalogItem::new(&href)
            .with(crate::catalog::REL_TTL_MS, LOCK_TTL_MS.to_string())
            .with("urn:echo:rel:holder", format!("master-{}", std::process::id()))
            .with("urn:echo:rel:acquired", crate::catalog::format_ts(Utc::now()));
        if catalog.register_if_absent(&item)? {
            Ok(Self {
                catalog,
                href,
                released: false,
            })
        } else {
            Err(MasterError::Conflict(format!(
                "another lifecycle operation holds the lock for {uuid}"
            )))
        }
    }

    pub fn release(mut self) {
        let _ = self.catalog.delete(&self.href);
        self.released = true;
    }
}

impl Drop for FlowLock<'_> {
    fn drop(&mut self) {
        if !self.released {
            let _ = self.catalog.delete(&self.href);
        }
    }
}
