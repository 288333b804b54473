// SPDX-License-Identifier: Apache-2.0

//! Enacts placements on worker engines: initial deployment, stop, and the
//! live rebalance procedure (pause, quiesce, transfer queued batches,
//! rewire links, resume) with journaled best-effort rollback.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde_json::json;
use uuid::Uuid;

use crate::catalog::{CatalogClient, REL_ENDPOINT};
use crate::databatch::DataBatch;
use crate::engine::{FragmentSpec, LinkSpec};
use crate::flowmodel::{
    edge_cut, graph_diff, parse_and_validate, DataflowSpec, EdgeSpec, FragmentPlan,
    PlacementMapping,
};
use crate::httpc::HttpClient;
use crate::wire::BatchEnvelope;

use super::scheduler::validate_mapping;
use super::{
    build_resource_view, DataflowRecord, FlowLock, FlowState, MasterError, ResourceView,
    SchedulerPlugin,
};

pub struct Deployer {
    catalog: CatalogClient,
    http: HttpClient,
}

impl Deployer {
    pub fn new(catalog: CatalogClient) -> Self {
        Self {
            catalog,
            http: HttpClient::new(Duration::from_secs(20)),
        }
    }

    pub fn catalog(&self) -> &CatalogClient {
        &self.catalog
    }

    /// Validate, schedule, deploy, start. Returns the dataflow uuid.
    pub fn start_dataflow(
        &self,
        spec_json: &[u8],
        scheduler: &dyn SchedulerPlugin,
    ) -> Result<String, MasterError> {
        let (spec, warnings) = parse_and_validate(spec_json)?;
        let uuid = Uuid::new_v4().simple().to_string();
        let lock = FlowLock::acquire(&self.catalog, &uuid)?;

        let view = build_resource_view(&self.catalog, None)?;
        if view.workers.is_empty() {
            return Err(MasterError::Infeasible(
                "no live workers registered in the catalog".into(),
            ));
        }
        let mapping = scheduler
            .schedule(&spec, &view, None)
            .map_err(|e| MasterError::Infeasible(e.reason))?;
        validate_mapping(&spec, &view, &mapping).map_err(|v| {
            MasterError::Internal(format!(
                "scheduler {} produced an unsound mapping: {v}",
                scheduler.name()
            ))
        })?;
        let plan = edge_cut(&spec, &mapping, &view.reachability, &uuid)?;

        let mut record = DataflowRecord {
            uuid: uuid.clone(),
            spec,
            mapping,
            plan,
            state: FlowState::Scheduling,
            transitions: vec![(FlowState::Scheduling, crate::databatch::now_iso())],
            warnings: warnings.iter().map(|w| w.to_string()).collect(),
        };
        record.transition(FlowState::Deploying);
        record.save(&self.catalog)?;

        let endpoints = self.endpoints_for(&view, &record.plan)?;
        let mut created: Vec<String> = Vec::new();
        let deploy_result = (|| -> Result<(), MasterError> {
            for resource in record.plan.fragments.keys() {
                let frag_spec =
                    fragment_spec(&record.uuid, &record.spec, &record.plan, resource, &endpoints);
                self.post_engine(&endpoints[resource], &format!("fragments"), &frag_spec)
                    .map_err(|detail| MasterError::WorkerFailure {
                        worker: resource.clone(),
                        detail,
                    })?;
                created.push(resource.clone());
            }
            // Start sinks-to-sources so data never arrives at a fragment
            // that is not yet running.
            for resource in start_order(&record.plan) {
                self.post_engine(
                    &endpoints[&resource],
                    &format!("fragments/{}/start", record.uuid),
                    &json!({}),
                )
                .map_err(|detail| MasterError::WorkerFailure {
                    worker: resource.clone(),
                    detail,
                })?;
            }
            Ok(())
        })();

        if let Err(e) = deploy_result {
            // Best-effort rollback: no orphan fragments.
            for resource in created {
                if let Some(url) = endpoints.get(&resource) {
                    let _ = self.post_engine(
                        url,
                        &format!("fragments/{}/undeploy", record.uuid),
                        &json!({}),
                    );
                }
            }
            record.warnings.push(e.to_string());
            record.transition(FlowState::Failed);
            record.save(&self.catalog)?;
            lock.release();
            return Err(e);
        }

        record.transition(FlowState::Running);
        record.save(&self.catalog)?;
        lock.release();
        Ok(uuid)
    }

    /// Undeploys all fragments; unreachable workers are retried then noted
    /// in a warning relation. The mapping stays in the catalog for audit.
    pub fn stop_dataflow(&self, uuid: &str) -> Result<Vec<String>, MasterError> {
        let lock = FlowLock::acquire(&self.catalog, uuid)?;
        let mut record = DataflowRecord::load(&self.catalog, uuid)?;
        match record.state {
            FlowState::Running | FlowState::Failed => {}
            FlowState::Stopped => {
                lock.release();
                return Err(MasterError::Conflict(format!("{uuid} already stopped")));
            }
            other => {
                lock.release();
                return Err(MasterError::Conflict(format!(
                    "{uuid} is {other:?}, not stoppable"
                )));
            }
        }
        record.transition(FlowState::Stopping);
        record.save(&self.catalog)?;

        let mut warnings = Vec::new();
        for resource in record.plan.fragments.keys() {
            let url = match self.endpoint_of(resource) {
                Ok(u) => u,
                Err(_) => {
                    warnings.push(format!("worker {resource} has no endpoint in the catalog"));
                    continue;
                }
            };
            let mut ok = false;
            for _ in 0..3 {
                match self.post_engine(&url, &format!("fragments/{uuid}/undeploy"), &json!({})) {
                    Ok(_) => {
                        ok = true;
                        break;
                    }
                    Err(detail) if detail.contains("not found") => {
                        // Already gone (crashed worker or previous attempt).
                        ok = true;
                        break;
                    }
                    Err(_) => std::thread::sleep(Duration::from_millis(200)),
                }
            }
            if !ok {
                warnings.push(format!("worker {resource} unreachable during undeploy"));
            }
        }
        record.warnings.extend(warnings.clone());
        record.transition(FlowState::Stopped);
        record.save(&self.catalog)?;
        lock.release();
        Ok(warnings)
    }

    /// Live rebalance. Returns the new mapping and whether anything moved.
    pub fn rebalance_dataflow(
        &self,
        uuid: &str,
        scheduler: &dyn SchedulerPlugin,
    ) -> Result<(PlacementMapping, bool), MasterError> {
        let lock = FlowLock::acquire(&self.catalog, uuid)?;
        let mut record = DataflowRecord::load(&self.catalog, uuid)?;
        if record.state != FlowState::Running {
            lock.release();
            return Err(MasterError::Conflict(format!(
                "{uuid} is {:?}, not running",
                record.state
            )));
        }

        let view = build_resource_view(&self.catalog, Some(uuid))?;
        let new_mapping = scheduler
            .schedule(&record.spec, &view, Some(&record.mapping))
            .map_err(|e| MasterError::Infeasible(e.reason))?;
        validate_mapping(&record.spec, &view, &new_mapping).map_err(|v| {
            MasterError::Internal(format!(
                "scheduler {} produced an unsound mapping: {v}",
                scheduler.name()
            ))
        })?;

        let migration = graph_diff(&record.spec, &record.mapping, &new_mapping)?;
        if migration.moved.is_empty() {
            lock.release();
            return Ok((record.mapping.clone(), false));
        }
        let new_plan = edge_cut(&record.spec, &new_mapping, &view.reachability, uuid)?;

        record.transition(FlowState::Rebalancing);
        record.save(&self.catalog)?;

        let outcome = self.migrate(&record, &new_mapping, &new_plan, &view, &migration.affected, &migration.moved);
        match outcome {
            Ok(()) => {
                record.mapping = new_mapping.clone();
                record.plan = new_plan;
                record.transition(FlowState::Running);
                record.save(&self.catalog)?;
                lock.release();
                Ok((new_mapping, true))
            }
            Err(e) => {
                record
                    .warnings
                    .push(format!("rebalance rolled back: {e}"));
                record.transition(FlowState::Running);
                record.save(&self.catalog)?;
                lock.release();
                Err(e)
            }
        }
    }

    // --- migration machinery ---

    #[allow(clippy::too_many_arguments)]
    fn migrate(
        &self,
        record: &DataflowRecord,
        new_mapping: &PlacementMapping,
        new_plan: &FragmentPlan,
        view: &ResourceView,
        affected: &BTreeSet<String>,
        moved: &BTreeSet<String>,
    ) -> Result<(), MasterError> {
        let uuid = &record.uuid;
        let old_mapping = &record.mapping;
        let old_plan = &record.plan;
        let mut endpoints = self.endpoints_for(view, old_plan)?;
        endpoints.extend(self.endpoints_for(view, new_plan)?);

        let mut journal = Journal::default();
        let result = self.migrate_steps(
            record,
            new_mapping,
            new_plan,
            &endpoints,
            affected,
            moved,
            &mut journal,
        );
        if let Err(e) = &result {
            log::warn!("migration of {uuid} failed ({e}); rolling back");
            self.rollback(record, old_mapping, &endpoints, &mut journal);
        }
        result
    }

    #[allow(clippy::too_many_arguments)]
    fn migrate_steps(
        &self,
        record: &DataflowRecord,
        new_mapping: &PlacementMapping,
        new_plan: &FragmentPlan,
        endpoints: &BTreeMap<String, String>,
        affected: &BTreeSet<String>,
        moved: &BTreeSet<String>,
        journal: &mut Journal,
    ) -> Result<(), MasterError> {
        let uuid = &record.uuid;
        let spec = &record.spec;
        let old_mapping = &record.mapping;
        let old_plan = &record.plan;

        // 1. Pause the moved processors and their adjacent ones where they
        //    run now. Unaffected processors keep executing.
        for pid in affected {
            let resource = old_mapping.resource_for(pid).expect("total mapping");
            self.engine_call(endpoints, resource, &format!("fragments/{uuid}/processors/{pid}/pause"))?;
            journal.paused.push((resource.to_string(), pid.clone()));
        }

        // 2/3. Quiesce changed transports and collect queued batches from
        //    queues that will leave their engine.
        let changes = edge_changes(spec, old_mapping, new_mapping, moved);
        let deadline = Instant::now() + Duration::from_secs(10);
        for ch in &changes {
            if ch.was_cut {
                self.quiesce_edge(uuid, endpoints, &ch.old_from_res, &ch.edge, deadline)?;
            }
            let mut collected: Vec<DataBatch> = Vec::new();
            let v_moved = moved.contains(&ch.edge.to);
            let u_moved = moved.contains(&ch.edge.from);
            if v_moved {
                if ch.was_cut {
                    collected.extend(self.drain_edge(uuid, endpoints, &ch.old_to_res, &ch.edge, journal)?);
                } else if u_moved {
                    collected.extend(self.drain_edge(uuid, endpoints, &ch.old_to_res, &ch.edge, journal)?);
                }
                // was internal && u stays: the queue stays at u's engine as
                // the new outbound queue; the new link transports it.
            }
            if u_moved && ch.was_cut {
                collected.extend(self.drain_edge(uuid, endpoints, &ch.old_from_res, &ch.edge, journal)?);
            }
            if collected.is_empty() {
                continue;
            }
            // Target: the queue feeding the downstream processor in the new
            // plan. When the downstream joins a staying upstream whose
            // outbound queue survives with batches in it, the transferred
            // (older) batches go in front.
            let front = ch.was_cut && !ch.now_cut && !u_moved;
            let target_res = if ch.now_cut {
                ch.new_to_res.clone()
            } else {
                ch.new_from_res.clone()
            };
            journal.pending_injects.push(Inject {
                resource: target_res,
                edge: ch.edge.clone(),
                front,
                batches: collected,
            });
        }

        // 4. Apply the new fragment layout everywhere. Fresh resources get
        //    an empty running fragment first so added pieces follow the
        //    same held/paused path as updates.
        let old_resources: BTreeSet<&String> = old_plan.fragments.keys().collect();
        let new_resources: BTreeSet<&String> = new_plan.fragments.keys().collect();
        for resource in new_resources.union(&old_resources) {
            let resource = (*resource).clone();
            let had = old_resources.contains(&resource);
            let has = new_resources.contains(&resource);
            if !had && has {
                let empty = FragmentSpec {
                    dataflow: uuid.clone(),
                    resource: resource.clone(),
                    processors: vec![],
                    internal_edges: vec![],
                    links: vec![],
                };
                self.post_engine(&endpoints[&resource], "fragments", &empty)
                    .map_err(|detail| MasterError::WorkerFailure {
                        worker: resource.clone(),
                        detail,
                    })?;
                self.engine_call(endpoints, &resource, &format!("fragments/{uuid}/start"))?;
                journal.deployed_fresh.push(resource.clone());
            }
            let target_spec = if has {
                fragment_spec(uuid, spec, new_plan, &resource, endpoints)
            } else {
                FragmentSpec {
                    dataflow: uuid.clone(),
                    resource: resource.clone(),
                    processors: vec![],
                    internal_edges: vec![],
                    links: vec![],
                }
            };
            let old_spec = if had {
                fragment_spec(uuid, spec, old_plan, &resource, endpoints)
            } else {
                FragmentSpec {
                    dataflow: uuid.clone(),
                    resource: resource.clone(),
                    processors: vec![],
                    internal_edges: vec![],
                    links: vec![],
                }
            };
            self.post_engine(
                &endpoints[&resource],
                &format!("fragments/{uuid}/update"),
                &target_spec,
            )
            .map_err(|detail| MasterError::WorkerFailure {
                worker: resource.clone(),
                detail,
            })?;
            journal.updated.push((resource, old_spec));
        }

        // 5. Inject transferred batches ahead of any new traffic.
        let pending = std::mem::take(&mut journal.pending_injects);
        for inject in pending {
            let envelopes: Vec<BatchEnvelope> =
                inject.batches.iter().map(BatchEnvelope::from).collect();
            self.post_engine(
                &endpoints[&inject.resource],
                &format!(
                    "fragments/{uuid}/queues/{}/{}/inject?front={}",
                    inject.edge.from, inject.edge.to, inject.front
                ),
                &json!({ "batches": envelopes }),
            )
            .map_err(|detail| MasterError::WorkerFailure {
                worker: inject.resource.clone(),
                detail,
            })?;
            journal.injected.push(inject);
        }

        // 6. Open the rewired links, then resume the paused processors at
        //    their current homes.
        for resource in new_plan.fragments.keys() {
            self.engine_call(endpoints, resource, &format!("fragments/{uuid}/links/activate"))?;
        }
        for pid in affected {
            let resource = new_mapping.resource_for(pid).expect("total mapping");
            self.engine_call(
                endpoints,
                resource,
                &format!("fragments/{uuid}/processors/{pid}/resume"),
            )?;
        }
        journal.committed = true;

        // 7. Vacated workers hold empty fragments now; undeploy them.
        for resource in old_plan.fragments.keys() {
            if !new_plan.fragments.contains_key(resource) {
                let _ = self.post_engine(
                    &endpoints[resource],
                    &format!("fragments/{uuid}/undeploy"),
                    &json!({}),
                );
            }
        }
        Ok(())
    }

    /// Reverse a partial migration: restore old fragment layouts, put
    /// drained batches back where they came from, reopen links, resume
    /// processors on the old placement.
    fn rollback(
        &self,
        record: &DataflowRecord,
        old_mapping: &PlacementMapping,
        endpoints: &BTreeMap<String, String>,
        journal: &mut Journal,
    ) {
        let uuid = &record.uuid;
        // Pull back anything already injected; target queues are untouched
        // (their consumers are paused, their links held). A dead target
        // simply yields nothing and the saved copies cover it.
        for inject in &journal.injected {
            if let Some(url) = endpoints.get(&inject.resource) {
                let _ = self.post_json_ok(
                    url,
                    &format!(
                        "fragments/{uuid}/queues/{}/{}/drain",
                        inject.edge.from, inject.edge.to
                    ),
                    &json!({}),
                );
            }
        }
        // Restore fragment layouts.
        for (resource, old_spec) in journal.updated.iter().rev() {
            if let Some(url) = endpoints.get(resource) {
                let _ = self.post_json_ok(url, &format!("fragments/{uuid}/update"), old_spec);
            }
        }
        for resource in &journal.deployed_fresh {
            if let Some(url) = endpoints.get(resource) {
                let _ = self.post_json_ok(url, &format!("fragments/{uuid}/undeploy"), &json!({}));
            }
        }
        // Drained batches go back to their exact origin queues.
        for drain in &journal.drains {
            if drain.batches.is_empty() {
                continue;
            }
            if let Some(url) = endpoints.get(&drain.resource) {
                let envelopes: Vec<BatchEnvelope> =
                    drain.batches.iter().map(BatchEnvelope::from).collect();
                let _ = self.post_json_ok(
                    url,
                    &format!(
                        "fragments/{uuid}/queues/{}/{}/inject?front=false",
                        drain.edge.from, drain.edge.to
                    ),
                    &json!({ "batches": envelopes }),
                );
            }
        }
        // Reopen links (updates recreate them held) and resume everything
        // we paused, at the old placement.
        for resource in record.plan.fragments.keys() {
            if let Some(url) = endpoints.get(resource) {
                let _ =
                    self.post_json_ok(url, &format!("fragments/{uuid}/links/activate"), &json!({}));
            }
        }
        for (_, pid) in &journal.paused {
            if let Some(resource) = old_mapping.resource_for(pid) {
                if let Some(url) = endpoints.get(resource) {
                    let _ = self.post_json_ok(
                        url,
                        &format!("fragments/{uuid}/processors/{pid}/resume"),
                        &json!({}),
                    );
                }
            }
        }
    }

    /// Waits until a cut edge's outbound queue is empty and its transport
    /// idle, so a subsequent drain cannot race an in-flight delivery.
    fn quiesce_edge(
        &self,
        uuid: &str,
        endpoints: &BTreeMap<String, String>,
        from_res: &str,
        edge: &EdgeSpec,
        deadline: Instant,
    ) -> Result<(), MasterError> {
        let url = endpoints
            .get(from_res)
            .ok_or_else(|| MasterError::Internal(format!("no endpoint for {from_res}")))?;
        let mut last_depth = usize::MAX;
        let mut stable = 0;
        while Instant::now() < deadline {
            let depth = self.edge_depth(url, uuid, edge)?;
            if depth == 0 && last_depth == 0 {
                stable += 1;
                if stable >= 2 {
                    return Ok(());
                }
            } else {
                stable = 0;
            }
            last_depth = depth;
            std::thread::sleep(Duration::from_millis(75));
        }
        log::warn!("quiesce of {uuid} edge {}->{} timed out", edge.from, edge.to);
        Ok(())
    }

    fn edge_depth(
        &self,
        engine_url: &str,
        uuid: &str,
        edge: &EdgeSpec,
    ) -> Result<usize, MasterError> {
        let (status, body) = self
            .http
            .get_json(&format!("{engine_url}/fragments/{uuid}/queues"))
            .map_err(|e| MasterError::Internal(e.to_string()))?;
        if status != 200 {
            return Err(MasterError::Internal(format!(
                "queue inventory returned {status}"
            )));
        }
        Ok(body
            .get("queues")
            .and_then(|q| q.as_array())
            .into_iter()
            .flatten()
            .find(|q| {
                q.get("from").and_then(|v| v.as_str()) == Some(edge.from.as_str())
                    && q.get("to").and_then(|v| v.as_str()) == Some(edge.to.as_str())
            })
            .and_then(|q| q.get("depth").and_then(|d| d.as_u64()))
            .unwrap_or(0) as usize)
    }

    fn drain_edge(
        &self,
        uuid: &str,
        endpoints: &BTreeMap<String, String>,
        resource: &str,
        edge: &EdgeSpec,
        journal: &mut Journal,
    ) -> Result<Vec<DataBatch>, MasterError> {
        let url = endpoints
            .get(resource)
            .ok_or_else(|| MasterError::Internal(format!("no endpoint for {resource}")))?;
        let body = self
            .post_json_ok(
                url,
                &format!("fragments/{uuid}/queues/{}/{}/drain", edge.from, edge.to),
                &json!({}),
            )
            .map_err(|detail| MasterError::WorkerFailure {
                worker: resource.to_string(),
                detail,
            })?;
        let envelopes: Vec<BatchEnvelope> = body
            .get("batches")
            .and_then(|b| serde_json::from_value(b.clone()).ok())
            .unwrap_or_default();
        let mut batches = Vec::with_capacity(envelopes.len());
        for env in envelopes {
            batches.push(env.into_batch().map_err(|e| {
                MasterError::Internal(format!("undecodable drained batch: {e}"))
            })?);
        }
        journal.drains.push(DrainRecord {
            resource: resource.to_string(),
            edge: edge.clone(),
            batches: batches.clone(),
        });
        Ok(batches)
    }

    // --- engine plumbing ---

    fn engine_call(
        &self,
        endpoints: &BTreeMap<String, String>,
        resource: &str,
        path: &str,
    ) -> Result<(), MasterError> {
        let url = endpoints
            .get(resource)
            .ok_or_else(|| MasterError::Internal(format!("no endpoint for {resource}")))?;
        self.post_engine(url, path, &json!({}))
            .map_err(|detail| MasterError::WorkerFailure {
                worker: resource.to_string(),
                detail,
            })?;
        Ok(())
    }

    fn post_engine<T: serde::Serialize>(
        &self,
        engine_url: &str,
        path: &str,
        body: &T,
    ) -> Result<serde_json::Value, String> {
        self.post_json_ok(engine_url, path, body)
    }

    fn post_json_ok<T: serde::Serialize>(
        &self,
        engine_url: &str,
        path: &str,
        body: &T,
    ) -> Result<serde_json::Value, String> {
        match self.http.post_json(&format!("{engine_url}/{path}"), body) {
            Ok((status, value)) if (200..300).contains(&status) => Ok(value),
            Ok((status, value)) => Err(format!(
                "{path} returned {status}: {}",
                value.get("error").and_then(|e| e.as_str()).unwrap_or("?")
            )),
            Err(e) => Err(e.to_string()),
        }
    }

    fn endpoints_for(
        &self,
        view: &ResourceView,
        plan: &FragmentPlan,
    ) -> Result<BTreeMap<String, String>, MasterError> {
        let mut out = BTreeMap::new();
        for resource in plan.fragments.keys() {
            let url = match view.worker(resource) {
                Some(w) if !w.endpoint.is_empty() => w.endpoint.clone(),
                _ => self.endpoint_of(resource)?,
            };
            out.insert(resource.clone(), url);
        }
        Ok(out)
    }

    fn endpoint_of(&self, resource: &str) -> Result<String, MasterError> {
        let item = self
            .catalog
            .get(&format!("/worker/{resource}"))?
            .ok_or_else(|| MasterError::Internal(format!("worker {resource} not in catalog")))?;
        item.rel(REL_ENDPOINT)
            .map(str::to_string)
            .ok_or_else(|| MasterError::Internal(format!("worker {resource} has no endpoint")))
    }
}

#[derive(Default)]
struct Journal {
    paused: Vec<(String, String)>,
    drains: Vec<DrainRecord>,
    pending_injects: Vec<Inject>,
    injected: Vec<Inject>,
    updated: Vec<(String, FragmentSpec)>,
    deployed_fresh: Vec<String>,
    committed: bool,
}

struct DrainRecord {
    resource: String,
    edge: EdgeSpec,
    batches: Vec<DataBatch>,
}

struct Inject {
    resource: String,
    edge: EdgeSpec,
    front: bool,
    batches: Vec<DataBatch>,
}

struct EdgeChange {
    edge: EdgeSpec,
    was_cut: bool,
    now_cut: bool,
    old_from_res: String,
    old_to_res: String,
    new_from_res: String,
    new_to_res: String,
}

/// Edges whose transport changes: those incident to a moved processor.
fn edge_changes(
    spec: &DataflowSpec,
    old: &PlacementMapping,
    new: &PlacementMapping,
    moved: &BTreeSet<String>,
) -> Vec<EdgeChange> {
    spec.edges
        .iter()
        .filter(|e| moved.contains(&e.from) || moved.contains(&e.to))
        .map(|e| {
            let old_from_res = old.resource_for(&e.from).expect("total").to_string();
            let old_to_res = old.resource_for(&e.to).expect("total").to_string();
            let new_from_res = new.resource_for(&e.from).expect("total").to_string();
            let new_to_res = new.resource_for(&e.to).expect("total").to_string();
            EdgeChange {
                edge: e.clone(),
                was_cut: old_from_res != old_to_res,
                now_cut: new_from_res != new_to_res,
                old_from_res,
                old_to_res,
                new_from_res,
                new_to_res,
            }
        })
        .collect()
}

/// Builds the engine-facing fragment spec for one resource of a plan.
pub fn fragment_spec(
    uuid: &str,
    spec: &DataflowSpec,
    plan: &FragmentPlan,
    resource: &str,
    endpoints: &BTreeMap<String, String>,
) -> FragmentSpec {
    let entry = &plan.fragments[resource];
    let processors = spec
        .processors
        .iter()
        .filter(|p| entry.processors.contains(&p.id))
        .cloned()
        .collect();
    let links = entry
        .cut_edges
        .iter()
        .map(|ce| {
            let local_is_from = ce.from_resource == resource;
            let peer_resource = if local_is_from {
                &ce.to_resource
            } else {
                &ce.from_resource
            };
            LinkSpec {
                link_id: ce.link_id.clone(),
                from: ce.from.clone(),
                to: ce.to.clone(),
                direction: ce.direction,
                peer: endpoints.get(peer_resource).cloned(),
            }
        })
        .collect();
    FragmentSpec {
        dataflow: uuid.to_string(),
        resource: resource.to_string(),
        processors,
        internal_edges: entry.internal_edges.clone(),
        links,
    }
}

/// Resources ordered so downstream fragments start before their upstreams.
/// Cycles across resources fall back to arbitrary order; link retries cover
/// the gap.
pub fn start_order(plan: &FragmentPlan) -> Vec<String> {
    let resources: BTreeSet<String> = plan.fragments.keys().cloned().collect();
    let mut out_edges: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for ce in plan.cut_edges() {
        if ce.from_resource != ce.to_resource {
            out_edges
                .entry(ce.from_resource.as_str())
                .or_default()
                .insert(ce.to_resource.as_str());
        }
    }
    let mut remaining: BTreeSet<&str> = resources.iter().map(String::as_str).collect();
    let mut order = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        // Pick a fragment whose downstreams are all started (or itself in a
        // cycle), smallest id first for determinism.
        let next = remaining
            .iter()
            .find(|r| {
                out_edges
                    .get(**r)
                    .map(|ds| ds.iter().all(|d| !remaining.contains(d) || d == *r))
                    .unwrap_or(true)
            })
            .copied()
            .or_else(|| remaining.iter().next().copied())
            .expect("remaining not empty");
        remaining.remove(next);
        order.push(next.to_string());
    }
    order
}
