// SPDX-License-Identifier: Apache-2.0

//! The worker-local dataflow engine.
//!
//! One engine runs inside each worker sandbox and hosts fragments of one or
//! more dataflows: processor instances on their own threads, bounded queues
//! on internal edges, and remote links at cut edges. Control operations
//! (deploy, start, pause/resume, live update, undeploy) arrive over the
//! engine's REST API; data arrives over the link wire protocol.

pub mod link;
pub mod metrics;
pub mod queue;
pub mod runtime;
mod service;
pub mod throttle;

pub use link::{LinkRole, LinkSpec};
pub use queue::{EdgeQueue, DEFAULT_QUEUE_CAPACITY};
pub use runtime::{CounterSnapshot, ProcessorHandle};
pub use throttle::TokenThrottle;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::databatch::DataBatch;
use crate::flowmodel::{EdgeSpec, LinkDirection, ProcessorSpec};
use crate::httpc::HttpClient;
use crate::httpd::HttpServer;
use crate::processors::{build_logic, BuildCtx, ProcessorError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("fragment {0} not found")]
    FragmentNotFound(String),
    #[error("duplicate fragment for dataflow {0} on this engine")]
    DuplicateFragment(String),
    #[error("illegal transition: fragment is {current}")]
    IllegalState { current: &'static str },
    #[error("processor {0} not found in fragment")]
    ProcessorNotFound(String),
    #[error("queue {from}->{to} not found")]
    QueueNotFound { from: String, to: String },
    #[error("invalid fragment spec: {0}")]
    Invalid(String),
    #[error("processor {id}: {source}")]
    Build {
        id: String,
        #[source]
        source: ProcessorError,
    },
    #[error("duplicate link id {0} on this engine")]
    DuplicateLink(String),
}

/// Who may open data-plane connections to this engine. The testbed's
/// firewall stand-in: declared, not probed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AllowFrom {
    #[default]
    Any,
    Only(BTreeSet<String>),
}

impl AllowFrom {
    pub fn permits(&self, device: Option<&str>) -> bool {
        match self {
            AllowFrom::Any => true,
            AllowFrom::Only(set) => device.map(|d| set.contains(d)).unwrap_or(false),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub listen: String,
    pub worker_id: String,
    pub device_id: String,
    pub device_class: String,
    pub cpu_millis: i64,
    pub mem_mb: i64,
    pub tags: Vec<String>,
    pub profile: String,
    /// Simulated-CPU budget per second; `None` = unthrottled.
    pub throttle_tokens_per_sec: Option<f64>,
    /// Simulated cost charged per tuple at each processor.
    pub cost_per_tuple: f64,
    pub catalog_url: Option<String>,
    pub metrics_interval: Duration,
    pub allow_from: AllowFrom,
    pub scratch_dir: PathBuf,
}

impl EngineConfig {
    /// In-process engine for tests: loopback, unthrottled, no catalog.
    pub fn local_test(worker_id: &str) -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            worker_id: worker_id.into(),
            device_id: format!("dev-{worker_id}"),
            device_class: "edge".into(),
            cpu_millis: 4000,
            mem_mb: 1024,
            tags: Vec::new(),
            profile: "unthrottled".into(),
            throttle_tokens_per_sec: None,
            cost_per_tuple: 1.0,
            catalog_url: None,
            metrics_interval: Duration::from_secs(5),
            allow_from: AllowFrom::Any,
            scratch_dir: std::env::temp_dir().join(format!("echo-worker-{worker_id}")),
        }
    }
}

/// Wire form of one fragment: the per-resource slice of a placed dataflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentSpec {
    pub dataflow: String,
    pub resource: String,
    pub processors: Vec<ProcessorSpec>,
    #[serde(default)]
    pub internal_edges: Vec<EdgeSpec>,
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

impl FragmentSpec {
    fn processor_ids(&self) -> BTreeSet<String> {
        self.processors.iter().map(|p| p.id.clone()).collect()
    }

    fn validate(&self) -> Result<(), EngineError> {
        let ids = self.processor_ids();
        if self.dataflow.is_empty() || self.resource.is_empty() {
            return Err(EngineError::Invalid("dataflow and resource required".into()));
        }
        for e in &self.internal_edges {
            if !ids.contains(&e.from) || !ids.contains(&e.to) {
                return Err(EngineError::Invalid(format!(
                    "internal edge {}->{} references a non-local processor",
                    e.from, e.to
                )));
            }
        }
        for l in &self.links {
            let from_local = ids.contains(&l.from);
            let to_local = ids.contains(&l.to);
            match (from_local, to_local) {
                (true, true) => {
                    return Err(EngineError::Invalid(format!(
                        "link {} joins two local processors; use an internal edge",
                        l.link_id
                    )))
                }
                (false, false) => {
                    return Err(EngineError::Invalid(format!(
                        "link {} touches no local processor",
                        l.link_id
                    )))
                }
                _ => {}
            }
            let needs_peer = matches!(
                (from_local, l.direction),
                (true, LinkDirection::Push) | (false, LinkDirection::Pull)
            );
            if needs_peer && l.peer.is_none() {
                return Err(EngineError::Invalid(format!(
                    "link {} is the connecting side but has no peer endpoint",
                    l.link_id
                )));
            }
        }
        Ok(())
    }

    /// Queue keys this fragment owns: internal edges plus one queue per
    /// link endpoint (outbound or inbound side of the cut edge).
    fn queue_keys(&self) -> BTreeSet<(String, String)> {
        let mut keys: BTreeSet<(String, String)> = self
            .internal_edges
            .iter()
            .map(|e| (e.from.clone(), e.to.clone()))
            .collect();
        for l in &self.links {
            keys.insert((l.from.clone(), l.to.clone()));
        }
        keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FragState {
    Deployed,
    Running,
    Stopped,
}

impl FragState {
    fn name(self) -> &'static str {
        match self {
            FragState::Deployed => "deployed",
            FragState::Running => "running",
            FragState::Stopped => "stopped",
        }
    }
}

pub struct Fragment {
    pub flow_id: String,
    pub resource: String,
    state: Mutex<FragState>,
    spec: Mutex<FragmentSpec>,
    processors: Mutex<BTreeMap<String, Arc<ProcessorHandle>>>,
    queues: Mutex<BTreeMap<(String, String), Arc<EdgeQueue>>>,
    links: Mutex<BTreeMap<String, Arc<link::LinkHandle>>>,
    stop: Arc<AtomicBool>,
}

/// Depth report for one edge queue.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueDepth {
    pub from: String,
    pub to: String,
    pub depth: usize,
}

pub struct Engine {
    inner: Arc<EngineInner>,
    server: Mutex<Option<HttpServer>>,
    reporter: Mutex<Option<metrics::Reporter>>,
}

pub struct EngineInner {
    pub config: EngineConfig,
    endpoint: Mutex<String>,
    fragments: Mutex<BTreeMap<String, Arc<Fragment>>>,
    /// link id -> hosting fragment's link handle, for the wire endpoints.
    link_index: Mutex<BTreeMap<String, Arc<link::LinkHandle>>>,
    throttle: Arc<TokenThrottle>,
    http: HttpClient,
}

impl Engine {
    pub fn start(config: EngineConfig) -> std::io::Result<Self> {
        std::fs::create_dir_all(&config.scratch_dir)?;
        let throttle = Arc::new(TokenThrottle::new(config.throttle_tokens_per_sec));
        let mut http = HttpClient::new(Duration::from_secs(30));
        http = http.with_from_device(config.device_id.clone());
        let inner = Arc::new(EngineInner {
            config,
            endpoint: Mutex::new(String::new()),
            fragments: Mutex::new(BTreeMap::new()),
            link_index: Mutex::new(BTreeMap::new()),
            throttle,
            http,
        });
        let handler = service::handler(inner.clone());
        let server = HttpServer::start(&inner.config.listen, 16, handler)?;
        *inner.endpoint.lock().expect("endpoint lock") = server.url();

        let reporter = if inner.config.catalog_url.is_some() {
            Some(metrics::Reporter::start(inner.clone()))
        } else {
            None
        };

        Ok(Self {
            inner,
            server: Mutex::new(Some(server)),
            reporter: Mutex::new(reporter),
        })
    }

    pub fn inner(&self) -> Arc<EngineInner> {
        self.inner.clone()
    }

    pub fn url(&self) -> String {
        self.inner.endpoint.lock().expect("endpoint lock").clone()
    }

    pub fn shutdown(&self) {
        if let Some(r) = self.reporter.lock().expect("reporter lock").take() {
            r.stop();
        }
        let flows: Vec<String> = self
            .inner
            .fragments
            .lock()
            .expect("fragments lock")
            .keys()
            .cloned()
            .collect();
        for flow in flows {
            let _ = self.inner.undeploy(&flow);
        }
        if let Some(mut s) = self.server.lock().expect("server lock").take() {
            s.shutdown();
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl EngineInner {
    pub fn endpoint(&self) -> String {
        self.endpoint.lock().expect("endpoint lock").clone()
    }

    pub fn throttle(&self) -> &TokenThrottle {
        &self.throttle
    }

    fn fragment(&self, flow: &str) -> Result<Arc<Fragment>, EngineError> {
        self.fragments
            .lock()
            .expect("fragments lock")
            .get(flow)
            .cloned()
            .ok_or_else(|| EngineError::FragmentNotFound(flow.to_string()))
    }

    pub fn link(&self, link_id: &str) -> Option<Arc<link::LinkHandle>> {
        self.link_index
            .lock()
            .expect("link index lock")
            .get(link_id)
            .cloned()
    }

    /// Creates queues and link endpoints and builds every processor's logic.
    /// Nothing executes until start.
    pub fn deploy(&self, spec: FragmentSpec) -> Result<(), EngineError> {
        spec.validate()?;
        let mut fragments = self.fragments.lock().expect("fragments lock");
        if fragments.contains_key(&spec.dataflow) {
            return Err(EngineError::DuplicateFragment(spec.dataflow.clone()));
        }

        let fragment = Arc::new(Fragment {
            flow_id: spec.dataflow.clone(),
            resource: spec.resource.clone(),
            state: Mutex::new(FragState::Deployed),
            spec: Mutex::new(spec.clone()),
            processors: Mutex::new(BTreeMap::new()),
            queues: Mutex::new(BTreeMap::new()),
            links: Mutex::new(BTreeMap::new()),
            stop: Arc::new(AtomicBool::new(false)),
        });

        // Build logic first so deploy errors name the offending processor.
        let build_ctx = self.build_ctx(&fragment);
        let mut handles = BTreeMap::new();
        for pspec in &spec.processors {
            let logic = build_logic(pspec, &build_ctx).map_err(|source| EngineError::Build {
                id: pspec.id.clone(),
                source,
            })?;
            handles.insert(
                pspec.id.clone(),
                ProcessorHandle::new(pspec.clone(), logic, false),
            );
        }

        {
            let mut queues = fragment.queues.lock().expect("queues lock");
            for key in spec.queue_keys() {
                queues.insert(key, Arc::new(EdgeQueue::new(DEFAULT_QUEUE_CAPACITY)));
            }
        }

        {
            let local = spec.processor_ids();
            let queues = fragment.queues.lock().expect("queues lock");
            let mut links = fragment.links.lock().expect("links lock");
            let mut index = self.link_index.lock().expect("link index lock");
            for lspec in &spec.links {
                if index.contains_key(&lspec.link_id) {
                    return Err(EngineError::DuplicateLink(lspec.link_id.clone()));
                }
            }
            for lspec in &spec.links {
                let role = if lspec.is_outbound(&local) {
                    LinkRole::Outbound
                } else {
                    LinkRole::Inbound
                };
                let queue = queues[&(lspec.from.clone(), lspec.to.clone())].clone();
                let handle = link::LinkHandle::new(lspec.clone(), role, queue, false);
                index.insert(lspec.link_id.clone(), handle.clone());
                links.insert(lspec.link_id.clone(), handle);
            }
        }

        *fragment.processors.lock().expect("processors lock") = handles;
        fragments.insert(spec.dataflow.clone(), fragment);
        Ok(())
    }

    fn build_ctx(&self, fragment: &Fragment) -> BuildCtx {
        BuildCtx {
            scratch_dir: self.config.scratch_dir.clone(),
            stop: fragment.stop.clone(),
            from_device: Some(self.config.device_id.clone()),
        }
    }

    pub fn start_fragment(&self, flow: &str) -> Result<(), EngineError> {
        let fragment = self.fragment(flow)?;
        {
            let mut state = fragment.state.lock().expect("state lock");
            match *state {
                FragState::Deployed => *state = FragState::Running,
                other => return Err(EngineError::IllegalState { current: other.name() }),
            }
        }
        let processors = fragment.processors.lock().expect("processors lock").clone();
        for handle in processors.values() {
            self.spawn_processor(&fragment, handle);
        }
        let links = fragment.links.lock().expect("links lock").clone();
        for link in links.values() {
            link.activate();
            link.spawn_client(self.http.clone(), fragment.stop.clone());
        }
        Ok(())
    }

    fn spawn_processor(&self, fragment: &Fragment, handle: &Arc<ProcessorHandle>) {
        let queues = fragment.queues.lock().expect("queues lock");
        let pid = &handle.spec.id;
        let inputs: Vec<(String, Arc<EdgeQueue>)> = queues
            .iter()
            .filter(|((_, to), _)| to == pid)
            .map(|((from, _), q)| (from.clone(), q.clone()))
            .collect();
        let outputs: Vec<(String, Arc<EdgeQueue>)> = queues
            .iter()
            .filter(|((from, _), _)| from == pid)
            .map(|((_, to), q)| (to.clone(), q.clone()))
            .collect();
        runtime::spawn(runtime::RunArgs {
            handle: handle.clone(),
            inputs,
            outputs,
            fragment_stop: fragment.stop.clone(),
            throttle: self.throttle.clone(),
            cost_per_tuple: self.config.cost_per_tuple,
            scratch_dir: self.config.scratch_dir.clone(),
        });
    }

    pub fn pause_processors(&self, flow: &str, pids: &[String]) -> Result<(), EngineError> {
        self.set_paused(flow, pids, true)
    }

    pub fn resume_processors(&self, flow: &str, pids: &[String]) -> Result<(), EngineError> {
        self.set_paused(flow, pids, false)
    }

    fn set_paused(&self, flow: &str, pids: &[String], paused: bool) -> Result<(), EngineError> {
        let fragment = self.fragment(flow)?;
        let processors = fragment.processors.lock().expect("processors lock");
        for pid in pids {
            let handle = processors
                .get(pid)
                .ok_or_else(|| EngineError::ProcessorNotFound(pid.clone()))?;
            handle.set_paused(paused);
        }
        Ok(())
    }

    /// Stops the fragment and removes it, reporting what was still queued.
    /// Queued batches are not drained here: migration transfers them
    /// through the queue endpoints before undeploying.
    pub fn undeploy(&self, flow: &str) -> Result<Vec<QueueDepth>, EngineError> {
        let fragment = {
            let mut fragments = self.fragments.lock().expect("fragments lock");
            fragments
                .remove(flow)
                .ok_or_else(|| EngineError::FragmentNotFound(flow.to_string()))?
        };
        *fragment.state.lock().expect("state lock") = FragState::Stopped;
        fragment.stop.store(true, Ordering::Relaxed);

        let links = fragment.links.lock().expect("links lock").clone();
        {
            let mut index = self.link_index.lock().expect("link index lock");
            for (id, link) in &links {
                link.teardown();
                index.remove(id);
            }
        }
        let processors = fragment.processors.lock().expect("processors lock").clone();
        for handle in processors.values() {
            handle.mark_removed();
            handle.join();
        }
        let inventory = fragment_queue_depths(&fragment);
        for (_, q) in fragment.queues.lock().expect("queues lock").iter() {
            q.close();
        }
        Ok(inventory)
    }

    pub fn queue_depths(&self, flow: &str) -> Result<Vec<QueueDepth>, EngineError> {
        let fragment = self.fragment(flow)?;
        Ok(fragment_queue_depths(&fragment))
    }

    pub fn queue_drain(
        &self,
        flow: &str,
        from: &str,
        to: &str,
    ) -> Result<Vec<DataBatch>, EngineError> {
        let fragment = self.fragment(flow)?;
        let queues = fragment.queues.lock().expect("queues lock");
        let queue = queues
            .get(&(from.to_string(), to.to_string()))
            .ok_or_else(|| EngineError::QueueNotFound {
                from: from.into(),
                to: to.into(),
            })?;
        Ok(queue.drain_all())
    }

    pub fn queue_inject(
        &self,
        flow: &str,
        from: &str,
        to: &str,
        batches: Vec<DataBatch>,
        at_front: bool,
    ) -> Result<usize, EngineError> {
        let fragment = self.fragment(flow)?;
        let queues = fragment.queues.lock().expect("queues lock");
        let queue = queues
            .get(&(from.to_string(), to.to_string()))
            .ok_or_else(|| EngineError::QueueNotFound {
                from: from.into(),
                to: to.into(),
            })?;
        let n = batches.len();
        queue.inject(batches, at_front);
        Ok(n)
    }

    /// Live reconfiguration: diffs the running fragment against `new_spec`.
    ///
    /// Removed processors must already be paused (the deployer pauses
    /// affected processors first); their threads are joined. Added
    /// processors start paused. Added or changed links start held — no
    /// transport — until `activate_links`, so transferred batches can be
    /// injected ahead of new traffic. Queue objects whose edge survives are
    /// preserved along with their contents; running processors never lose
    /// the queues they captured.
    pub fn update_fragment(&self, new_spec: FragmentSpec) -> Result<(), EngineError> {
        new_spec.validate()?;
        let fragment = self.fragment(&new_spec.dataflow)?;
        if new_spec.resource != fragment.resource {
            return Err(EngineError::Invalid(format!(
                "fragment update for resource {} arrived at {}",
                new_spec.resource, fragment.resource
            )));
        }
        let started = {
            let state = fragment.state.lock().expect("state lock");
            matches!(*state, FragState::Running)
        };

        // Processors.
        let old_ids: BTreeSet<String>;
        {
            let mut processors = fragment.processors.lock().expect("processors lock");
            old_ids = processors.keys().cloned().collect();
            let new_ids = new_spec.processor_ids();
            for gone in old_ids.difference(&new_ids) {
                if let Some(handle) = processors.remove(gone) {
                    handle.mark_removed();
                    handle.join();
                }
            }
        }

        // Queues: create missing, drop ones no edge references anymore.
        {
            let mut queues = fragment.queues.lock().expect("queues lock");
            let target = new_spec.queue_keys();
            let existing: BTreeSet<(String, String)> = queues.keys().cloned().collect();
            for stale_key in existing.difference(&target) {
                queues.remove(stale_key);
            }
            for missing in target.difference(&existing) {
                queues.insert(missing.clone(), Arc::new(EdgeQueue::new(DEFAULT_QUEUE_CAPACITY)));
            }
        }

        // Links: tear down removed/changed, create new ones held.
        {
            let local = new_spec.processor_ids();
            let queues = fragment.queues.lock().expect("queues lock");
            let mut links = fragment.links.lock().expect("links lock");
            let mut index = self.link_index.lock().expect("link index lock");
            let new_by_id: BTreeMap<String, &LinkSpec> =
                new_spec.links.iter().map(|l| (l.link_id.clone(), l)).collect();

            let current_ids: Vec<String> = links.keys().cloned().collect();
            for id in current_ids {
                let keep = new_by_id
                    .get(&id)
                    .map(|nl| links[&id].spec == **nl)
                    .unwrap_or(false);
                if !keep {
                    if let Some(old) = links.remove(&id) {
                        old.teardown();
                        index.remove(&id);
                    }
                }
            }
            for (id, lspec) in &new_by_id {
                if links.contains_key(id) {
                    continue;
                }
                let role = if lspec.is_outbound(&local) {
                    LinkRole::Outbound
                } else {
                    LinkRole::Inbound
                };
                let queue = queues[&(lspec.from.clone(), lspec.to.clone())].clone();
                let handle = link::LinkHandle::new((*lspec).clone(), role, queue, false);
                if started {
                    handle.spawn_client(self.http.clone(), fragment.stop.clone());
                }
                index.insert(id.clone(), handle.clone());
                links.insert(id.clone(), handle);
            }
        }

        // Added processors: paused until the deployer resumes them.
        {
            let build_ctx = self.build_ctx(&fragment);
            let mut added = Vec::new();
            {
                let processors = fragment.processors.lock().expect("processors lock");
                for pspec in &new_spec.processors {
                    if !processors.contains_key(&pspec.id) {
                        let logic =
                            build_logic(pspec, &build_ctx).map_err(|source| EngineError::Build {
                                id: pspec.id.clone(),
                                source,
                            })?;
                        added.push(ProcessorHandle::new(pspec.clone(), logic, true));
                    }
                }
            }
            let mut processors = fragment.processors.lock().expect("processors lock");
            for handle in added {
                if started {
                    self.spawn_processor(&fragment, &handle);
                }
                processors.insert(handle.spec.id.clone(), handle);
            }
        }

        *fragment.spec.lock().expect("spec lock") = new_spec;
        Ok(())
    }

    /// Opens every held link. Called after queued-batch transfer so nothing
    /// overtakes the injected backlog.
    pub fn activate_links(&self, flow: &str) -> Result<usize, EngineError> {
        let fragment = self.fragment(flow)?;
        let links = fragment.links.lock().expect("links lock");
        let mut activated = 0;
        for link in links.values() {
            if !link.is_active() {
                link.activate();
                activated += 1;
            }
        }
        Ok(activated)
    }

    /// Summary of fragments and processor states for the status endpoint.
    pub fn status(&self) -> serde_json::Value {
        let fragments = self.fragments.lock().expect("fragments lock");
        let mut out = serde_json::Map::new();
        for (flow, fragment) in fragments.iter() {
            let state = fragment.state.lock().expect("state lock");
            let started = matches!(*state, FragState::Running);
            let stopped = matches!(*state, FragState::Stopped);
            let processors: BTreeMap<String, &'static str> = fragment
                .processors
                .lock()
                .expect("processors lock")
                .iter()
                .map(|(pid, h)| (pid.clone(), h.state_str(started, stopped)))
                .collect();
            out.insert(
                flow.clone(),
                serde_json::json!({
                    "state": state.name(),
                    "resource": fragment.resource,
                    "processors": processors,
                }),
            );
        }
        serde_json::json!({
            "worker_id": self.config.worker_id,
            "device_id": self.config.device_id,
            "endpoint": self.endpoint(),
            "fragments": out,
        })
    }

    pub fn fragments_snapshot(&self) -> Vec<Arc<Fragment>> {
        self.fragments
            .lock()
            .expect("fragments lock")
            .values()
            .cloned()
            .collect()
    }
}

fn fragment_queue_depths(fragment: &Fragment) -> Vec<QueueDepth> {
    fragment
        .queues
        .lock()
        .expect("queues lock")
        .iter()
        .map(|((from, to), q)| QueueDepth {
            from: from.clone(),
            to: to.clone(),
            depth: q.len(),
        })
        .collect()
}

impl Fragment {
    pub fn processor(&self, pid: &str) -> Option<Arc<ProcessorHandle>> {
        self.processors.lock().expect("processors lock").get(pid).cloned()
    }

    pub fn processors_snapshot(&self) -> BTreeMap<String, Arc<ProcessorHandle>> {
        self.processors.lock().expect("processors lock").clone()
    }

    pub fn links_snapshot(&self) -> BTreeMap<String, Arc<link::LinkHandle>> {
        self.links.lock().expect("links lock").clone()
    }

    pub fn queues_snapshot(&self) -> BTreeMap<(String, String), Arc<EdgeQueue>> {
        self.queues.lock().expect("queues lock").clone()
    }

    pub fn state_name(&self) -> &'static str {
        self.state.lock().expect("state lock").name()
    }

    pub fn is_running(&self) -> bool {
        matches!(*self.state.lock().expect("state lock"), FragState::Running)
    }

    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        self.stop.clone()
    }
}
