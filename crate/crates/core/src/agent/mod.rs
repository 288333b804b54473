// SPDX-License-Identifier: Apache-2.0

//! The device service: registers its device at boot, spawns and terminates
//! capacity-capped worker sandboxes hosting engine instances, and reports
//! device utilization to the catalog.
//!
//! Worker sandboxes are launched through a [`WorkerLauncher`]: the CLI
//! launches real OS processes (the container stand-in), tests launch
//! in-thread engines. Capacity accounting and monitoring are identical
//! either way.

mod service;

pub use service::{AgentService, SpawnRequest};

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{
    CatalogClient, CatalogClientError, CatalogItem, REL_CLASS, REL_CPU_MILLIS, REL_ENDPOINT,
    REL_MEM_MB, REL_REACHABLE_FROM, REL_STATE, REL_STOPPED, REL_TAGS, REL_VALUE,
    REL_VISIBILITY,
};
use crate::databatch::now_iso;
use crate::flowmodel::ResourceDemand;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("insufficient capacity: requested {requested:?}, headroom {headroom:?}")]
    InsufficientCapacity {
        requested: ResourceDemand,
        headroom: ResourceDemand,
    },
    #[error("worker {0} not found")]
    WorkerNotFound(String),
    #[error("device id {0} is already live in the catalog")]
    DuplicateDevice(String),
    #[error("worker failed health check: {0}")]
    HealthCheck(String),
    #[error(transparent)]
    Catalog(#[from] CatalogClientError),
    #[error("launch failed: {0}")]
    Launch(String),
}

/// Per-device configuration (the agent's config file schema).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub id: String,
    /// `edge`, `fog` or `cloud`.
    pub class: String,
    pub capacity: ResourceDemand,
    /// `public` or `private`.
    #[serde(default = "default_visibility")]
    pub visibility: String,
    /// Device ids allowed to open connections to this device; `"*"` means
    /// everyone. Declared, not probed; enforced by the engines' gate.
    #[serde(default)]
    pub reachable_from: Vec<String>,
    pub catalog_url: String,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub tags: Vec<String>,
    /// Named throttle profiles resolvable by spawn requests.
    #[serde(default)]
    pub profiles: BTreeMap<String, ProfileSpec>,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_ms: u64,
    #[serde(default = "default_metrics_interval_ms")]
    pub metrics_interval_ms: u64,
}

fn default_visibility() -> String {
    "private".into()
}

fn default_listen() -> String {
    "127.0.0.1:0".into()
}

fn default_heartbeat_ms() -> u64 {
    5000
}

fn default_metrics_interval_ms() -> u64 {
    5000
}

/// A throttle profile: simulated-CPU tokens per second, or unthrottled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSpec {
    #[serde(default)]
    pub cpu_tokens_per_sec: Option<f64>,
}

impl DeviceConfig {
    pub fn resolve_profile(&self, name: &str) -> ProfileSpec {
        if let Some(p) = self.profiles.get(name) {
            return p.clone();
        }
        match name {
            "edge-throttled" => ProfileSpec {
                cpu_tokens_per_sec: Some(60.0),
            },
            _ => ProfileSpec {
                cpu_tokens_per_sec: None,
            },
        }
    }
}

/// What the launcher must start: one engine with these parameters.
#[derive(Debug, Clone)]
pub struct WorkerParams {
    pub worker_id: String,
    pub device: DeviceConfig,
    pub caps: ResourceDemand,
    pub profile: String,
    pub throttle: Option<f64>,
}

/// A launched worker sandbox.
pub trait WorkerHandle: Send + Sync {
    /// Engine base URL once the worker is up.
    fn endpoint(&self) -> String;
    /// OS pid when the sandbox is a process.
    fn pid(&self) -> Option<u32>;
    fn is_alive(&self) -> bool;
    /// Hard-stop the sandbox.
    fn kill(&self);
}

pub trait WorkerLauncher: Send + Sync {
    fn launch(&self, params: &WorkerParams) -> Result<Box<dyn WorkerHandle>, AgentError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerState {
    Starting,
    Up,
    Down,
}

pub struct WorkerSandbox {
    pub worker_id: String,
    pub caps: ResourceDemand,
    pub profile: String,
    pub handle: Box<dyn WorkerHandle>,
    pub state: Mutex<WorkerState>,
}

pub struct Agent {
    pub config: DeviceConfig,
    catalog: CatalogClient,
    launcher: Box<dyn WorkerLauncher>,
    /// Spawn/terminate serialized so capacity checks stay atomic.
    workers: Mutex<BTreeMap<String, Arc<WorkerSandbox>>>,
    stop: Arc<AtomicBool>,
    monitor: Mutex<Option<std::thread::JoinHandle<()>>>,
    agent_endpoint: Mutex<String>,
}

impl Agent {
    /// Registers the device and starts the monitor loop. Retries until the
    /// catalog is reachable; refuses to start when a live (non-stale)
    /// device item with the same id exists.
    pub fn bootstrap(
        config: DeviceConfig,
        launcher: Box<dyn WorkerLauncher>,
    ) -> Result<Arc<Self>, AgentError> {
        let catalog = CatalogClient::new(config.catalog_url.clone());
        let device_href = format!("/device/{}", config.id);
        loop {
            match catalog.get(&device_href) {
                Ok(Some(existing)) if !existing.is_stale() && existing.rel(REL_STATE) == Some("up") => {
                    return Err(AgentError::DuplicateDevice(config.id.clone()));
                }
                Ok(_) => break,
                Err(CatalogClientError::Http(_)) => {
                    log::info!("agent {}: catalog unreachable, retrying", config.id);
                    std::thread::sleep(Duration::from_millis(500));
                }
                Err(e) => return Err(e.into()),
            }
        }

        let agent = Arc::new(Self {
            config,
            catalog,
            launcher,
            workers: Mutex::new(BTreeMap::new()),
            stop: Arc::new(AtomicBool::new(false)),
            monitor: Mutex::new(None),
            agent_endpoint: Mutex::new(String::new()),
        });
        agent.register_device()?;
        let monitor = {
            let agent = agent.clone();
            std::thread::Builder::new()
                .name(format!("agent-monitor-{}", agent.config.id))
                .spawn(move || agent.monitor_loop())
                .expect("spawn agent monitor")
        };
        *agent.monitor.lock().expect("monitor lock") = Some(monitor);
        Ok(agent)
    }

    pub fn set_endpoint(&self, endpoint: String) {
        *self.agent_endpoint.lock().expect("endpoint lock") = endpoint;
        let _ = self.register_device();
    }

    fn register_device(&self) -> Result<(), AgentError> {
        let c = &self.config;
        let item = CatalogItem::new(format!("/device/{}", c.id))
            .with(REL_CLASS, &c.class)
            .with(REL_CPU_MILLIS, c.capacity.cpu_millis.to_string())
            .with(REL_MEM_MB, c.capacity.mem_mb.to_string())
            .with(REL_VISIBILITY, &c.visibility)
            .with(
                REL_REACHABLE_FROM,
                serde_json::to_string(&c.reachable_from).expect("list is json"),
            )
            .with(REL_TAGS, serde_json::to_string(&c.tags).expect("list is json"))
            .with(REL_STATE, "up")
            .with(
                REL_ENDPOINT,
                self.agent_endpoint.lock().expect("endpoint lock").clone(),
            );
        self.catalog.register(&item)?;
        Ok(())
    }

    /// Remaining headroom after live workers' allotments.
    pub fn headroom(&self) -> ResourceDemand {
        let workers = self.workers.lock().expect("workers lock");
        self.headroom_locked(&workers)
    }

    fn headroom_locked(
        &self,
        workers: &BTreeMap<String, Arc<WorkerSandbox>>,
    ) -> ResourceDemand {
        let mut used = ResourceDemand::default();
        for w in workers.values() {
            if *w.state.lock().expect("state lock") != WorkerState::Down {
                used.cpu_millis += w.caps.cpu_millis;
                used.mem_mb += w.caps.mem_mb;
            }
        }
        ResourceDemand {
            cpu_millis: self.config.capacity.cpu_millis - used.cpu_millis,
            mem_mb: self.config.capacity.mem_mb - used.mem_mb,
        }
    }

    /// Launches one worker sandbox with the given caps, waits for it to pass
    /// its health check (engine answering), and registers it.
    pub fn spawn_worker(
        self: &Arc<Self>,
        caps: ResourceDemand,
        profile: &str,
    ) -> Result<Arc<WorkerSandbox>, AgentError> {
        let mut workers = self.workers.lock().expect("workers lock");
        let headroom = self.headroom_locked(&workers);
        if caps.cpu_millis > headroom.cpu_millis || caps.mem_mb > headroom.mem_mb {
            return Err(AgentError::InsufficientCapacity {
                requested: caps,
                headroom,
            });
        }
        let worker_id = format!("w-{}", &uuid::Uuid::new_v4().simple().to_string()[..12]);
        let params = WorkerParams {
            worker_id: worker_id.clone(),
            device: self.config.clone(),
            caps,
            profile: profile.to_string(),
            throttle: self.config.resolve_profile(profile).cpu_tokens_per_sec,
        };
        let handle = self.launcher.launch(&params)?;

        // Health: the engine answers /health within 10 s or the worker dies.
        let http = crate::httpc::HttpClient::new(Duration::from_secs(2));
        let deadline = std::time::Instant::now() + Duration::from_secs(10);
        loop {
            match http.get_json(&format!("{}/health", handle.endpoint())) {
                Ok((200, _)) => break,
                _ if std::time::Instant::now() >= deadline => {
                    handle.kill();
                    return Err(AgentError::HealthCheck(format!(
                        "worker {worker_id} engine did not answer within 10s"
                    )));
                }
                _ => std::thread::sleep(Duration::from_millis(100)),
            }
        }

        let sandbox = Arc::new(WorkerSandbox {
            worker_id: worker_id.clone(),
            caps,
            profile: profile.to_string(),
            handle,
            state: Mutex::new(WorkerState::Up),
        });
        workers.insert(worker_id, sandbox.clone());
        // The engine heartbeats its own /worker item; nothing to add here
        // beyond billing-ish lifecycle stamps living on the engine item.
        Ok(sandbox)
    }

    /// Gracefully stops a worker and removes its catalog item.
    pub fn terminate_worker(&self, worker_id: &str) -> Result<(), AgentError> {
        let sandbox = {
            let mut workers = self.workers.lock().expect("workers lock");
            workers
                .remove(worker_id)
                .ok_or_else(|| AgentError::WorkerNotFound(worker_id.to_string()))?
        };
        sandbox.handle.kill();
        *sandbox.state.lock().expect("state lock") = WorkerState::Down;
        // Record the stop stamp, then drop the items: absent worker means
        // absent from scheduling.
        let _ = self.catalog.register(
            &CatalogItem::new(format!("/worker/{worker_id}/lifecycle"))
                .with(REL_STOPPED, now_iso()),
        );
        let _ = self.catalog.delete(&format!("/worker/{worker_id}"));
        Ok(())
    }

    pub fn workers_snapshot(&self) -> Vec<Arc<WorkerSandbox>> {
        self.workers.lock().expect("workers lock").values().cloned().collect()
    }

    pub fn worker(&self, worker_id: &str) -> Option<Arc<WorkerSandbox>> {
        self.workers.lock().expect("workers lock").get(worker_id).cloned()
    }

    /// Periodic monitor: device CPU/Mem utilization derived from the
    /// workers' engine metrics, worker liveness, and the device heartbeat.
    fn monitor_loop(self: &Arc<Self>) {
        let interval = Duration::from_millis(self.config.metrics_interval_ms.max(250));
        let http = crate::httpc::HttpClient::new(Duration::from_secs(2));
        let mut consumed_prev: BTreeMap<String, f64> = BTreeMap::new();
        let mut last_tick = std::time::Instant::now();
        while !self.stop.load(Ordering::Relaxed) {
            std::thread::sleep(interval.min(Duration::from_millis(250)));
            if last_tick.elapsed() < interval {
                continue;
            }
            let elapsed = last_tick.elapsed().as_secs_f64();
            last_tick = std::time::Instant::now();

            let mut device_tokens_per_sec = 0.0;
            let mut device_mem_pct_weighted = 0.0;
            for sandbox in self.workers_snapshot() {
                let alive = sandbox.handle.is_alive();
                let metrics = if alive {
                    http.get_json(&format!("{}/metrics", sandbox.handle.endpoint()))
                        .ok()
                        .filter(|(s, _)| *s == 200)
                        .map(|(_, v)| v)
                } else {
                    None
                };
                let mut state = sandbox.state.lock().expect("state lock");
                match metrics {
                    Some(doc) => {
                        *state = WorkerState::Up;
                        let consumed =
                            doc.get("consumed_tokens").and_then(|v| v.as_f64()).unwrap_or(0.0);
                        let prev = consumed_prev
                            .insert(sandbox.worker_id.clone(), consumed)
                            .unwrap_or(consumed);
                        device_tokens_per_sec += ((consumed - prev) / elapsed).max(0.0);
                        device_mem_pct_weighted += doc
                            .get("mem_pct")
                            .and_then(|v| v.as_f64())
                            .unwrap_or(0.0)
                            * (sandbox.caps.mem_mb as f64 / self.config.capacity.mem_mb.max(1) as f64);
                    }
                    None => {
                        if *state == WorkerState::Up {
                            log::warn!(
                                "agent {}: worker {} stopped answering",
                                self.config.id,
                                sandbox.worker_id
                            );
                        }
                        *state = WorkerState::Down;
                        // The worker item itself goes stale on its own (no
                        // more heartbeats); record our observation as a
                        // sub-item so operators see who noticed.
                        let _ = self.catalog.register(
                            &CatalogItem::new(format!("/worker/{}/state", sandbox.worker_id))
                                .with(REL_VALUE, "down"),
                        );
                    }
                }
            }

            let cpu_pct = (device_tokens_per_sec
                / self.config.capacity.cpu_millis.max(1) as f64
                * 100.0)
                .clamp(0.0, 100.0);
            let _ = self.catalog.register(
                &CatalogItem::new(format!("/device/{}/CPUUtil", self.config.id))
                    .with(REL_VALUE, format!("{cpu_pct:.2}")),
            );
            let _ = self.catalog.register(
                &CatalogItem::new(format!("/device/{}/MemUtil", self.config.id))
                    .with(REL_VALUE, format!("{:.2}", device_mem_pct_weighted.clamp(0.0, 100.0))),
            );
            // Device heartbeat keeps the item from going stale.
            let _ = self.register_device();
        }
    }

    /// Stops the monitor and every worker; deregisters the device.
    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.monitor.lock().expect("monitor lock").take() {
            let _ = h.join();
        }
        let ids: Vec<String> = self
            .workers
            .lock()
            .expect("workers lock")
            .keys()
            .cloned()
            .collect();
        for id in ids {
            let _ = self.terminate_worker(&id);
        }
        let mut item = CatalogItem::new(format!("/device/{}", self.config.id));
        item.set_rel(REL_STATE, "stopped");
        item.set_rel(REL_STOPPED, now_iso());
        let _ = self.catalog.register(&item);
    }

    /// The status document served by the agent's REST surface.
    pub fn status_doc(&self) -> serde_json::Value {
        let workers: Vec<serde_json::Value> = self
            .workers_snapshot()
            .iter()
            .map(|w| {
                serde_json::json!({
                    "worker_id": w.worker_id,
                    "caps": w.caps,
                    "profile": w.profile,
                    "endpoint": w.handle.endpoint(),
                    "pid": w.handle.pid(),
                    "state": *w.state.lock().expect("state lock"),
                })
            })
            .collect();
        serde_json::json!({
            "device": {
                "id": self.config.id,
                "class": self.config.class,
                "capacity": self.config.capacity,
                "visibility": self.config.visibility,
                "reachable_from": self.config.reachable_from,
                "headroom": self.headroom(),
            },
            "workers": workers,
        })
    }
}

/// Launches engines on threads inside the current process. Used by tests;
/// the CLI provides the process-based launcher.
pub struct ThreadLauncher {
    engines: Mutex<Vec<Arc<crate::engine::Engine>>>,
    catalog_url: String,
    metrics_interval: Duration,
}

impl ThreadLauncher {
    pub fn new(catalog_url: String, metrics_interval: Duration) -> Self {
        Self {
            engines: Mutex::new(Vec::new()),
            catalog_url,
            metrics_interval,
        }
    }
}

struct ThreadWorkerHandle {
    engine: Arc<crate::engine::Engine>,
    alive: Arc<AtomicBool>,
}

impl WorkerHandle for ThreadWorkerHandle {
    fn endpoint(&self) -> String {
        self.engine.url()
    }

    fn pid(&self) -> Option<u32> {
        None
    }

    fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Relaxed)
    }

    fn kill(&self) {
        if self.alive.swap(false, Ordering::Relaxed) {
            self.engine.shutdown();
        }
    }
}

impl WorkerLauncher for ThreadLauncher {
    fn launch(&self, params: &WorkerParams) -> Result<Box<dyn WorkerHandle>, AgentError> {
        let mut cfg = crate::engine::EngineConfig::local_test(&params.worker_id);
        cfg.device_id = params.device.id.clone();
        cfg.device_class = params.device.class.clone();
        cfg.cpu_millis = params.caps.cpu_millis;
        cfg.mem_mb = params.caps.mem_mb;
        cfg.tags = params.device.tags.clone();
        cfg.profile = params.profile.clone();
        cfg.throttle_tokens_per_sec = params.throttle;
        cfg.catalog_url = Some(self.catalog_url.clone());
        cfg.metrics_interval = self.metrics_interval;
        cfg.allow_from = reachability_gate(&params.device);
        let engine = Arc::new(
            crate::engine::Engine::start(cfg)
                .map_err(|e| AgentError::Launch(e.to_string()))?,
        );
        self.engines.lock().expect("engines lock").push(engine.clone());
        Ok(Box::new(ThreadWorkerHandle {
            engine,
            alive: Arc::new(AtomicBool::new(true)),
        }))
    }
}

/// Builds the engine-side gate from the device's declared visibility.
pub fn reachability_gate(device: &DeviceConfig) -> crate::engine::AllowFrom {
    if device.reachable_from.iter().any(|d| d == "*") {
        crate::engine::AllowFrom::Any
    } else {
        let mut set: std::collections::BTreeSet<String> =
            device.reachable_from.iter().cloned().collect();
        set.insert(device.id.clone());
        crate::engine::AllowFrom::Only(set)
    }
}
