// SPDX-License-Identifier: Apache-2.0

//! Agent REST surface.
//!
//! - `POST /workers {"caps": {...}, "profile": "..."}` -> worker id + endpoint
//! - `DELETE /workers/{id}`
//! - `GET /status` -> device + workers
//! - `POST /shutdown` -> terminate workers and exit serving

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::flowmodel::ResourceDemand;
use crate::httpd::{Handler, HttpServer, Request, Response};

use super::{Agent, AgentError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpawnRequest {
    pub caps: ResourceDemand,
    #[serde(default = "default_profile")]
    pub profile: String,
}

fn default_profile() -> String {
    "unthrottled".into()
}

pub struct AgentService {
    agent: Arc<Agent>,
    server: HttpServer,
    shutdown_requested: Arc<AtomicBool>,
}

impl AgentService {
    pub fn start(agent: Arc<Agent>) -> std::io::Result<Self> {
        let shutdown_requested = Arc::new(AtomicBool::new(false));
        let handler: Handler = {
            let agent = agent.clone();
            let flag = shutdown_requested.clone();
            Arc::new(move |req| route(&agent, &flag, req))
        };
        let server = HttpServer::start(&agent.config.listen, 8, handler)?;
        agent.set_endpoint(server.url());
        Ok(Self {
            agent,
            server,
            shutdown_requested,
        })
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn agent(&self) -> Arc<Agent> {
        self.agent.clone()
    }

    /// True once someone POSTed /shutdown.
    pub fn shutdown_requested(&self) -> bool {
        self.shutdown_requested.load(Ordering::Relaxed)
    }

    pub fn shutdown(mut self) {
        self.agent.shutdown();
        self.server.shutdown();
    }
}

fn route(agent: &Arc<Agent>, shutdown_flag: &Arc<AtomicBool>, req: Request) -> Response {
    let segments: Vec<String> = req.segments().iter().map(|s| s.to_string()).collect();
    let parts: Vec<&str> = segments.iter().map(String::as_str).collect();
    match (req.method.as_str(), parts.as_slice()) {
        ("GET", ["health"]) => Response::json(
            200,
            &json!({"ok": true, "service": "agent", "device_id": agent.config.id}),
        ),
        ("GET", ["status"]) => Response::json(200, &agent.status_doc()),
        ("POST", ["workers"]) => {
            let spawn: SpawnRequest = match req.json() {
                Ok(s) => s,
                Err(e) => return Response::error(400, format!("bad spawn request: {e}")),
            };
            match agent.spawn_worker(spawn.caps, &spawn.profile) {
                Ok(sandbox) => Response::json(
                    201,
                    &json!({
                        "worker_id": sandbox.worker_id,
                        "endpoint": sandbox.handle.endpoint(),
                    }),
                ),
                Err(e) => agent_error(e),
            }
        }
        ("DELETE", ["workers", id]) => match agent.terminate_worker(id) {
            Ok(()) => Response::empty(204),
            Err(e) => agent_error(e),
        },
        ("POST", ["shutdown"]) => {
            shutdown_flag.store(true, Ordering::Relaxed);
            Response::json(200, &json!({"ok": true}))
        }
        _ => Response::not_found(),
    }
}

fn agent_error(e: AgentError) -> Response {
    let status = match &e {
        AgentError::WorkerNotFound(_) => 404,
        AgentError::InsufficientCapacity { .. } => 409,
        AgentError::DuplicateDevice(_) => 409,
        _ => 500,
    };
    Response::error(status, e.to_string())
}
