// SPDX-License-Identifier: Apache-2.0

//! Master REST surface.
//!
//! - `POST /dataflows` (dataflow JSON) -> `{"uuid": ...}`
//! - `GET /dataflows/{uuid}` -> record + live metrics summary
//! - `DELETE /dataflows/{uuid}` -> stop
//! - `POST /dataflows/{uuid}/rebalance` -> `{"mapping": ...}`
//!
//! One App Manager execution per request; per-uuid mutual exclusion lives
//! in the catalog, so concurrent lifecycle calls on one dataflow resolve to
//! one winner and one 409.

use std::sync::Arc;

use serde_json::json;

use crate::catalog::{CatalogClient, CatalogItem, REL_ENDPOINT, REL_JSON, REL_STATE};
use crate::httpd::{Handler, HttpServer, Request, Response};

use super::{DataflowRecord, Deployer, FirstFitScheduler, MasterError, SchedulerPlugin};

#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub listen: String,
    pub catalog_url: String,
}

pub struct MasterService {
    server: HttpServer,
}

struct MasterState {
    catalog: CatalogClient,
    scheduler: Box<dyn SchedulerPlugin>,
}

impl MasterService {
    pub fn start(config: MasterConfig) -> std::io::Result<Self> {
        Self::start_with_scheduler(config, Box::new(FirstFitScheduler))
    }

    pub fn start_with_scheduler(
        config: MasterConfig,
        scheduler: Box<dyn SchedulerPlugin>,
    ) -> std::io::Result<Self> {
        let state = Arc::new(MasterState {
            catalog: CatalogClient::new(config.catalog_url.clone()),
            scheduler,
        });
        let handler: Handler = {
            let state = state.clone();
            Arc::new(move |req| route(&state, req))
        };
        let server = HttpServer::start(&config.listen, 16, handler)?;

        // Bootstrap registration so other services can find the master.
        let self_item = CatalogItem::new("/service/master")
            .with(REL_ENDPOINT, server.url())
            .with(REL_STATE, "up");
        if let Err(e) = state.catalog.register(&self_item) {
            log::warn!("master: could not register in catalog yet: {e}");
        }
        Ok(Self { server })
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn shutdown(mut self) {
        self.server.shutdown();
    }
}

fn route(state: &Arc<MasterState>, req: Request) -> Response {
    let segments: Vec<String> = req.segments().iter().map(|s| s.to_string()).collect();
    let parts: Vec<&str> = segments.iter().map(String::as_str).collect();
    match (req.method.as_str(), parts.as_slice()) {
        ("GET", ["health"]) => Response::json(200, &json!({"ok": true, "service": "master"})),
        ("POST", ["dataflows"]) => {
            let deployer = Deployer::new(state.catalog.clone());
            match deployer.start_dataflow(&req.body, state.scheduler.as_ref()) {
                Ok(uuid) => Response::json(201, &json!({ "uuid": uuid })),
                Err(e) => master_error(e),
            }
        }
        ("GET", ["dataflows", uuid]) => match DataflowRecord::load(&state.catalog, uuid) {
            Ok(record) => {
                let metrics = flow_metrics(&state.catalog, uuid);
                Response::json(200, &json!({"record": record, "metrics": metrics}))
            }
            Err(e) => master_error(e),
        },
        ("DELETE", ["dataflows", uuid]) => {
            let deployer = Deployer::new(state.catalog.clone());
            match deployer.stop_dataflow(uuid) {
                Ok(warnings) => Response::json(200, &json!({"ok": true, "warnings": warnings})),
                Err(e) => master_error(e),
            }
        }
        ("POST", ["dataflows", uuid, "rebalance"]) => {
            let deployer = Deployer::new(state.catalog.clone());
            match deployer.rebalance_dataflow(uuid, state.scheduler.as_ref()) {
                Ok((mapping, movedany)) => Response::json(
                    200,
                    &json!({"mapping": mapping.assignments, "moved": movedany}),
                ),
                Err(e) => master_error(e),
            }
        }
        _ => Response::not_found(),
    }
}

/// Per-worker fragment metrics docs for one dataflow, as stored by engines.
fn flow_metrics(catalog: &CatalogClient, uuid: &str) -> serde_json::Value {
    let prefix = format!("/dataflow/{uuid}/metrics/");
    let mut out = serde_json::Map::new();
    if let Ok(items) = catalog.query_prefix(&prefix) {
        for item in items {
            let worker = item.href.trim_start_matches(&prefix).to_string();
            if let Some(doc) = item.rel(REL_JSON).and_then(|j| serde_json::from_str(j).ok()) {
                out.insert(worker, doc);
            }
        }
    }
    serde_json::Value::Object(out)
}

fn master_error(e: MasterError) -> Response {
    Response::error(e.http_status(), e.to_string())
}
