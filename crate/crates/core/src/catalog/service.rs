// SPDX-License-Identifier: Apache-2.0

//! REST surface of the resource directory.
//!
//! Routes:
//! - `POST /cat` — register; body `{"href":..., "item-metadata":[...]}`;
//!   `201` new, `200` replaced. `?if_absent=true` turns it into a
//!   lease-aware conditional write (`409` when held).
//! - `GET /cat` — full catalog.
//! - `GET /cat/items?href=<exact>` — single item or `404`.
//! - `GET /cat/items?prefix=<p>` — prefix query.
//! - `DELETE /cat/items?href=<exact>` — `204` or `404`.
//! - `GET /cat/watch?prefix=<p>&since=<iso8601>[&wait_ms=N]` — long-poll
//!   change feed.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde_json::json;

use crate::httpd::{Handler, HttpServer, Request, Response};

use super::{CatalogItem, CatalogStore};

#[derive(Debug, Clone)]
pub struct CatalogConfig {
    pub listen: String,
    /// Snapshot file; `None` disables persistence.
    pub snapshot_path: Option<std::path::PathBuf>,
    pub snapshot_interval: Duration,
    /// Expected device/worker heartbeat period; items older than three of
    /// these get flagged stale.
    pub heartbeat_interval: Duration,
    pub watch_timeout: Duration,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            snapshot_path: None,
            snapshot_interval: Duration::from_secs(10),
            heartbeat_interval: Duration::from_secs(5),
            watch_timeout: Duration::from_secs(30),
        }
    }
}

pub struct CatalogService {
    store: Arc<CatalogStore>,
    server: HttpServer,
    stopping: Arc<AtomicBool>,
    background: Vec<std::thread::JoinHandle<()>>,
    snapshot_path: Option<std::path::PathBuf>,
}

impl CatalogService {
    pub fn start(config: CatalogConfig) -> std::io::Result<Self> {
        let store = Arc::new(CatalogStore::new());
        if let Some(path) = &config.snapshot_path {
            if path.exists() {
                match store.load_snapshot(path) {
                    Ok(n) => log::info!("catalog: restored {n} items from {}", path.display()),
                    Err(e) => log::warn!("catalog: snapshot load failed: {e}"),
                }
            }
        }

        let handler: Handler = {
            let store = store.clone();
            let watch_timeout = config.watch_timeout;
            Arc::new(move |req| route(&store, watch_timeout, req))
        };
        let server = HttpServer::start(&config.listen, 16, handler)?;

        let stopping = Arc::new(AtomicBool::new(false));
        let mut background = Vec::new();

        // Staleness sweeper.
        {
            let store = store.clone();
            let stopping = stopping.clone();
            let hb = config.heartbeat_interval;
            background.push(std::thread::spawn(move || {
                while !stopping.load(Ordering::Relaxed) {
                    std::thread::sleep(hb.min(Duration::from_millis(500)));
                    if stopping.load(Ordering::Relaxed) {
                        break;
                    }
                    for href in store.sweep_stale(hb * 3) {
                        log::info!("catalog: flagged {href} stale");
                    }
                }
            }));
        }

        // Snapshot writer.
        if let Some(path) = config.snapshot_path.clone() {
            let store = store.clone();
            let stopping = stopping.clone();
            let interval = config.snapshot_interval;
            background.push(std::thread::spawn(move || {
                while !stopping.load(Ordering::Relaxed) {
                    std::thread::sleep(interval.min(Duration::from_millis(500)));
                    if stopping.load(Ordering::Relaxed) {
                        break;
                    }
                    if let Err(e) = store.save_snapshot(&path) {
                        log::warn!("catalog: snapshot save failed: {e}");
                    }
                }
            }));
        }

        Ok(Self {
            store,
            server,
            stopping,
            background,
            snapshot_path: config.snapshot_path,
        })
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn store(&self) -> Arc<CatalogStore> {
        self.store.clone()
    }

    pub fn shutdown(&mut self) {
        self.stopping.store(true, Ordering::Relaxed);
        for h in self.background.drain(..) {
            let _ = h.join();
        }
        if let Some(path) = &self.snapshot_path {
            let _ = self.store.save_snapshot(path);
        }
        self.server.shutdown();
    }
}

impl Drop for CatalogService {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn route(store: &CatalogStore, watch_timeout: Duration, req: Request) -> Response {
    match (req.method.as_str(), req.path.as_str()) {
        ("GET", "/health") => Response::json(200, &json!({"ok": true, "service": "catalog"})),
        ("POST", "/cat") => {
            let item: CatalogItem = match req.json() {
                Ok(i) => i,
                Err(e) => return Response::error(400, format!("parse error: {e}")),
            };
            if req.query_param("if_absent") == Some("true") {
                return match store.register_if_absent(item) {
                    Ok(true) => Response::json(201, &json!({"acquired": true})),
                    Ok(false) => Response::error(409, "href already present"),
                    Err(e) => Response::error(400, e.to_string()),
                };
            }
            match store.register(item) {
                Ok(replaced) => Response::empty(if replaced { 200 } else { 201 }),
                Err(e) => Response::error(400, e.to_string()),
            }
        }
        ("GET", "/cat") => {
            let items = store.query_prefix("");
            Response::json(
                200,
                &json!({
                    "catalogue-metadata": [
                        {"rel": "urn:X-hypercat:rels:isContentType",
                         "val": "application/vnd.hypercat.catalogue+json"}
                    ],
                    "items": items,
                }),
            )
        }
        ("GET", "/cat/items") => {
            if let Some(href) = req.query_param("href") {
                return match store.get(href) {
                    Some(item) => Response::json(200, &item),
                    None => Response::not_found(),
                };
            }
            let prefix = req.query_param("prefix").unwrap_or("");
            Response::json(200, &json!({"items": store.query_prefix(prefix)}))
        }
        ("DELETE", "/cat/items") => match req.query_param("href") {
            Some(href) => {
                if store.delete(href) {
                    Response::empty(204)
                } else {
                    Response::not_found()
                }
            }
            None => Response::error(400, "href query parameter required"),
        },
        ("GET", "/cat/watch") => {
            let prefix = req.query_param("prefix").unwrap_or("").to_string();
            let since = match req.query_param("since") {
                Some(s) => match DateTime::parse_from_rfc3339(s) {
                    Ok(dt) => dt.with_timezone(&Utc),
                    Err(e) => return Response::error(400, format!("bad since: {e}")),
                },
                None => Utc::now(),
            };
            let wait = req
                .query_param("wait_ms")
                .and_then(|v| v.parse().ok())
                .map(Duration::from_millis)
                .unwrap_or(watch_timeout);
            let items = store.watch(&prefix, since, wait);
            Response::json(200, &json!({"items": items}))
        }
        _ => Response::not_found(),
    }
}
