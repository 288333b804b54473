// SPDX-License-Identifier: Apache-2.0

//! A stand-alone process speaking the link wire protocol: accepts batches on
//! ingress links, applies a simple transform, and serves the results on
//! egress links. Plays the role of an external Big Data engine behind a
//! bridge processor, and doubles as the far end in link tests.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::databatch::{batch_to_stream, DataBatch};
use crate::httpd::{Handler, HttpServer, Request, Response};
use crate::wire::{BatchEnvelope, DedupWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubTransform {
    /// Echo batches unchanged.
    Identity,
    /// Double every tuple value; opaque batches pass through.
    DoubleValues,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubRoute {
    pub ingress: String,
    pub egress: String,
    pub transform: StubTransform,
}

struct RouteState {
    route: StubRoute,
    dedup: Mutex<DedupWindow>,
    egress: Mutex<VecDeque<DataBatch>>,
    arrived: Condvar,
}

pub struct StubEngine {
    server: HttpServer,
}

impl StubEngine {
    pub fn start(listen: &str, routes: Vec<StubRoute>) -> std::io::Result<Self> {
        let mut by_ingress = BTreeMap::new();
        let mut by_egress = BTreeMap::new();
        for route in routes {
            let state = Arc::new(RouteState {
                route: route.clone(),
                dedup: Mutex::new(DedupWindow::default()),
                egress: Mutex::new(VecDeque::new()),
                arrived: Condvar::new(),
            });
            by_ingress.insert(route.ingress.clone(), state.clone());
            by_egress.insert(route.egress.clone(), state);
        }
        let by_ingress = Arc::new(by_ingress);
        let by_egress = Arc::new(by_egress);
        let handler: Handler = Arc::new(move |req| route_request(&by_ingress, &by_egress, req));
        let server = HttpServer::start(listen, 8, handler)?;
        Ok(Self { server })
    }

    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.server.addr()
    }
}

type Routes = Arc<BTreeMap<String, Arc<RouteState>>>;

fn route_request(by_ingress: &Routes, by_egress: &Routes, req: Request) -> Response {
    let segments = req.segments();
    match (req.method.as_str(), segments.as_slice()) {
        ("GET", ["health"]) => Response::json(200, &json!({"ok": true, "service": "stub-engine"})),
        ("POST", ["links", link, "batches"]) => {
            let Some(state) = by_ingress.get(*link) else {
                return Response::error(404, format!("no ingress link {link}"));
            };
            let envelope: BatchEnvelope = match req.json() {
                Ok(e) => e,
                Err(e) => return Response::error(400, format!("bad envelope: {e}")),
            };
            let fresh = state.dedup.lock().expect("dedup lock").insert(&envelope.batch_id);
            if !fresh {
                return Response::json(200, &json!({"accepted": true, "duplicate": true}));
            }
            let batch = match envelope.into_batch() {
                Ok(b) => b,
                Err(e) => return Response::error(400, format!("bad content: {e}")),
            };
            let out = apply_transform(state.route.transform, batch);
            state.egress.lock().expect("egress lock").push_back(out);
            state.arrived.notify_all();
            Response::json(200, &json!({"accepted": true}))
        }
        ("GET", ["links", link, "batches"]) => {
            let Some(state) = by_egress.get(*link) else {
                return Response::error(404, format!("no egress link {link}"));
            };
            let max: usize = req
                .query_param("max")
                .and_then(|v| v.parse().ok())
                .unwrap_or(32);
            let wait = Duration::from_millis(
                req.query_param("wait_ms")
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(1000),
            );
            let deadline = Instant::now() + wait;
            let mut queue = state.egress.lock().expect("egress lock");
            while queue.is_empty() && Instant::now() < deadline {
                let (guard, _) = state
                    .arrived
                    .wait_timeout(queue, deadline.saturating_duration_since(Instant::now()))
                    .expect("egress lock");
                queue = guard;
            }
            // Serve without removing; ack removes.
            let batches: Vec<BatchEnvelope> =
                queue.iter().take(max).map(BatchEnvelope::from).collect();
            Response::json(200, &json!({ "batches": batches }))
        }
        ("POST", ["links", link, "ack"]) => {
            let Some(state) = by_egress.get(*link) else {
                return Response::error(404, format!("no egress link {link}"));
            };
            let ids: HashSet<String> = req
                .json::<serde_json::Value>()
                .ok()
                .and_then(|v| serde_json::from_value(v.get("batch_ids")?.clone()).ok())
                .unwrap_or_default();
            let mut queue = state.egress.lock().expect("egress lock");
            let before = queue.len();
            queue.retain(|b| !ids.contains(b.id()));
            Response::json(200, &json!({"removed": before - queue.len()}))
        }
        _ => Response::not_found(),
    }
}

fn apply_transform(transform: StubTransform, batch: DataBatch) -> DataBatch {
    match transform {
        StubTransform::Identity => batch,
        StubTransform::DoubleValues => {
            if batch.is_eos() || batch.count().unwrap_or(0) == 0 {
                return batch;
            }
            match batch_to_stream(&batch) {
                Ok(tuples) => {
                    let doubled: Vec<_> = tuples
                        .into_iter()
                        .map(|mut t| {
                            t.value *= 2.0;
                            t
                        })
                        .collect();
                    let mut out = DataBatch::from_tuples(&doubled);
                    // Keep the original identity so per-id dedup still sees
                    // one result per input.
                    out.attributes = batch.attributes;
                    out
                }
                Err(_) => batch,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databatch::EventTuple;
    use crate::httpc::HttpClient;
    use crate::wire;
    use std::sync::atomic::AtomicBool;

    fn engine() -> StubEngine {
        StubEngine::start(
            "127.0.0.1:0",
            vec![
                StubRoute {
                    ingress: "in".into(),
                    egress: "out".into(),
                    transform: StubTransform::Identity,
                },
                StubRoute {
                    ingress: "din".into(),
                    egress: "dout".into(),
                    transform: StubTransform::DoubleValues,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn push_transform_pull_ack_cycle() {
        let stub = engine();
        let http = HttpClient::new(Duration::from_secs(5));
        let stop = AtomicBool::new(false);

        let b = DataBatch::from_tuples(&[EventTuple::new("x", 3.0, "u", 1)]);
        let report =
            wire::push_batch_blocking(&http, &stub.url(), "din", &b, &stop).unwrap();
        assert_eq!(report.outcome, wire::PushOutcome::Delivered);

        // Duplicate push of the same id is flagged and not re-enqueued.
        let report2 =
            wire::push_batch_blocking(&http, &stub.url(), "din", &b, &stop).unwrap();
        assert_eq!(report2.outcome, wire::PushOutcome::Duplicate);

        let got = wire::pull_batches(&http, &stub.url(), "dout", 10, Duration::from_secs(2))
            .unwrap();
        assert_eq!(got.len(), 1);
        let out = got[0].clone().into_batch().unwrap();
        let tuples = batch_to_stream(&out).unwrap();
        assert_eq!(tuples[0].value, 6.0);

        // Un-acked reads re-serve the same batch.
        let again = wire::pull_batches(&http, &stub.url(), "dout", 10, Duration::from_millis(100))
            .unwrap();
        assert_eq!(again.len(), 1);

        wire::ack_batches(&http, &stub.url(), "dout", &[out.id().to_string()]).unwrap();
        let empty = wire::pull_batches(&http, &stub.url(), "dout", 10, Duration::from_millis(100))
            .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn unknown_link_is_rejected_not_retried() {
        let stub = engine();
        let http = HttpClient::new(Duration::from_secs(2));
        let stop = AtomicBool::new(false);
        let b = DataBatch::opaque(vec![1]);
        match wire::push_batch_blocking(&http, &stub.url(), "nosuch", &b, &stop) {
            Err(wire::PushError::Rejected { status: 404, .. }) => {}
            other => panic!("expected 404 rejection, got {other:?}"),
        }
    }
}
