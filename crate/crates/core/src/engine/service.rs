// SPDX-License-Identifier: Apache-2.0

//! Engine REST surface: the control API the deployer drives, plus the link
//! wire protocol endpoints. Link data endpoints pass through the
//! reachability gate; control endpoints do not (the control plane is
//! assumed reachable at testbed scale).

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use serde_json::json;

use crate::databatch::DataBatch;
use crate::flowmodel::LinkDirection;
use crate::httpd::{Handler, Request, Response};
use crate::wire::BatchEnvelope;

use super::link::{LinkHandle, LinkRole};
use super::{EngineError, EngineInner, FragmentSpec};

pub fn handler(engine: Arc<EngineInner>) -> Handler {
    Arc::new(move |req| route(&engine, req))
}

fn route(engine: &Arc<EngineInner>, req: Request) -> Response {
    let segments: Vec<String> = req.segments().iter().map(|s| s.to_string()).collect();
    let parts: Vec<&str> = segments.iter().map(String::as_str).collect();
    match (req.method.as_str(), parts.as_slice()) {
        ("GET", ["health"]) => Response::json(
            200,
            &json!({"ok": true, "service": "engine", "worker_id": engine.config.worker_id}),
        ),
        ("GET", ["status"]) => Response::json(200, &engine.status()),
        ("GET", ["metrics"]) => Response::json(200, &super::metrics::build_doc(engine)),

        ("POST", ["fragments"]) => {
            let spec: FragmentSpec = match req.json() {
                Ok(s) => s,
                Err(e) => return Response::error(400, format!("bad fragment spec: {e}")),
            };
            match engine.deploy(spec) {
                Ok(()) => Response::json(201, &json!({"ok": true})),
                Err(e) => engine_error(e),
            }
        }
        ("POST", ["fragments", flow, "start"]) => {
            reply_unit(engine.start_fragment(flow))
        }
        ("POST", ["fragments", flow, "undeploy"]) => match engine.undeploy(flow) {
            Ok(queues) => Response::json(200, &json!({"ok": true, "queues": queues})),
            Err(e) => engine_error(e),
        },
        ("POST", ["fragments", flow, "update"]) => {
            let spec: FragmentSpec = match req.json() {
                Ok(s) => s,
                Err(e) => return Response::error(400, format!("bad fragment spec: {e}")),
            };
            if spec.dataflow != *flow {
                return Response::error(400, "fragment spec dataflow mismatch");
            }
            reply_unit(engine.update_fragment(spec))
        }
        ("POST", ["fragments", flow, "links", "activate"]) => {
            match engine.activate_links(flow) {
                Ok(n) => Response::json(200, &json!({"ok": true, "activated": n})),
                Err(e) => engine_error(e),
            }
        }
        ("POST", ["fragments", flow, "processors", pid, action @ ("pause" | "resume")]) => {
            let pids = vec![pid.to_string()];
            let result = if *action == "pause" {
                engine.pause_processors(flow, &pids)
            } else {
                engine.resume_processors(flow, &pids)
            };
            reply_unit(result)
        }
        ("GET", ["fragments", flow, "queues"]) => match engine.queue_depths(flow) {
            Ok(queues) => Response::json(200, &json!({"queues": queues})),
            Err(e) => engine_error(e),
        },
        ("POST", ["fragments", flow, "queues", from, to, "drain"]) => {
            match engine.queue_drain(flow, from, to) {
                Ok(batches) => {
                    let envelopes: Vec<BatchEnvelope> =
                        batches.iter().map(BatchEnvelope::from).collect();
                    Response::json(200, &json!({ "batches": envelopes }))
                }
                Err(e) => engine_error(e),
            }
        }
        ("POST", ["fragments", flow, "queues", from, to, "inject"]) => {
            let at_front = req.query_param("front") == Some("true");
            let envelopes: Vec<BatchEnvelope> = match req
                .json::<serde_json::Value>()
                .ok()
                .and_then(|v| serde_json::from_value(v.get("batches")?.clone()).ok())
            {
                Some(b) => b,
                None => return Response::error(400, "body must be {\"batches\": [...]}"),
            };
            let mut batches = Vec::with_capacity(envelopes.len());
            for env in envelopes {
                match env.into_batch() {
                    Ok(b) => batches.push(b),
                    Err(e) => return Response::error(400, format!("bad batch content: {e}")),
                }
            }
            match engine.queue_inject(flow, from, to, batches, at_front) {
                Ok(n) => Response::json(200, &json!({"ok": true, "injected": n})),
                Err(e) => engine_error(e),
            }
        }

        // --- link wire protocol (reachability-gated) ---
        ("POST", ["links", link_id, "batches"]) => {
            if !engine.config.allow_from.permits(req.from_device.as_deref()) {
                return Response::error(403, "connection not permitted from your device");
            }
            let Some(link) = engine.link(link_id) else {
                return Response::error(404, format!("no link {link_id}"));
            };
            receive_push(&link, &req)
        }
        ("GET", ["links", link_id, "batches"]) => {
            if !engine.config.allow_from.permits(req.from_device.as_deref()) {
                return Response::error(403, "connection not permitted from your device");
            }
            let Some(link) = engine.link(link_id) else {
                return Response::error(404, format!("no link {link_id}"));
            };
            serve_pull(&link, &req)
        }
        ("POST", ["links", link_id, "ack"]) => {
            if !engine.config.allow_from.permits(req.from_device.as_deref()) {
                return Response::error(403, "connection not permitted from your device");
            }
            let Some(link) = engine.link(link_id) else {
                return Response::error(404, format!("no link {link_id}"));
            };
            let ids: HashSet<String> = req
                .json::<serde_json::Value>()
                .ok()
                .and_then(|v| serde_json::from_value(v.get("batch_ids")?.clone()).ok())
                .unwrap_or_default();
            let removed = link.queue.remove_ids(&ids);
            Response::json(200, &json!({"removed": removed}))
        }
        _ => Response::not_found(),
    }
}

/// Push receipt: dedup by batch id, then a blocking enqueue (that block is
/// the backpressure propagating across the link). The per-link gate makes a
/// retried delivery wait for the original instead of double-enqueueing.
fn receive_push(link: &Arc<LinkHandle>, req: &Request) -> Response {
    if !(link.role == LinkRole::Inbound && link.spec.direction == LinkDirection::Push) {
        return Response::error(400, "link is not a push-inbound endpoint here");
    }
    if !link.is_active() {
        // Held during migration: ask the peer to retry after activation.
        return Response::error(503, "link held");
    }
    let envelope: BatchEnvelope = match req.json() {
        Ok(e) => e,
        Err(e) => return Response::error(400, format!("bad envelope: {e}")),
    };
    let _gate = link.inbound_gate.lock().expect("inbound gate");
    if link.dedup.lock().expect("dedup lock").contains(&envelope.batch_id) {
        return Response::json(200, &json!({"accepted": true, "duplicate": true}));
    }
    let batch: DataBatch = match envelope.into_batch() {
        Ok(b) => b,
        Err(e) => return Response::error(400, format!("bad content: {e}")),
    };
    let id = batch.id().to_string();
    if link.queue.push_blocking(batch, link.stop_flag()).is_err() {
        return Response::error(503, "link stopping");
    }
    link.dedup.lock().expect("dedup lock").insert(&id);
    link.record_delivery();
    Response::json(200, &json!({"accepted": true}))
}

/// Pull serve: long-poll read without removal; ack removes.
fn serve_pull(link: &Arc<LinkHandle>, req: &Request) -> Response {
    if !(link.role == LinkRole::Outbound && link.spec.direction == LinkDirection::Pull) {
        return Response::error(400, "link is not a pull-serving endpoint here");
    }
    if !link.is_active() {
        return Response::json(200, &json!({"batches": []}));
    }
    let max: usize = req.query_param("max").and_then(|v| v.parse().ok()).unwrap_or(32);
    let wait = Duration::from_millis(
        req.query_param("wait_ms").and_then(|v| v.parse().ok()).unwrap_or(1000),
    );
    let batches = link.queue.peek_upto_wait(max.max(1), wait);
    let envelopes: Vec<BatchEnvelope> = batches.iter().map(BatchEnvelope::from).collect();
    Response::json(200, &json!({ "batches": envelopes }))
}

fn reply_unit(result: Result<(), EngineError>) -> Response {
    match result {
        Ok(()) => Response::json(200, &json!({"ok": true})),
        Err(e) => engine_error(e),
    }
}

fn engine_error(e: EngineError) -> Response {
    let status = match &e {
        EngineError::FragmentNotFound(_)
        | EngineError::ProcessorNotFound(_)
        | EngineError::QueueNotFound { .. } => 404,
        EngineError::DuplicateFragment(_) | EngineError::DuplicateLink(_) => 409,
        EngineError::IllegalState { .. } => 409,
        EngineError::Invalid(_) | EngineError::Build { .. } => 400,
    };
    Response::error(status, e.to_string())
}
