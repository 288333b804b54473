// SPDX-License-Identifier: Apache-2.0

//! Periodic metrics reporting to the catalog.
//!
//! Every interval the engine heartbeats its worker item and posts a metrics
//! document per worker and per hosted dataflow. When the catalog is
//! unreachable the samples are buffered (up to 100, oldest dropped) and
//! flushed in order once it returns; execution never stops.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::json;

use crate::catalog::{
    CatalogClient, CatalogItem, REL_CLASS, REL_CPU_MILLIS, REL_ENDPOINT, REL_JSON, REL_MEM_MB,
    REL_PARENT_DEVICE, REL_PROFILE, REL_STARTED, REL_STATE, REL_TAGS, REL_THROTTLE, REL_VALUE,
};
use crate::databatch::now_iso;

use super::EngineInner;

const BUFFER_CAP: usize = 100;

pub struct Reporter {
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl Reporter {
    pub fn start(engine: Arc<EngineInner>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let handle = std::thread::Builder::new()
            .name("metrics-reporter".into())
            .spawn(move || run(engine, stop2))
            .expect("spawn metrics reporter");
        Self {
            stop,
            handle: Some(handle),
        }
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn run(engine: Arc<EngineInner>, stop: Arc<AtomicBool>) {
    let catalog_url = engine
        .config
        .catalog_url
        .clone()
        .expect("reporter requires a catalog url");
    let client = CatalogClient::new(catalog_url);
    let started_at = now_iso();
    let interval = engine.config.metrics_interval;
    let mut buffer: VecDeque<Vec<CatalogItem>> = VecDeque::new();
    let mut last: Option<(Instant, Snapshot)> = None;

    loop {
        let now = Instant::now();
        let snapshot = take_snapshot(&engine);
        let rates = last
            .as_ref()
            .map(|(t, prev)| compute_rates(prev, &snapshot, now.duration_since(*t)))
            .unwrap_or_default();
        let items = build_items(&engine, &snapshot, &rates, &started_at);
        last = Some((now, snapshot));

        buffer.push_back(items);
        while buffer.len() > BUFFER_CAP {
            buffer.pop_front();
        }
        // Flush everything buffered, oldest first; stop at the first failure.
        while let Some(sample) = buffer.front() {
            let mut ok = true;
            for item in sample {
                if client.register(item).is_err() {
                    ok = false;
                    break;
                }
            }
            if ok {
                buffer.pop_front();
            } else {
                break;
            }
        }
        sleep_interruptible(interval, &stop);
        if stop.load(Ordering::Relaxed) {
            break;
        }
    }
}

fn sleep_interruptible(total: Duration, stop: &AtomicBool) {
    let step = Duration::from_millis(50);
    let mut left = total;
    while left > Duration::ZERO && !stop.load(Ordering::Relaxed) {
        let d = left.min(step);
        std::thread::sleep(d);
        left = left.saturating_sub(d);
    }
}

#[derive(Default)]
struct Snapshot {
    consumed_tokens: f64,
    /// flow -> pid -> counters
    processors: BTreeMap<String, BTreeMap<String, super::CounterSnapshot>>,
    doc: serde_json::Value,
}

#[derive(Default)]
struct Rates {
    cpu_pct: f64,
    /// flow -> pid -> (batches_in/s, tuples_in/s, batches_out/s, tuples_out/s)
    processors: BTreeMap<String, BTreeMap<String, (f64, f64, f64, f64)>>,
}

fn take_snapshot(engine: &Arc<EngineInner>) -> Snapshot {
    let mut processors = BTreeMap::new();
    for fragment in engine.fragments_snapshot() {
        let mut per_proc = BTreeMap::new();
        for (pid, handle) in fragment.processors_snapshot() {
            per_proc.insert(pid, handle.counters.snapshot());
        }
        processors.insert(fragment.flow_id.clone(), per_proc);
    }
    Snapshot {
        consumed_tokens: engine.throttle().consumed(),
        processors,
        doc: build_doc(engine),
    }
}

fn compute_rates(prev: &Snapshot, cur: &Snapshot, elapsed: Duration) -> Rates {
    let secs = elapsed.as_secs_f64().max(0.001);
    let reference = cur_reference_capacity(cur);
    let cpu_pct =
        ((cur.consumed_tokens - prev.consumed_tokens) / secs / reference * 100.0).clamp(0.0, 100.0);
    let mut processors = BTreeMap::new();
    for (flow, pids) in &cur.processors {
        let mut out = BTreeMap::new();
        for (pid, counters) in pids {
            let zero = super::CounterSnapshot::default();
            let prev_c = prev
                .processors
                .get(flow)
                .and_then(|m| m.get(pid))
                .unwrap_or(&zero);
            out.insert(
                pid.clone(),
                (
                    (counters.in_batches - prev_c.in_batches) as f64 / secs,
                    (counters.in_tuples - prev_c.in_tuples) as f64 / secs,
                    (counters.out_batches - prev_c.out_batches) as f64 / secs,
                    (counters.out_tuples - prev_c.out_tuples) as f64 / secs,
                ),
            );
        }
        processors.insert(flow.clone(), out);
    }
    Rates {
        cpu_pct,
        processors,
    }
}

fn cur_reference_capacity(cur: &Snapshot) -> f64 {
    cur.doc
        .get("cpu_reference_tokens_per_sec")
        .and_then(|v| v.as_f64())
        .unwrap_or(1000.0)
        .max(1.0)
}

/// The instantaneous metrics document (totals and gauges) for this engine.
pub fn build_doc(engine: &Arc<EngineInner>) -> serde_json::Value {
    let cfg = &engine.config;
    let mut fragments = serde_json::Map::new();
    let mut queued_bytes = 0usize;
    for fragment in engine.fragments_snapshot() {
        let mut processors = serde_json::Map::new();
        let started = fragment.is_running();
        for (pid, handle) in fragment.processors_snapshot() {
            let c = handle.counters.snapshot();
            processors.insert(
                pid.clone(),
                json!({
                    "state": handle.state_str(started, false),
                    "in_batches": c.in_batches,
                    "in_tuples": c.in_tuples,
                    "out_batches": c.out_batches,
                    "out_tuples": c.out_tuples,
                    "errors": c.errors,
                    "eos": handle.eos_done.load(Ordering::Relaxed),
                }),
            );
        }
        let queues: Vec<serde_json::Value> = fragment
            .queues_snapshot()
            .iter()
            .map(|((from, to), q)| {
                queued_bytes += q.content_bytes();
                json!({"from": from, "to": to, "depth": q.len()})
            })
            .collect();
        let links: Vec<serde_json::Value> = fragment
            .links_snapshot()
            .values()
            .map(|l| {
                json!({
                    "link_id": l.spec.link_id,
                    "direction": l.spec.direction,
                    "active": l.is_active(),
                    "degraded": l.is_degraded(),
                    "delivered": l.delivered(),
                })
            })
            .collect();
        fragments.insert(
            fragment.flow_id.clone(),
            json!({
                "resource": fragment.resource,
                "state": fragment.state_name(),
                "processors": processors,
                "queues": queues,
                "links": links,
            }),
        );
    }
    let reference = cfg
        .throttle_tokens_per_sec
        .unwrap_or(cfg.cpu_millis.max(1) as f64);
    let mem_pct = (queued_bytes as f64 / (cfg.mem_mb.max(1) as f64 * 1024.0 * 1024.0) * 100.0)
        .clamp(0.0, 100.0);
    json!({
        "worker_id": cfg.worker_id,
        "device_id": cfg.device_id,
        "ts": now_iso(),
        "consumed_tokens": engine.throttle().consumed(),
        "cpu_reference_tokens_per_sec": reference,
        "mem_pct": mem_pct,
        "queued_bytes": queued_bytes,
        "fragments": fragments,
    })
}

fn build_items(
    engine: &Arc<EngineInner>,
    snapshot: &Snapshot,
    rates: &Rates,
    started_at: &str,
) -> Vec<CatalogItem> {
    let cfg = &engine.config;
    let worker_href = format!("/worker/{}", cfg.worker_id);
    let mut items = Vec::new();

    // Heartbeat: the full worker item, refreshed so the staleness sweeper
    // sees a live worker.
    let mut worker = CatalogItem::new(&worker_href)
        .with(REL_PARENT_DEVICE, &cfg.device_id)
        .with(REL_CLASS, &cfg.device_class)
        .with(REL_CPU_MILLIS, cfg.cpu_millis.to_string())
        .with(REL_MEM_MB, cfg.mem_mb.to_string())
        .with(REL_ENDPOINT, engine.endpoint())
        .with(REL_PROFILE, &cfg.profile)
        .with(REL_STATE, "up")
        .with(REL_STARTED, started_at)
        .with(REL_TAGS, serde_json::to_string(&cfg.tags).expect("tags are json"));
    if let Some(rate) = cfg.throttle_tokens_per_sec {
        worker.set_rel(REL_THROTTLE, rate.to_string());
    }
    items.push(worker);

    // Full metrics doc with rates folded in.
    let mut doc = snapshot.doc.clone();
    doc["cpu_pct"] = json!(rates.cpu_pct);
    if let Some(fragments) = doc.get_mut("fragments").and_then(|f| f.as_object_mut()) {
        for (flow, frag_doc) in fragments.iter_mut() {
            if let Some(procs) = frag_doc.get_mut("processors").and_then(|p| p.as_object_mut()) {
                for (pid, pdoc) in procs.iter_mut() {
                    if let Some((bi, ti, bo, to)) =
                        rates.processors.get(flow).and_then(|m| m.get(pid))
                    {
                        pdoc["in_batches_per_sec"] = json!(bi);
                        pdoc["in_tuples_per_sec"] = json!(ti);
                        pdoc["out_batches_per_sec"] = json!(bo);
                        pdoc["out_tuples_per_sec"] = json!(to);
                    }
                }
            }
        }
    }
    items.push(
        CatalogItem::new(format!("{worker_href}/metrics"))
            .with(REL_JSON, doc.to_string()),
    );
    items.push(
        CatalogItem::new(format!("{worker_href}/CPUUtil"))
            .with(REL_VALUE, format!("{:.2}", rates.cpu_pct)),
    );
    let mem_pct = doc.get("mem_pct").and_then(|v| v.as_f64()).unwrap_or(0.0);
    items.push(
        CatalogItem::new(format!("{worker_href}/MemUtil")).with(REL_VALUE, format!("{mem_pct:.2}")),
    );

    // Per-dataflow fragment metrics under the dataflow subtree.
    if let Some(fragments) = doc.get("fragments").and_then(|f| f.as_object()) {
        for (flow, frag_doc) in fragments {
            items.push(
                CatalogItem::new(format!("/dataflow/{flow}/metrics/{}", cfg.worker_id))
                    .with(REL_JSON, frag_doc.to_string()),
            );
        }
    }
    items
}
