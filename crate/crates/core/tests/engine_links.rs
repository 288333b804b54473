// SPDX-License-Identifier: Apache-2.0

//! Cross-engine transport: push and pull links, receiver dedup, the
//! reachability gate, backpressure across a link, and live fragment
//! reconfiguration with queued-batch transfer.

mod common;

use std::collections::BTreeSet;
use std::sync::atomic::Ordering;
use std::time::Duration;

use common::{edge, proc, senml_file, sink_values, wait_until};
use echo_core::engine::{AllowFrom, Engine, EngineConfig, FragmentSpec, LinkSpec};
use echo_core::flowmodel::DataModelKind::{Microbatch, Stream};
use echo_core::flowmodel::LinkDirection;
use echo_core::httpc::HttpClient;
use echo_core::wire::BatchEnvelope;

fn engine_with(worker: &str, device: &str, allow: AllowFrom) -> Engine {
    let mut cfg = EngineConfig::local_test(worker);
    cfg.device_id = device.into();
    cfg.allow_from = allow;
    Engine::start(cfg).unwrap()
}

fn eos_done(engine: &Engine, flow: &str, pid: &str) -> bool {
    engine
        .inner()
        .fragments_snapshot()
        .iter()
        .find(|f| f.flow_id == flow)
        .and_then(|f| f.processor(pid))
        .map(|h| h.eos_done.load(Ordering::Relaxed))
        .unwrap_or(false)
}

fn sink_tuples(engine: &Engine, flow: &str, pid: &str) -> u64 {
    engine
        .inner()
        .fragments_snapshot()
        .iter()
        .find(|f| f.flow_id == flow)
        .and_then(|f| f.processor(pid))
        .map(|h| h.counters.snapshot().in_tuples)
        .unwrap_or(0)
}

/// Splits source->sink across two engines with the given link direction.
fn deploy_split(
    flow: &str,
    upstream: &Engine,
    downstream: &Engine,
    direction: LinkDirection,
    source_file: &str,
    rate: f64,
    sink_path: &str,
) {
    let link_id = format!("{flow}-mid-sink");
    let up_spec = FragmentSpec {
        dataflow: flow.into(),
        resource: "up".into(),
        processors: vec![
            proc(
                "source",
                "builtin:source_replay",
                Microbatch,
                Stream,
                serde_json::json!({
                    "file": source_file,
                    "rate": rate,
                    "window": {"mode": "count", "n": 5},
                }),
            ),
            proc(
                "mid",
                "builtin:annotate",
                Microbatch,
                Microbatch,
                serde_json::json!({"key": "hop", "val": "up"}),
            ),
        ],
        internal_edges: vec![edge("source", "mid")],
        links: vec![LinkSpec {
            link_id: link_id.clone(),
            from: "mid".into(),
            to: "sink".into(),
            direction,
            peer: Some(downstream.url()),
        }],
    };
    let down_spec = FragmentSpec {
        dataflow: flow.into(),
        resource: "down".into(),
        processors: vec![proc(
            "sink",
            "builtin:sink_file",
            Microbatch,
            Microbatch,
            serde_json::json!({"path": sink_path}),
        )],
        internal_edges: vec![],
        links: vec![LinkSpec {
            link_id,
            from: "mid".into(),
            to: "sink".into(),
            direction,
            peer: Some(upstream.url()),
        }],
    };
    // Downstream first, so nothing arrives at a missing endpoint.
    downstream.inner().deploy(down_spec).unwrap();
    downstream.inner().start_fragment(flow).unwrap();
    upstream.inner().deploy(up_spec).unwrap();
    upstream.inner().start_fragment(flow).unwrap();
}

#[test]
fn push_link_conserves_and_orders() {
    let dir = tempfile::tempdir().unwrap();
    let source = senml_file(dir.path(), "in.senml", 150);
    let sink_path = dir.path().join("push.out");
    let up = engine_with("up", "d-up", AllowFrom::Any);
    let down = engine_with("down", "d-down", AllowFrom::Any);

    deploy_split(
        "fpush",
        &up,
        &down,
        LinkDirection::Push,
        source.to_str().unwrap(),
        20_000.0,
        sink_path.to_str().unwrap(),
    );
    wait_until("push sink eos", Duration::from_secs(30), || {
        eos_done(&down, "fpush", "sink")
    });
    assert_eq!(sink_tuples(&down, "fpush", "sink"), 150);
    let values = sink_values(&sink_path);
    assert_eq!(values, (0..150).map(|i| i as f64).collect::<Vec<_>>());
    up.shutdown();
    down.shutdown();
}

#[test]
fn pull_link_delivers_the_same_multiset() {
    let dir = tempfile::tempdir().unwrap();
    let source = senml_file(dir.path(), "in.senml", 150);
    let sink_path = dir.path().join("pull.out");
    let up = engine_with("up", "d-up", AllowFrom::Any);
    let down = engine_with("down", "d-down", AllowFrom::Any);

    deploy_split(
        "fpull",
        &up,
        &down,
        LinkDirection::Pull,
        source.to_str().unwrap(),
        20_000.0,
        sink_path.to_str().unwrap(),
    );
    wait_until("pull sink eos", Duration::from_secs(30), || {
        eos_done(&down, "fpull", "sink")
    });
    assert_eq!(sink_tuples(&down, "fpull", "sink"), 150);
    let mut values = sink_values(&sink_path);
    values.sort_by(f64::total_cmp);
    assert_eq!(values, (0..150).map(|i| i as f64).collect::<Vec<_>>());
    up.shutdown();
    down.shutdown();
}

#[test]
fn duplicate_push_is_deduplicated() {
    let dir = tempfile::tempdir().unwrap();
    let source = senml_file(dir.path(), "in.senml", 10);
    let sink_path = dir.path().join("dup.out");
    let up = engine_with("up", "d-up", AllowFrom::Any);
    let down = engine_with("down", "d-down", AllowFrom::Any);
    deploy_split(
        "fdup",
        &up,
        &down,
        LinkDirection::Push,
        source.to_str().unwrap(),
        20_000.0,
        sink_path.to_str().unwrap(),
    );
    wait_until("dup sink eos", Duration::from_secs(20), || {
        eos_done(&down, "fdup", "sink")
    });
    let before = sink_tuples(&down, "fdup", "sink");
    assert_eq!(before, 10);

    // Re-send an envelope with a known-delivered batch id by hand; the
    // link's delivery counter moves once, not twice.
    let delivered = |engine: &Engine| -> u64 {
        echo_core::engine::metrics::build_doc(&engine.inner())["fragments"]["fdup"]["links"][0]
            ["delivered"]
            .as_u64()
            .unwrap()
    };
    let base = delivered(&down);
    let http = HttpClient::new(Duration::from_secs(5));
    let batch = echo_core::databatch::DataBatch::from_tuples(&[
        echo_core::databatch::EventTuple::new("x", 1.0, "u", 0),
    ]);
    let env = BatchEnvelope::from(&batch);
    let (status, body) = http
        .post_json(&format!("{}/links/fdup-mid-sink/batches", down.url()), &env)
        .unwrap();
    assert_eq!(status, 200);
    assert!(body.get("duplicate").is_none());
    assert_eq!(delivered(&down), base + 1);
    // Same id again: flagged duplicate, not enqueued.
    let (status, body) = http
        .post_json(&format!("{}/links/fdup-mid-sink/batches", down.url()), &env)
        .unwrap();
    assert_eq!(status, 200);
    assert_eq!(body["duplicate"], true);
    assert_eq!(delivered(&down), base + 1, "duplicate not re-enqueued");
    up.shutdown();
    down.shutdown();
}

#[test]
fn reachability_gate_blocks_push_but_pull_traverses() {
    let dir = tempfile::tempdir().unwrap();
    let source = senml_file(dir.path(), "in.senml", 60);
    // The edge device admits connections from nobody (not even the cloud);
    // the cloud device is publicly reachable.
    let edge_engine = engine_with("edge-w", "d-edge", AllowFrom::Only(BTreeSet::new()));
    let cloud_engine = engine_with("cloud-w", "d-cloud", AllowFrom::Any);

    // Attempt push from cloud into edge: the gate refuses, nothing arrives.
    let sink_blocked = dir.path().join("blocked.out");
    deploy_split(
        "fblocked",
        &cloud_engine,
        &edge_engine,
        LinkDirection::Push,
        source.to_str().unwrap(),
        20_000.0,
        sink_blocked.to_str().unwrap(),
    );
    std::thread::sleep(Duration::from_secs(2));
    assert_eq!(
        sink_tuples(&edge_engine, "fblocked", "sink"),
        0,
        "gate must block pushes from a disallowed device"
    );

    // Same topology, pull direction: the edge opens the connection to the
    // (public) cloud, so data flows despite the firewall.
    let sink_ok = dir.path().join("via-pull.out");
    deploy_split(
        "fpullok",
        &cloud_engine,
        &edge_engine,
        LinkDirection::Pull,
        source.to_str().unwrap(),
        20_000.0,
        sink_ok.to_str().unwrap(),
    );
    wait_until("pull across firewall", Duration::from_secs(30), || {
        eos_done(&edge_engine, "fpullok", "sink")
    });
    assert_eq!(sink_tuples(&edge_engine, "fpullok", "sink"), 60);
    edge_engine.shutdown();
    cloud_engine.shutdown();
}

#[test]
fn backpressure_caps_queue_depth_and_slows_source() {
    // Downstream engine is heavily throttled; the source's effective rate
    // must converge to the consumer's and no queue may exceed capacity.
    let dir = tempfile::tempdir().unwrap();
    let source = senml_file(dir.path(), "in.senml", 100_000);
    let up = engine_with("up", "d-up", AllowFrom::Any);
    let mut down_cfg = EngineConfig::local_test("down");
    down_cfg.device_id = "d-down".into();
    down_cfg.throttle_tokens_per_sec = Some(100.0);
    let down = Engine::start(down_cfg).unwrap();

    deploy_split(
        "fbp",
        &up,
        &down,
        LinkDirection::Push,
        source.to_str().unwrap(),
        100_000.0,
        dir.path().join("bp.out").to_str().unwrap(),
    );
    // Convergence point: the receiving queue is full, so every further
    // delivery waits for the throttled consumer.
    let inbound_full = || {
        down.inner()
            .fragments_snapshot()
            .iter()
            .find(|f| f.flow_id == "fbp")
            .map(|f| {
                f.queues_snapshot()
                    .iter()
                    .any(|((_, to), q)| to == "sink" && q.len() >= q.capacity())
            })
            .unwrap_or(false)
    };
    wait_until("inbound queue to fill", Duration::from_secs(60), inbound_full);

    // Sink consumes ~100 tokens/s = ~100 tuples/s = ~20 batches/s of 5.
    let mid_out = || {
        up.inner()
            .fragments_snapshot()
            .iter()
            .find(|f| f.flow_id == "fbp")
            .and_then(|f| f.processor("mid"))
            .map(|h| h.counters.snapshot().out_tuples)
            .unwrap()
    };
    let t0 = std::time::Instant::now();
    let s0 = sink_tuples(&down, "fbp", "sink");
    let up_out0 = mid_out();
    std::thread::sleep(Duration::from_secs(4));
    let sink_rate = (sink_tuples(&down, "fbp", "sink") - s0) as f64 / t0.elapsed().as_secs_f64();
    let upstream_rate = (mid_out() - up_out0) as f64 / t0.elapsed().as_secs_f64();

    assert!(
        (40.0..200.0).contains(&sink_rate),
        "sink rate {sink_rate:.0}/s should be near the 100 token/s budget"
    );
    assert!(
        upstream_rate < sink_rate * 2.0 + 50.0,
        "upstream effective rate {upstream_rate:.0}/s must converge toward the consumer's {sink_rate:.0}/s"
    );
    for engine in [&up, &down] {
        for f in engine.inner().fragments_snapshot() {
            for ((from, to), q) in f.queues_snapshot() {
                assert!(
                    q.len() <= q.capacity(),
                    "queue {from}->{to} exceeded capacity"
                );
            }
        }
    }
    up.shutdown();
    down.shutdown();
}

#[test]
fn live_update_moves_processor_with_queued_batches() {
    // source -> mid -> sink all on engine A; move `mid` to engine B while
    // batches sit in its input queue, via the reconfiguration primitives
    // (pause, quiesce, drain, update, inject, activate, resume).
    let dir = tempfile::tempdir().unwrap();
    let total = 400usize;
    let source = senml_file(dir.path(), "in.senml", total);
    let sink_path = dir.path().join("mig.out");
    let a = engine_with("wa", "d-a", AllowFrom::Any);
    let b = engine_with("wb", "d-b", AllowFrom::Any);
    let flow = "fmig";

    let full = FragmentSpec {
        dataflow: flow.into(),
        resource: "wa".into(),
        processors: vec![
            proc(
                "source",
                "builtin:source_replay",
                Microbatch,
                Stream,
                serde_json::json!({
                    "file": source.to_str().unwrap(),
                    "rate": 150.0,
                    "window": {"mode": "count", "n": 1},
                }),
            ),
            proc(
                "mid",
                "builtin:annotate",
                Microbatch,
                Microbatch,
                serde_json::json!({"key": "hop", "val": "x"}),
            ),
            proc(
                "sink",
                "builtin:sink_file",
                Microbatch,
                Microbatch,
                serde_json::json!({"path": sink_path.to_str().unwrap()}),
            ),
        ],
        internal_edges: vec![edge("source", "mid"), edge("mid", "sink")],
        links: vec![],
    };
    a.inner().deploy(full).unwrap();
    a.inner().start_fragment(flow).unwrap();
    std::thread::sleep(Duration::from_millis(500));

    // Pause the moved processor first so its input visibly queues, then the
    // adjacent ones.
    a.inner().pause_processors(flow, &["mid".to_string()]).unwrap();
    wait_until("mid input to queue", Duration::from_secs(10), || {
        a.inner()
            .queue_depths(flow)
            .unwrap()
            .iter()
            .any(|q| q.to == "mid" && q.depth >= 10)
    });
    a.inner()
        .pause_processors(flow, &["source".to_string(), "sink".to_string()])
        .unwrap();
    std::thread::sleep(Duration::from_millis(200));

    // Drain mid's input; source->mid batches move with the processor.
    let queued_in = a.inner().queue_drain(flow, "source", "mid").unwrap();
    assert!(!queued_in.is_empty(), "some batches were in flight");

    // New layout: A keeps source+sink, B hosts mid.
    let link_in = LinkSpec {
        link_id: format!("{flow}-source-mid"),
        from: "source".into(),
        to: "mid".into(),
        direction: LinkDirection::Push,
        peer: Some(b.url()),
    };
    let link_out = LinkSpec {
        link_id: format!("{flow}-mid-sink"),
        from: "mid".into(),
        to: "sink".into(),
        direction: LinkDirection::Push,
        peer: Some(a.url()),
    };
    let a_new = FragmentSpec {
        dataflow: flow.into(),
        resource: "wa".into(),
        processors: vec![
            proc(
                "source",
                "builtin:source_replay",
                Microbatch,
                Stream,
                serde_json::json!({
                    "file": source.to_str().unwrap(),
                    "rate": 150.0,
                    "window": {"mode": "count", "n": 1},
                }),
            ),
            proc(
                "sink",
                "builtin:sink_file",
                Microbatch,
                Microbatch,
                serde_json::json!({"path": sink_path.to_str().unwrap()}),
            ),
        ],
        internal_edges: vec![],
        links: vec![
            LinkSpec {
                peer: Some(b.url()),
                ..link_in.clone()
            },
            LinkSpec {
                peer: Some(b.url()),
                ..link_out.clone()
            },
        ],
    };
    let b_new = FragmentSpec {
        dataflow: flow.into(),
        resource: "wb".into(),
        processors: vec![proc(
            "mid",
            "builtin:annotate",
            Microbatch,
            Microbatch,
            serde_json::json!({"key": "hop", "val": "x"}),
        )],
        internal_edges: vec![],
        links: vec![
            LinkSpec {
                peer: Some(a.url()),
                ..link_in
            },
            LinkSpec {
                peer: Some(a.url()),
                ..link_out
            },
        ],
    };
    // Fresh empty fragment on B, then updates everywhere (links held,
    // added processors paused).
    b.inner()
        .deploy(FragmentSpec {
            dataflow: flow.into(),
            resource: "wb".into(),
            processors: vec![],
            internal_edges: vec![],
            links: vec![],
        })
        .unwrap();
    b.inner().start_fragment(flow).unwrap();
    b.inner().update_fragment(b_new).unwrap();
    a.inner().update_fragment(a_new).unwrap();

    // Transferred batches land in mid's new input queue before any new
    // traffic; then links open and everyone resumes.
    b.inner()
        .queue_inject(flow, "source", "mid", queued_in, false)
        .unwrap();
    a.inner().activate_links(flow).unwrap();
    b.inner().activate_links(flow).unwrap();
    b.inner().resume_processors(flow, &["mid".to_string()]).unwrap();
    a.inner()
        .resume_processors(flow, &["source".to_string(), "sink".to_string()])
        .unwrap();

    wait_until("sink eos after migration", Duration::from_secs(40), || {
        eos_done(&a, flow, "sink")
    });
    assert_eq!(
        sink_tuples(&a, flow, "sink"),
        total as u64,
        "conservation across live migration"
    );
    // Order preserved end to end: single linear path.
    let values = sink_values(&sink_path);
    assert_eq!(values, (0..total).map(|i| i as f64).collect::<Vec<_>>());
    a.shutdown();
    b.shutdown();
}
