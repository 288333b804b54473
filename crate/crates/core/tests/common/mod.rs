// SPDX-License-Identifier: Apache-2.0

//! Shared helpers for in-process integration tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use echo_core::flowmodel::{DataModelKind, EdgeSpec, ProcessorSpec, ResourceDemand};

/// Writes `n` single-event SenML records (values 0..n) and returns the path.
pub fn senml_file(dir: &Path, name: &str, n: usize) -> PathBuf {
    let path = dir.join(name);
    let mut body = String::new();
    for i in 0..n {
        body.push_str(&format!(
            "{{\"bn\":\"s/\",\"e\":[{{\"n\":\"x\",\"u\":\"u\",\"v\":{i}.0,\"t\":{i}}}]}}\n"
        ));
    }
    std::fs::write(&path, body).unwrap();
    path
}

pub fn proc(
    id: &str,
    kind: &str,
    input: DataModelKind,
    output: DataModelKind,
    config: serde_json::Value,
) -> ProcessorSpec {
    ProcessorSpec {
        id: id.into(),
        kind: kind.into(),
        input_model: input,
        output_model: output,
        config: match config {
            serde_json::Value::Object(m) => m.into_iter().collect(),
            serde_json::Value::Null => BTreeMap::new(),
            other => panic!("config must be an object, got {other}"),
        },
        demands: ResourceDemand {
            cpu_millis: 100,
            mem_mb: 16,
        },
        constraints: vec![],
    }
}

pub fn edge(from: &str, to: &str) -> EdgeSpec {
    EdgeSpec::new(from, to)
}

/// Polls `pred` until true or panics at the deadline.
pub fn wait_until(what: &str, timeout: Duration, mut pred: impl FnMut() -> bool) {
    let deadline = Instant::now() + timeout;
    loop {
        if pred() {
            return;
        }
        assert!(Instant::now() < deadline, "timed out waiting for {what}");
        std::thread::sleep(Duration::from_millis(25));
    }
}

/// Reads the `v` values of newline-delimited tuples in a sink file.
pub fn sink_values(path: &Path) -> Vec<f64> {
    let Ok(content) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    content
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).expect("tuple json")["v"]
                .as_f64()
                .expect("v is a number")
        })
        .collect()
}
