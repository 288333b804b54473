// SPDX-License-Identifier: Apache-2.0

//! Remote engine bridge: ships input batches to any process speaking the
//! link wire protocol and emits whatever arrives back. Ordering across the
//! bridge is not guaranteed; delivery follows the standard link
//! retry/dedup policy.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::databatch::DataBatch;
use crate::engine::queue::EdgeQueue;
use crate::httpc::HttpClient;
use crate::wire;

use super::config::Config;
use super::{PortData, ProcCtx, ProcessorError, ProcessorLogic, SourcePoll};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSpec {
    /// Base URL of the remote engine.
    pub endpoint: String,
    /// Link the remote consumes from (we push into it).
    pub ingress_link: String,
    /// Link the remote produces on (we pull from it).
    pub egress_link: String,
    /// How long to wait at end-of-stream for in-flight results.
    #[serde(default = "default_eos_timeout_ms")]
    pub eos_timeout_ms: u64,
}

fn default_eos_timeout_ms() -> u64 {
    60_000
}

impl BridgeSpec {
    pub fn from_config(cfg: &Config) -> Result<Self, ProcessorError> {
        let spec: BridgeSpec =
            serde_json::from_value(serde_json::Value::Object(cfg.clone().into_iter().collect()))
                .map_err(|e| ProcessorError::Config(format!("bridge spec: {e}")))?;
        if spec.ingress_link == spec.egress_link {
            return Err(ProcessorError::Config(
                "bridge ingress and egress links must be distinct".into(),
            ));
        }
        Ok(spec)
    }
}

pub struct BridgeLogic {
    outbound: Arc<EdgeQueue>,
    inbound: Arc<EdgeQueue>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    eos_timeout: Duration,
    eos_sent: bool,
    eos_returned: Arc<AtomicBool>,
    eos_deadline: Option<std::time::Instant>,
}

impl BridgeLogic {
    pub fn from_config(cfg: &Config, ctx: &super::BuildCtx) -> Result<Self, ProcessorError> {
        Self::new(BridgeSpec::from_config(cfg)?, ctx)
    }

    pub fn new(spec: BridgeSpec, ctx: &super::BuildCtx) -> Result<Self, ProcessorError> {
        let outbound = Arc::new(EdgeQueue::new(256));
        let inbound = Arc::new(EdgeQueue::new(256));
        // Local stop composed with the fragment's: either halts the loops.
        let stop = Arc::new(AtomicBool::new(false));
        let eos_returned = Arc::new(AtomicBool::new(false));

        let mut http = HttpClient::new(Duration::from_secs(10));
        if let Some(dev) = &ctx.from_device {
            http = http.with_from_device(dev.clone());
        }

        let mut threads = Vec::new();
        // Sender: outbound queue -> remote ingress.
        {
            let outbound = outbound.clone();
            let stop = stop.clone();
            let fragment_stop = ctx.stop.clone();
            let http = http.clone();
            let spec = spec.clone();
            threads.push(std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) && !fragment_stop.load(Ordering::Relaxed) {
                    let Some(batch) = outbound.pop_timeout(Duration::from_millis(100)) else {
                        continue;
                    };
                    match wire::push_batch_blocking(
                        &http,
                        &spec.endpoint,
                        &spec.ingress_link,
                        &batch,
                        &stop,
                    ) {
                        Ok(_) => {}
                        Err(wire::PushError::Stopped) => break,
                        Err(wire::PushError::Rejected { status, message }) => {
                            log::warn!(
                                "bridge: remote rejected batch on {} ({status}): {message}",
                                spec.ingress_link
                            );
                        }
                    }
                }
            }));
        }
        // Receiver: remote egress -> inbound queue.
        {
            let inbound = inbound.clone();
            let stop = stop.clone();
            let fragment_stop = ctx.stop.clone();
            let http = http.clone();
            let spec = spec.clone();
            let eos_returned = eos_returned.clone();
            threads.push(std::thread::spawn(move || {
                let mut dedup = wire::DedupWindow::default();
                while !stop.load(Ordering::Relaxed) && !fragment_stop.load(Ordering::Relaxed) {
                    let envelopes = match wire::pull_batches(
                        &http,
                        &spec.endpoint,
                        &spec.egress_link,
                        32,
                        Duration::from_secs(2),
                    ) {
                        Ok(e) => e,
                        Err(_) => {
                            std::thread::sleep(Duration::from_millis(200));
                            continue;
                        }
                    };
                    if envelopes.is_empty() {
                        continue;
                    }
                    let ids: Vec<String> =
                        envelopes.iter().map(|e| e.batch_id.clone()).collect();
                    for env in envelopes {
                        if !dedup.insert(&env.batch_id) {
                            continue;
                        }
                        if let Ok(batch) = env.into_batch() {
                            if batch.is_eos() {
                                eos_returned.store(true, Ordering::Relaxed);
                                continue;
                            }
                            if inbound.push_blocking(batch, &stop).is_err() {
                                return;
                            }
                        }
                    }
                    let _ = wire::ack_batches(&http, &spec.endpoint, &spec.egress_link, &ids);
                }
            }));
        }

        Ok(Self {
            outbound,
            inbound,
            stop,
            threads,
            eos_timeout: Duration::from_millis(spec.eos_timeout_ms),
            eos_sent: false,
            eos_returned,
            eos_deadline: None,
        })
    }
}

impl ProcessorLogic for BridgeLogic {
    fn on_input(&mut self, input: PortData, _ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        let batch = match input {
            PortData::Batch(b) => b,
            other => {
                return Err(ProcessorError::Failed(format!(
                    "bridge expects micro-batch input, got {other:?}"
                )))
            }
        };
        self.outbound
            .push_blocking(batch, &self.stop)
            .map_err(|_| ProcessorError::Failed("bridge stopped".into()))
    }

    fn wants_poll(&self) -> bool {
        true
    }

    fn poll(&mut self, ctx: &mut ProcCtx<'_>) -> Result<SourcePoll, ProcessorError> {
        let mut emitted = false;
        while let Some(batch) = self.inbound.try_pop() {
            ctx.emit(PortData::Batch(batch));
            emitted = true;
        }
        if emitted {
            return Ok(SourcePoll::Emitted);
        }
        if self.eos_sent {
            let drained = self.outbound.is_empty() && self.inbound.is_empty();
            if drained && self.eos_returned.load(Ordering::Relaxed) {
                return Ok(SourcePoll::Exhausted);
            }
            if let Some(deadline) = self.eos_deadline {
                if std::time::Instant::now() >= deadline {
                    ctx.soft_error("bridge: remote did not return end-of-stream in time");
                    return Ok(SourcePoll::Exhausted);
                }
            }
        }
        Ok(SourcePoll::Idle(Duration::from_millis(20)))
    }

    fn on_eos(&mut self, _ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        // The marker round-trips through the remote so we know everything
        // ahead of it has been processed.
        self.eos_sent = true;
        self.eos_deadline = Some(std::time::Instant::now() + self.eos_timeout);
        self.outbound
            .push_blocking(DataBatch::eos_marker(), &self.stop)
            .map_err(|_| ProcessorError::Failed("bridge stopped".into()))
    }
}

impl Drop for BridgeLogic {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.outbound.close();
        self.inbound.close();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}
