// SPDX-License-Identifier: Apache-2.0

//! The remote-link wire protocol: how DataBatches cross resource boundaries.
//!
//! HTTP + JSON, two verbs:
//! - push: `POST /links/{link_id}/batches` with a [`BatchEnvelope`]; the
//!   receiver deduplicates by batch id over a sliding window, so delivery is
//!   at-least-once transport + dedup = effectively once per link.
//! - pull: `GET /links/{link_id}/batches?max=N&wait_ms=M` long-polls the
//!   serving side without removing anything; the puller confirms receipt via
//!   `POST /links/{link_id}/ack {"batch_ids": [...]}`, which removes. An
//!   un-acked read is simply re-served; the puller's dedup window drops the
//!   repeats.

use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::databatch::DataBatch;
use crate::httpc::{HttpClient, HttpError};

/// Receiver-side dedup window size, in batch ids per link.
pub const DEDUP_WINDOW: usize = 4096;
/// Retry backoff for unreachable peers: base, multiplier 2, cap.
pub const RETRY_BASE: Duration = Duration::from_millis(200);
pub const RETRY_CAP: Duration = Duration::from_secs(5);
/// Consecutive failures after which a link reports itself degraded.
pub const DEGRADED_AFTER: u32 = 5;

/// JSON form of a batch on the wire.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchEnvelope {
    pub batch_id: String,
    pub attributes: std::collections::BTreeMap<String, String>,
    pub content_b64: String,
}

impl From<&DataBatch> for BatchEnvelope {
    fn from(b: &DataBatch) -> Self {
        use base64::Engine;
        Self {
            batch_id: b.id().to_string(),
            attributes: b.attributes.clone(),
            content_b64: base64::engine::general_purpose::STANDARD.encode(&b.content),
        }
    }
}

impl BatchEnvelope {
    pub fn into_batch(self) -> Result<DataBatch, base64::DecodeError> {
        use base64::Engine;
        let content = base64::engine::general_purpose::STANDARD.decode(self.content_b64)?;
        Ok(DataBatch {
            attributes: self.attributes,
            content,
        })
    }
}

/// Sliding-window set of recently seen batch ids.
pub struct DedupWindow {
    seen: HashSet<String>,
    order: VecDeque<String>,
    capacity: usize,
}

impl Default for DedupWindow {
    fn default() -> Self {
        Self::new(DEDUP_WINDOW)
    }
}

impl DedupWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            seen: HashSet::with_capacity(capacity),
            order: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn contains(&self, id: &str) -> bool {
        self.seen.contains(id)
    }

    /// Records `id`; returns `false` when it was already in the window.
    pub fn insert(&mut self, id: &str) -> bool {
        if self.seen.contains(id) {
            return false;
        }
        if self.order.len() == self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        self.order.push_back(id.to_string());
        self.seen.insert(id.to_string());
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Delivered,
    /// Receiver had already seen this batch id.
    Duplicate,
}

#[derive(Debug)]
pub enum PushError {
    /// Stop flag raised while retrying.
    Stopped,
    /// Peer answered with a non-retryable rejection.
    Rejected { status: u16, message: String },
}

/// Result of one delivery attempt loop, with how hard it was.
#[derive(Debug)]
pub struct PushReport {
    pub outcome: PushOutcome,
    pub attempts: u32,
}

/// Delivers one batch, retrying with exponential backoff until the peer
/// accepts, the peer rejects outright, or `stop` is raised. The same batch
/// id is re-sent on every retry so the receiver can deduplicate.
pub fn push_batch_blocking(
    http: &HttpClient,
    peer_base: &str,
    link_id: &str,
    batch: &DataBatch,
    stop: &AtomicBool,
) -> Result<PushReport, PushError> {
    let url = format!("{peer_base}/links/{link_id}/batches");
    let envelope = BatchEnvelope::from(batch);
    let mut attempts = 0u32;
    let mut backoff = RETRY_BASE;
    loop {
        if stop.load(Ordering::Relaxed) {
            return Err(PushError::Stopped);
        }
        attempts += 1;
        match http.post_json(&url, &envelope) {
            Ok((200, body)) => {
                let outcome = if body.get("duplicate").and_then(|d| d.as_bool()) == Some(true) {
                    PushOutcome::Duplicate
                } else {
                    PushOutcome::Delivered
                };
                return Ok(PushReport { outcome, attempts });
            }
            Ok((status, body)) if status == 403 || status == 404 || status == 400 => {
                return Err(PushError::Rejected {
                    status,
                    message: body
                        .get("error")
                        .and_then(|e| e.as_str())
                        .unwrap_or("rejected")
                        .to_string(),
                });
            }
            Ok((_, _)) | Err(_) => {
                // Unreachable or transient server error: back off and retry.
                sleep_interruptible(backoff, stop);
                backoff = (backoff * 2).min(RETRY_CAP);
            }
        }
    }
}

fn sleep_interruptible(total: Duration, stop: &AtomicBool) {
    let step = Duration::from_millis(50);
    let mut remaining = total;
    while remaining > Duration::ZERO && !stop.load(Ordering::Relaxed) {
        let d = remaining.min(step);
        std::thread::sleep(d);
        remaining = remaining.saturating_sub(d);
    }
}

/// One long-poll fetch from a serving link. Does not remove anything.
pub fn pull_batches(
    http: &HttpClient,
    peer_base: &str,
    link_id: &str,
    max_n: usize,
    wait: Duration,
) -> Result<Vec<BatchEnvelope>, HttpError> {
    let url = format!(
        "{peer_base}/links/{link_id}/batches?max={max_n}&wait_ms={}",
        wait.as_millis()
    );
    let (status, body) = http.get_json_timeout(&url, Some(wait + Duration::from_secs(10)))?;
    if status != 200 {
        return Ok(Vec::new());
    }
    Ok(body
        .get("batches")
        .and_then(|b| serde_json::from_value(b.clone()).ok())
        .unwrap_or_default())
}

/// Confirms receipt so the serving side removes the batches.
pub fn ack_batches(
    http: &HttpClient,
    peer_base: &str,
    link_id: &str,
    batch_ids: &[String],
) -> Result<(), HttpError> {
    let url = format!("{peer_base}/links/{link_id}/ack");
    http.post_json(&url, &serde_json::json!({ "batch_ids": batch_ids }))?;
    Ok(())
}
