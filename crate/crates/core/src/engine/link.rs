// SPDX-License-Identifier: Apache-2.0

//! Remote link endpoints of a fragment.
//!
//! Every cut edge materializes as an outbound queue on the upstream engine
//! and an inbound queue on the downstream engine; the link moves batches
//! between them. Who connects to whom depends on direction:
//!
//! - push: upstream runs a client thread POSTing to the downstream engine;
//!   the downstream serves the receiving endpoint.
//! - pull: downstream runs a client thread long-polling the upstream
//!   engine, which serves its outbound queue (ack removes).
//!
//! Links created during live reconfiguration start *held* (no transport)
//! until the deployer has injected transferred batches, keeping per-edge
//! FIFO intact.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::flowmodel::LinkDirection;
use crate::httpc::HttpClient;
use crate::wire::{self, DedupWindow};

use super::queue::EdgeQueue;

/// Wire form of one link endpoint inside a fragment spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub link_id: String,
    pub from: String,
    pub to: String,
    pub direction: LinkDirection,
    /// Peer engine base URL; required on the connecting side (push
    /// upstream, pull downstream), ignored on the serving side.
    #[serde(default)]
    pub peer: Option<String>,
}

impl LinkSpec {
    /// True when this engine hosts the upstream (`from`) processor.
    pub fn is_outbound(&self, local_processors: &std::collections::BTreeSet<String>) -> bool {
        local_processors.contains(&self.from)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkRole {
    /// We host the upstream processor and own the outbound queue.
    Outbound,
    /// We host the downstream processor and own the inbound queue.
    Inbound,
}

pub struct LinkHandle {
    pub spec: LinkSpec,
    pub role: LinkRole,
    pub queue: Arc<EdgeQueue>,
    active: AtomicBool,
    degraded: AtomicBool,
    delivered: AtomicU64,
    /// Dedup window for the receiving side of this link.
    pub dedup: Mutex<DedupWindow>,
    /// Serializes inbound-push handling so retries of a blocked delivery
    /// wait rather than double-enqueue.
    pub inbound_gate: Mutex<()>,
    stop: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl LinkHandle {
    pub fn new(spec: LinkSpec, role: LinkRole, queue: Arc<EdgeQueue>, active: bool) -> Arc<Self> {
        Arc::new(Self {
            spec,
            role,
            queue,
            active: AtomicBool::new(active),
            degraded: AtomicBool::new(false),
            delivered: AtomicU64::new(0),
            dedup: Mutex::new(DedupWindow::default()),
            inbound_gate: Mutex::new(()),
            stop: Arc::new(AtomicBool::new(false)),
            thread: Mutex::new(None),
        })
    }

    pub fn is_active(&self) -> bool {
        self.active.load(Ordering::Relaxed)
    }

    pub fn activate(&self) {
        self.active.store(true, Ordering::Relaxed);
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded.load(Ordering::Relaxed)
    }

    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Relaxed)
    }

    pub fn record_delivery(&self) {
        self.delivered.fetch_add(1, Ordering::Relaxed);
    }

    /// Spawns the client loop when this side is the connecting one.
    pub fn spawn_client(
        self: &Arc<Self>,
        http: HttpClient,
        fragment_stop: Arc<AtomicBool>,
    ) {
        let needs_client = matches!(
            (self.role, self.spec.direction),
            (LinkRole::Outbound, LinkDirection::Push) | (LinkRole::Inbound, LinkDirection::Pull)
        );
        if !needs_client {
            return;
        }
        let handle = self.clone();
        let name = format!("link-{}", self.spec.link_id);
        let t = std::thread::Builder::new()
            .name(name)
            .spawn(move || match (handle.role, handle.spec.direction) {
                (LinkRole::Outbound, LinkDirection::Push) => {
                    push_client_loop(&handle, &http, &fragment_stop)
                }
                (LinkRole::Inbound, LinkDirection::Pull) => {
                    pull_client_loop(&handle, &http, &fragment_stop)
                }
                _ => unreachable!(),
            })
            .expect("spawn link client");
        *self.thread.lock().expect("link thread lock") = Some(t);
    }

    /// Stops transport and joins the client thread. In-flight batches are
    /// re-queued, so a drain after teardown sees everything undelivered.
    pub fn teardown(&self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.lock().expect("link thread lock").take() {
            let _ = t.join();
        }
    }

    pub fn stop_flag(&self) -> &AtomicBool {
        &self.stop
    }

    fn should_run(&self, fragment_stop: &AtomicBool) -> bool {
        !self.stop.load(Ordering::Relaxed) && !fragment_stop.load(Ordering::Relaxed)
    }
}

fn push_client_loop(link: &Arc<LinkHandle>, http: &HttpClient, fragment_stop: &AtomicBool) {
    let peer = link.spec.peer.clone().unwrap_or_default();
    while link.should_run(fragment_stop) {
        if !link.is_active() {
            std::thread::sleep(Duration::from_millis(20));
            continue;
        }
        let Some(batch) = link.queue.pop_timeout(Duration::from_millis(100)) else {
            continue;
        };
        match wire::push_batch_blocking(http, &peer, &link.spec.link_id, &batch, &link.stop) {
            Ok(report) => {
                link.degraded
                    .store(report.attempts > wire::DEGRADED_AFTER, Ordering::Relaxed);
                link.record_delivery();
            }
            Err(wire::PushError::Stopped) => {
                // Keep the batch for whoever drains this queue next.
                link.queue.inject(vec![batch], true);
                return;
            }
            Err(wire::PushError::Rejected { status, message }) => {
                log::warn!(
                    "link {}: peer rejected batch ({status}): {message}; retrying",
                    link.spec.link_id
                );
                link.degraded.store(true, Ordering::Relaxed);
                // Rejection here is a wiring race (peer fragment not yet
                // deployed); retry after a pause rather than lose data.
                link.queue.inject(vec![batch], true);
                std::thread::sleep(Duration::from_millis(250));
            }
        }
    }
}

fn pull_client_loop(link: &Arc<LinkHandle>, http: &HttpClient, fragment_stop: &AtomicBool) {
    let peer = link.spec.peer.clone().unwrap_or_default();
    while link.should_run(fragment_stop) {
        if !link.is_active() {
            std::thread::sleep(Duration::from_millis(20));
            continue;
        }
        let envelopes = match wire::pull_batches(
            http,
            &peer,
            &link.spec.link_id,
            32,
            Duration::from_millis(1000),
        ) {
            Ok(e) => e,
            Err(_) => {
                link.degraded.store(true, Ordering::Relaxed);
                std::thread::sleep(Duration::from_millis(200));
                continue;
            }
        };
        link.degraded.store(false, Ordering::Relaxed);
        if envelopes.is_empty() {
            continue;
        }
        let ids: Vec<String> = envelopes.iter().map(|e| e.batch_id.clone()).collect();
        for env in envelopes {
            let fresh = link
                .dedup
                .lock()
                .expect("dedup lock")
                .insert(&env.batch_id);
            if !fresh {
                continue;
            }
            match env.into_batch() {
                Ok(batch) => {
                    if link.queue.push_blocking(batch, &link.stop).is_err() {
                        return;
                    }
                    link.record_delivery();
                }
                Err(e) => log::warn!("link {}: dropping undecodable batch: {e}", link.spec.link_id),
            }
        }
        // Ack everything received this round (duplicates included: the
        // server still holds them).
        let _ = wire::ack_batches(http, &peer, &link.spec.link_id, &ids);
    }
}
