// SPDX-License-Identifier: Apache-2.0

//! Cooperative CPU throttle: the container stand-in.
//!
//! A worker sandbox limits itself by charging simulated CPU cost (milli-core
//! milliseconds, one token each) against a bucket refilled at the profile's
//! rate. Unthrottled workers still account consumption — that is where the
//! reported CPU% comes from — but never block.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

pub struct TokenThrottle {
    /// Tokens per second; `None` = unthrottled.
    rate: Option<f64>,
    state: Mutex<BucketState>,
    /// Total tokens consumed, in thousandths, for utilization accounting.
    consumed_milli: AtomicU64,
}

struct BucketState {
    available: f64,
    last_refill: Instant,
}

#[derive(Debug, thiserror::Error)]
#[error("throttle interrupted by stop")]
pub struct ThrottleStopped;

impl TokenThrottle {
    pub fn new(rate: Option<f64>) -> Self {
        Self {
            rate: rate.filter(|r| *r > 0.0),
            state: Mutex::new(BucketState {
                available: 0.0,
                last_refill: Instant::now(),
            }),
            consumed_milli: AtomicU64::new(0),
        }
    }

    pub fn rate(&self) -> Option<f64> {
        self.rate
    }

    /// Charges `cost` tokens, blocking until the bucket covers it. Burst
    /// capacity is one second's worth.
    pub fn take(&self, cost: f64, stop: &AtomicBool) -> Result<(), ThrottleStopped> {
        let cost = cost.max(0.0);
        let Some(rate) = self.rate else {
            self.record(cost);
            return Ok(());
        };
        // Costs above the burst cap would never fit; charge what fits.
        let cost = cost.min(rate);
        loop {
            if stop.load(Ordering::Relaxed) {
                return Err(ThrottleStopped);
            }
            let wait = {
                let mut s = self.state.lock().expect("throttle lock");
                let now = Instant::now();
                let refill = now.duration_since(s.last_refill).as_secs_f64() * rate;
                s.available = (s.available + refill).min(rate);
                s.last_refill = now;
                if s.available >= cost {
                    s.available -= cost;
                    self.record(cost);
                    return Ok(());
                }
                Duration::from_secs_f64(((cost - s.available) / rate).max(0.001))
            };
            std::thread::sleep(wait.min(Duration::from_millis(50)));
        }
    }

    fn record(&self, cost: f64) {
        self.consumed_milli
            .fetch_add((cost * 1000.0) as u64, Ordering::Relaxed);
    }

    /// Total tokens consumed since start.
    pub fn consumed(&self) -> f64 {
        self.consumed_milli.load(Ordering::Relaxed) as f64 / 1000.0
    }
}
