// SPDX-License-Identifier: Apache-2.0

//! Bounded FIFO of DataBatches backing every dataflow edge.
//!
//! Enqueue blocks while full: that is the backpressure path, propagating all
//! the way to sources. Queues additionally support the inspection and
//! transfer operations live migration needs: depth, peek-without-remove,
//! remove-by-id, drain, and inject.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::databatch::DataBatch;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, thiserror::Error)]
#[error("queue closed")]
pub struct QueueClosed;

pub struct EdgeQueue {
    inner: Mutex<Inner>,
    not_full: Condvar,
    not_empty: Condvar,
    capacity: usize,
}

struct Inner {
    items: VecDeque<DataBatch>,
    content_bytes: usize,
    closed: bool,
}

impl EdgeQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new(Inner {
                items: VecDeque::new(),
                content_bytes: 0,
                closed: false,
            }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Blocks while the queue is full. Returns an error once the queue is
    /// closed or `stop` is raised.
    pub fn push_blocking(&self, batch: DataBatch, stop: &AtomicBool) -> Result<(), QueueClosed> {
        let mut inner = self.inner.lock().expect("queue lock");
        loop {
            if inner.closed || stop.load(Ordering::Relaxed) {
                return Err(QueueClosed);
            }
            if inner.items.len() < self.capacity {
                inner.content_bytes += batch.content.len();
                inner.items.push_back(batch);
                self.not_empty.notify_one();
                return Ok(());
            }
            let (guard, _) = self
                .not_full
                .wait_timeout(inner, Duration::from_millis(50))
                .expect("queue lock");
            inner = guard;
        }
    }

    /// Pops the oldest batch, waiting up to `timeout` for one to arrive.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<DataBatch> {
        let mut inner = self.inner.lock().expect("queue lock");
        if inner.items.is_empty() && !inner.closed {
            let (guard, _) = self
                .not_empty
                .wait_timeout(inner, timeout)
                .expect("queue lock");
            inner = guard;
        }
        let item = inner.items.pop_front();
        if let Some(b) = &item {
            inner.content_bytes -= b.content.len();
            self.not_full.notify_one();
        }
        item
    }

    pub fn try_pop(&self) -> Option<DataBatch> {
        self.pop_timeout(Duration::ZERO)
    }

    /// Clones up to `n` batches from the front without removing them (the
    /// pull-serve read; removal happens on ack).
    pub fn peek_upto(&self, n: usize) -> Vec<DataBatch> {
        let inner = self.inner.lock().expect("queue lock");
        inner.items.iter().take(n).cloned().collect()
    }

    /// Waits up to `timeout` for the queue to be non-empty, then peeks.
    pub fn peek_upto_wait(&self, n: usize, timeout: Duration) -> Vec<DataBatch> {
        let deadline = std::time::Instant::now() + timeout;
        let mut inner = self.inner.lock().expect("queue lock");
        while inner.items.is_empty() && !inner.closed {
            let now = std::time::Instant::now();
            if now >= deadline {
                break;
            }
            let (guard, _) = self
                .not_empty
                .wait_timeout(inner, deadline - now)
                .expect("queue lock");
            inner = guard;
        }
        inner.items.iter().take(n).cloned().collect()
    }

    /// Removes acked batch ids wherever they sit. Returns how many went.
    pub fn remove_ids(&self, ids: &std::collections::HashSet<String>) -> usize {
        let mut inner = self.inner.lock().expect("queue lock");
        let before = inner.items.len();
        let mut freed = 0usize;
        inner.items.retain(|b| {
            let keep = !ids.contains(b.id());
            if !keep {
                freed += b.content.len();
            }
            keep
        });
        inner.content_bytes -= freed;
        let removed = before - inner.items.len();
        if removed > 0 {
            self.not_full.notify_all();
        }
        removed
    }

    /// Removes and returns everything, oldest first.
    pub fn drain_all(&self) -> Vec<DataBatch> {
        let mut inner = self.inner.lock().expect("queue lock");
        inner.content_bytes = 0;
        let out: Vec<DataBatch> = inner.items.drain(..).collect();
        if !out.is_empty() {
            self.not_full.notify_all();
        }
        out
    }

    /// Transfers batches in (migration). Capacity is deliberately not
    /// enforced here: producers are paused during transfer and the data
    /// already existed under the same budget at its old home.
    pub fn inject(&self, batches: Vec<DataBatch>, at_front: bool) {
        let mut inner = self.inner.lock().expect("queue lock");
        inner.content_bytes += batches.iter().map(|b| b.content.len()).sum::<usize>();
        if at_front {
            for b in batches.into_iter().rev() {
                inner.items.push_front(b);
            }
        } else {
            inner.items.extend(batches);
        }
        self.not_empty.notify_all();
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("queue lock").items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn content_bytes(&self) -> usize {
        self.inner.lock().expect("queue lock").content_bytes
    }

    /// Wakes blocked producers/consumers and fails future pushes.
    pub fn close(&self) {
        let mut inner = self.inner.lock().expect("queue lock");
        inner.closed = true;
        self.not_full.notify_all();
        self.not_empty.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicBool;
    use std::sync::Arc;

    fn batch(tag: &str) -> DataBatch {
        DataBatch::opaque(tag.as_bytes().to_vec())
    }

    #[test]
    fn fifo_order() {
        let q = EdgeQueue::new(10);
        let stop = AtomicBool::new(false);
        for i in 0..5 {
            q.push_blocking(batch(&i.to_string()), &stop).unwrap();
        }
        let tags: Vec<Vec<u8>> = std::iter::from_fn(|| q.try_pop()).map(|b| b.content).collect();
        assert_eq!(tags, vec![b"0".to_vec(), b"1".to_vec(), b"2".to_vec(), b"3".to_vec(), b"4".to_vec()]);
    }

    #[test]
    fn push_blocks_until_consumer_frees_space() {
        let q = Arc::new(EdgeQueue::new(2));
        let stop = Arc::new(AtomicBool::new(false));
        q.push_blocking(batch("a"), &stop).unwrap();
        q.push_blocking(batch("b"), &stop).unwrap();
        let q2 = q.clone();
        let stop2 = stop.clone();
        let producer = std::thread::spawn(move || {
            let t0 = std::time::Instant::now();
            q2.push_blocking(batch("c"), &stop2).unwrap();
            t0.elapsed()
        });
        std::thread::sleep(Duration::from_millis(60));
        assert_eq!(q.len(), 2, "producer must be blocked");
        let _ = q.try_pop();
        let waited = producer.join().unwrap();
        assert!(waited >= Duration::from_millis(40), "{waited:?}");
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn depth_never_exceeds_capacity() {
        let q = Arc::new(EdgeQueue::new(8));
        let stop = Arc::new(AtomicBool::new(false));
        let producer = {
            let q = q.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                for i in 0..200 {
                    q.push_blocking(batch(&i.to_string()), &stop).unwrap();
                }
            })
        };
        let mut popped = 0;
        while popped < 200 {
            assert!(q.len() <= 8);
            if q.pop_timeout(Duration::from_millis(20)).is_some() {
                popped += 1;
            }
        }
        producer.join().unwrap();
    }

    #[test]
    fn peek_keeps_items_ack_removes() {
        let q = EdgeQueue::new(10);
        let stop = AtomicBool::new(false);
        let mut pushed_ids = Vec::new();
        for i in 0..4 {
            let b = batch(&i.to_string());
            pushed_ids.push(b.id().to_string());
            q.push_blocking(b, &stop).unwrap();
        }
        let peeked = q.peek_upto(10);
        assert_eq!(peeked.len(), 4);
        assert_eq!(q.len(), 4, "peek does not remove");
        let acked: std::collections::HashSet<String> =
            pushed_ids[..2].iter().cloned().collect();
        assert_eq!(q.remove_ids(&acked), 2);
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn inject_front_and_back_preserve_order() {
        let q = EdgeQueue::new(10);
        let stop = AtomicBool::new(false);
        q.push_blocking(batch("new1"), &stop).unwrap();
        q.inject(vec![batch("old1"), batch("old2")], true);
        q.inject(vec![batch("tail")], false);
        let order: Vec<Vec<u8>> = std::iter::from_fn(|| q.try_pop()).map(|b| b.content).collect();
        assert_eq!(
            order,
            vec![b"old1".to_vec(), b"old2".to_vec(), b"new1".to_vec(), b"tail".to_vec()]
        );
    }

    #[test]
    fn close_unblocks_producer() {
        let q = Arc::new(EdgeQueue::new(1));
        let stop = Arc::new(AtomicBool::new(false));
        q.push_blocking(batch("a"), &stop).unwrap();
        let q2 = q.clone();
        let stop2 = stop.clone();
        let producer =
            std::thread::spawn(move || q2.push_blocking(batch("b"), &stop2).is_err());
        std::thread::sleep(Duration::from_millis(30));
        q.close();
        assert!(producer.join().unwrap(), "push after close errors out");
    }

    #[test]
    fn content_bytes_tracks_payloads() {
        let q = EdgeQueue::new(10);
        let stop = AtomicBool::new(false);
        q.push_blocking(DataBatch::opaque(vec![0u8; 100]), &stop).unwrap();
        q.push_blocking(DataBatch::opaque(vec![0u8; 50]), &stop).unwrap();
        assert_eq!(q.content_bytes(), 150);
        let _ = q.try_pop();
        assert_eq!(q.content_bytes(), 50);
        let _ = q.drain_all();
        assert_eq!(q.content_bytes(), 0);
    }
}
