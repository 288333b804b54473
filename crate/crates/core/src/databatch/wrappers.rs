// SPDX-License-Identifier: Apache-2.0

//! Automatic data wrappers converting among the three data models.
//!
//! Conversions are exact round-trips: `batch_to_stream(stream_to_batch(s))`
//! replays `s` in order, and `file_to_batch(batch_to_file(b))` reconstructs
//! `b` bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use super::{
    new_batch_id, now_iso, BatchError, DataBatch, EventTuple, FileRef, WindowPolicy,
    ATTR_BATCH_COUNT, ATTR_BATCH_CREATED, ATTR_BATCH_ID,
};

/// Accumulates an event stream into micro-batches per a window policy.
///
/// Single-consumer: one instance sits on one processor output.
pub struct WindowAccumulator {
    policy: WindowPolicy,
    pending: Vec<EventTuple>,
    window_opened: Option<Instant>,
}

impl WindowAccumulator {
    pub fn new(policy: WindowPolicy) -> Self {
        Self {
            policy,
            pending: Vec::new(),
            window_opened: None,
        }
    }

    /// Feeds one tuple; returns a closed batch when the window fills.
    pub fn push(&mut self, tuple: EventTuple) -> Option<DataBatch> {
        if self.pending.is_empty() {
            self.window_opened = Some(Instant::now());
        }
        self.pending.push(tuple);
        match self.policy {
            WindowPolicy::Count { n, .. } if self.pending.len() >= n => Some(self.close()),
            WindowPolicy::Time { duration_ms, .. }
                if self.elapsed_ms() >= duration_ms && !self.pending.is_empty() =>
            {
                Some(self.close())
            }
            _ => None,
        }
    }

    /// Closes a time window that expired between arrivals. Count windows
    /// never close here.
    pub fn poll_time(&mut self) -> Option<DataBatch> {
        match self.policy {
            WindowPolicy::Time { duration_ms, .. }
                if !self.pending.is_empty() && self.elapsed_ms() >= duration_ms =>
            {
                Some(self.close())
            }
            _ => None,
        }
    }

    /// End-of-stream: emits the partial window if the policy flushes on close.
    pub fn flush(&mut self) -> Option<DataBatch> {
        if self.pending.is_empty() || !self.policy.flush_on_close() {
            self.pending.clear();
            return None;
        }
        Some(self.close())
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    fn elapsed_ms(&self) -> u64 {
        self.window_opened
            .map(|t| t.elapsed().as_millis() as u64)
            .unwrap_or(0)
    }

    fn close(&mut self) -> DataBatch {
        let tuples = std::mem::take(&mut self.pending);
        self.window_opened = None;
        DataBatch::from_tuples(&tuples)
    }
}

/// Converts a finite event stream into micro-batches per the window policy.
pub fn stream_to_batch(
    events: impl IntoIterator<Item = EventTuple>,
    policy: &WindowPolicy,
) -> Result<Vec<DataBatch>, BatchError> {
    policy.validate()?;
    let mut acc = WindowAccumulator::new(policy.clone());
    let mut out = Vec::new();
    for ev in events {
        if let Some(b) = acc.push(ev) {
            out.push(b);
        }
    }
    if let Some(b) = acc.flush() {
        out.push(b);
    }
    Ok(out)
}

/// Replays the tuples stored in a batch, in order.
///
/// Fails if any line is not valid tuple JSON or the line count disagrees
/// with `batch.count`.
pub fn batch_to_stream(batch: &DataBatch) -> Result<Vec<EventTuple>, BatchError> {
    let declared = batch.count()?;
    let mut tuples = Vec::with_capacity(declared);
    for (idx, line) in batch
        .content
        .split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .enumerate()
    {
        let t: EventTuple = serde_json::from_slice(line)
            .map_err(|source| BatchError::MalformedTuple {
                line: idx + 1,
                source,
            })?;
        tuples.push(t);
    }
    if tuples.len() != declared {
        return Err(BatchError::CountMismatch {
            declared,
            actual: tuples.len(),
        });
    }
    Ok(tuples)
}

/// Writes a batch to `dir` as a content file plus a `.attrs.json` sidecar.
pub fn batch_to_file(batch: &DataBatch, dir: &Path) -> Result<FileRef, BatchError> {
    let io_err = |path: &Path, source| BatchError::Io {
        path: path.display().to_string(),
        source,
    };
    let path = dir.join(format!("{}.batch", batch.id()));
    let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
    f.write_all(&batch.content).map_err(|e| io_err(&path, e))?;
    f.flush().map_err(|e| io_err(&path, e))?;

    let sidecar = sidecar_path(&path);
    let attrs = serde_json::to_vec_pretty(&batch.attributes).expect("attrs are json");
    fs::write(&sidecar, attrs).map_err(|e| io_err(&sidecar, e))?;

    Ok(FileRef {
        path,
        size_bytes: batch.content.len() as u64,
    })
}

/// Reads a batch back from the filesystem.
///
/// A file without a sidecar is treated as externally produced: a fresh
/// attribute map is synthesized with `batch.count = "0"` and a new id.
pub fn file_to_batch(file_ref: &FileRef) -> Result<DataBatch, BatchError> {
    let content = fs::read(&file_ref.path).map_err(|source| BatchError::Io {
        path: file_ref.path.display().to_string(),
        source,
    })?;
    let sidecar = sidecar_path(&file_ref.path);
    let attributes: BTreeMap<String, String> = match fs::read(&sidecar) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| BatchError::Io {
            path: sidecar.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?,
        Err(_) => {
            let mut attrs = BTreeMap::new();
            attrs.insert(ATTR_BATCH_ID.to_string(), new_batch_id());
            attrs.insert(ATTR_BATCH_CREATED.to_string(), now_iso());
            attrs.insert(ATTR_BATCH_COUNT.to_string(), "0".to_string());
            attrs
        }
    };
    Ok(DataBatch {
        attributes,
        content,
    })
}

fn sidecar_path(content_path: &Path) -> std::path::PathBuf {
    let mut name = content_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".attrs.json");
    content_path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tuples(n: usize) -> Vec<EventTuple> {
        (0..n)
            .map(|i| EventTuple::new(format!("s{i}"), i as f64 * 0.5, "u", i as i64))
            .collect()
    }

    #[test]
    fn count_window_boundaries() {
        // 10 events, n=4, flush-on-close: 3 batches of [4, 4, 2].
        let batches = stream_to_batch(tuples(10), &WindowPolicy::count(4)).unwrap();
        let counts: Vec<usize> = batches.iter().map(|b| b.count().unwrap()).collect();
        assert_eq!(counts, vec![4, 4, 2]);
    }

    #[test]
    fn empty_stream_yields_no_batches() {
        let batches = stream_to_batch(tuples(0), &WindowPolicy::count(4)).unwrap();
        assert!(batches.is_empty());
    }

    #[test]
    fn no_flush_discards_partial() {
        let policy = WindowPolicy::Count {
            n: 4,
            flush_on_close: false,
        };
        let batches = stream_to_batch(tuples(10), &policy).unwrap();
        let counts: Vec<usize> = batches.iter().map(|b| b.count().unwrap()).collect();
        assert_eq!(counts, vec![4, 4]);
    }

    #[test]
    fn stream_roundtrip_preserves_order() {
        let input = tuples(6);
        let batches = stream_to_batch(input.clone(), &WindowPolicy::count(3)).unwrap();
        assert_eq!(batches.len(), 2);
        let mut replayed = Vec::new();
        for b in &batches {
            replayed.extend(batch_to_stream(b).unwrap());
        }
        assert_eq!(replayed, input);
    }

    #[test]
    fn count_mismatch_is_integrity_error() {
        let mut b = DataBatch::from_tuples(&tuples(2));
        b.set_attribute(ATTR_BATCH_COUNT, "3");
        match batch_to_stream(&b) {
            Err(BatchError::CountMismatch {
                declared: 3,
                actual: 2,
            }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_the_line() {
        let mut b = DataBatch::from_tuples(&tuples(2));
        b.content = b"{\"n\":\"a\",\"v\":1.0,\"u\":\"\",\"t\":0}\nnot json\n".to_vec();
        match batch_to_stream(&b) {
            Err(BatchError::MalformedTuple { line: 2, .. }) => {}
            other => panic!("expected malformed line 2, got {other:?}"),
        }
    }

    #[test]
    fn file_roundtrip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let b = DataBatch::from_tuples(&tuples(5));
        let fref = batch_to_file(&b, dir.path()).unwrap();
        assert_eq!(fref.size_bytes, b.content.len() as u64);
        let back = file_to_batch(&fref).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn empty_content_makes_zero_byte_file() {
        let dir = tempfile::tempdir().unwrap();
        let b = DataBatch::opaque(Vec::new());
        let fref = batch_to_file(&b, dir.path()).unwrap();
        assert_eq!(fref.size_bytes, 0);
        assert_eq!(file_to_batch(&fref).unwrap(), b);
    }

    #[test]
    fn missing_sidecar_synthesizes_opaque_attrs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("external.bin");
        fs::write(&path, b"raw bytes").unwrap();
        let b = file_to_batch(&FileRef {
            path,
            size_bytes: 9,
        })
        .unwrap();
        assert_eq!(b.count().unwrap(), 0);
        assert!(!b.id().is_empty());
        assert_eq!(b.content, b"raw bytes");
    }

    #[test]
    fn missing_file_is_io_error() {
        let r = file_to_batch(&FileRef {
            path: "/nonexistent/echo/batch".into(),
            size_bytes: 0,
        });
        assert!(matches!(r, Err(BatchError::Io { .. })));
    }

    #[test]
    fn time_window_closes_on_poll() {
        let policy = WindowPolicy::Time {
            duration_ms: 1,
            flush_on_close: true,
        };
        let mut acc = WindowAccumulator::new(policy);
        assert!(acc.push(EventTuple::new("a", 1.0, "", 0)).is_none());
        std::thread::sleep(std::time::Duration::from_millis(5));
        let closed = acc.poll_time().expect("expired window closes");
        assert_eq!(closed.count().unwrap(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_tuple() -> impl Strategy<Value = EventTuple> {
            (
                "[a-z]{1,8}",
                prop_oneof![proptest::num::f64::NORMAL, Just(0.0)],
                "[a-zA-Z%/]{0,4}",
                0i64..=4_102_444_800_000,
            )
                .prop_map(|(n, v, u, t)| EventTuple::new(n, v, u, t))
        }

        proptest! {
            // Conservation and order through stream->batch->stream for any
            // window size.
            #[test]
            fn stream_batch_stream_identity(
                tuples in proptest::collection::vec(arb_tuple(), 0..200),
                n in 1usize..40,
            ) {
                let batches = stream_to_batch(tuples.clone(), &WindowPolicy::count(n)).unwrap();
                let replayed: Vec<EventTuple> = batches
                    .iter()
                    .flat_map(|b| batch_to_stream(b).unwrap())
                    .collect();
                prop_assert_eq!(replayed, tuples);
            }

            #[test]
            fn file_roundtrip_identity(tuples in proptest::collection::vec(arb_tuple(), 0..50)) {
                let dir = tempfile::tempdir().unwrap();
                let b = DataBatch::from_tuples(&tuples);
                let back = file_to_batch(&batch_to_file(&b, dir.path()).unwrap()).unwrap();
                prop_assert_eq!(back, b);
            }
        }
    }
}
