// SPDX-License-Identifier: Apache-2.0

//! The hybrid data model.
//!
//! A [`DataBatch`] is the platform's unit of data movement: a flat attribute
//! map plus opaque content bytes, treated as a micro-batch. Tuple-bearing
//! batches store newline-delimited JSON tuples in their content; opaque
//! batches (e.g. raw file bytes) carry `batch.count = "0"` and bypass the
//! tuple wrappers.

mod senml;
mod wrappers;

pub use senml::{parse_senml_lines, SenmlRecord};
pub use wrappers::{
    batch_to_file, batch_to_stream, file_to_batch, stream_to_batch, WindowAccumulator,
};

use std::collections::BTreeMap;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved attribute keys every batch carries.
pub const ATTR_BATCH_ID: &str = "batch.id";
pub const ATTR_BATCH_CREATED: &str = "batch.created";
pub const ATTR_BATCH_COUNT: &str = "batch.count";
/// Set on end-of-stream marker batches that propagate flush through a flow.
pub const ATTR_BATCH_EOS: &str = "batch.eos";
/// Per-edge sequence number stamped by the producing processor.
pub const ATTR_BATCH_SEQ: &str = "batch.seq";

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("malformed tuple on line {line}: {source}")]
    MalformedTuple {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("batch.count says {declared} tuples but content has {actual} lines")]
    CountMismatch { declared: usize, actual: usize },
    #[error("batch has no parseable batch.count attribute")]
    MissingCount,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid window policy: {0}")]
    InvalidPolicy(String),
}

/// One sensor observation: the tuple form data takes inside streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTuple {
    /// Measurement name.
    #[serde(rename = "n")]
    pub name: String,
    /// Measured value.
    #[serde(rename = "v")]
    pub value: f64,
    /// Unit string.
    #[serde(rename = "u")]
    pub unit: String,
    /// Event timestamp, epoch milliseconds.
    #[serde(rename = "t")]
    pub timestamp: i64,
}

impl EventTuple {
    pub fn new(name: impl Into<String>, value: f64, unit: impl Into<String>, ts: i64) -> Self {
        Self {
            name: name.into(),
            value,
            unit: unit.into(),
            timestamp: ts,
        }
    }

    /// Numeric field lookup used by CEP stages. `None` for string fields.
    pub fn numeric_field(&self, field: &str) -> Option<f64> {
        match field {
            "v" => Some(self.value),
            "t" => Some(self.timestamp as f64),
            _ => None,
        }
    }

    /// String field lookup used by CEP stages.
    pub fn string_field(&self, field: &str) -> Option<&str> {
        match field {
            "n" => Some(&self.name),
            "u" => Some(&self.unit),
            _ => None,
        }
    }
}

/// The unit of data movement: attributes plus opaque content bytes.
///
/// Immutable once constructed; cloning is cheap enough at desk scale and
/// keeps hand-off between threads trivially safe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataBatch {
    pub attributes: BTreeMap<String, String>,
    #[serde(with = "content_b64")]
    pub content: Vec<u8>,
}

mod content_b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], ser: S) -> Result<S::Ok, S::Error> {
        STANDARD.encode(bytes).serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(de)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

impl DataBatch {
    /// Builds a tuple batch: content is newline-delimited tuple JSON and
    /// `batch.count` reflects the number of tuples.
    pub fn from_tuples(tuples: &[EventTuple]) -> Self {
        let mut content = Vec::new();
        for t in tuples {
            content.extend_from_slice(serde_json::to_string(t).expect("tuple is json").as_bytes());
            content.push(b'\n');
        }
        Self::with_content(content, tuples.len())
    }

    /// Builds an opaque byte batch (`batch.count = "0"`).
    pub fn opaque(content: Vec<u8>) -> Self {
        Self::with_content(content, 0)
    }

    fn with_content(content: Vec<u8>, count: usize) -> Self {
        let mut attributes = BTreeMap::new();
        attributes.insert(ATTR_BATCH_ID.to_string(), new_batch_id());
        attributes.insert(ATTR_BATCH_CREATED.to_string(), now_iso());
        attributes.insert(ATTR_BATCH_COUNT.to_string(), count.to_string());
        Self {
            attributes,
            content,
        }
    }

    /// End-of-stream marker. Carries no content; links and queues move it
    /// like any other batch.
    pub fn eos_marker() -> Self {
        let mut b = Self::with_content(Vec::new(), 0);
        b.attributes
            .insert(ATTR_BATCH_EOS.to_string(), "true".to_string());
        b
    }

    pub fn is_eos(&self) -> bool {
        self.attributes.get(ATTR_BATCH_EOS).map(String::as_str) == Some("true")
    }

    pub fn id(&self) -> &str {
        self.attributes
            .get(ATTR_BATCH_ID)
            .map(String::as_str)
            .unwrap_or("")
    }

    /// Declared tuple count; zero for opaque batches.
    pub fn count(&self) -> Result<usize, BatchError> {
        self.attributes
            .get(ATTR_BATCH_COUNT)
            .and_then(|v| v.parse().ok())
            .ok_or(BatchError::MissingCount)
    }

    pub fn set_attribute(&mut self, key: impl Into<String>, val: impl Into<String>) {
        self.attributes.insert(key.into(), val.into());
    }
}

/// How a stream-to-batch wrapper closes windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum WindowPolicy {
    /// Close after `n` tuples.
    Count {
        n: usize,
        #[serde(default = "default_true")]
        flush_on_close: bool,
    },
    /// Close after `duration_ms` of processing time since the window opened.
    Time {
        duration_ms: u64,
        #[serde(default = "default_true")]
        flush_on_close: bool,
    },
}

fn default_true() -> bool {
    true
}

/// Default window applied when a processor does not configure one.
pub const DEFAULT_WINDOW_COUNT: usize = 50;

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy::Count {
            n: DEFAULT_WINDOW_COUNT,
            flush_on_close: true,
        }
    }
}

impl WindowPolicy {
    pub fn count(n: usize) -> Self {
        WindowPolicy::Count {
            n,
            flush_on_close: true,
        }
    }

    pub fn validate(&self) -> Result<(), BatchError> {
        match self {
            WindowPolicy::Count { n, .. } if *n < 1 => {
                Err(BatchError::InvalidPolicy("count_n must be >= 1".into()))
            }
            WindowPolicy::Time { duration_ms, .. } if *duration_ms < 1 => Err(
                BatchError::InvalidPolicy("duration_ms must be >= 1".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn flush_on_close(&self) -> bool {
        match self {
            WindowPolicy::Count { flush_on_close, .. }
            | WindowPolicy::Time { flush_on_close, .. } => *flush_on_close,
        }
    }
}

/// A live reference to a batch spilled to the filesystem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: std::path::PathBuf,
    pub size_bytes: u64,
}

pub fn new_batch_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

pub fn now_iso() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuple_batch_counts_and_ids() {
        let tuples = vec![
            EventTuple::new("taxi", 1.5, "km", 1000),
            EventTuple::new("taxi", 2.5, "km", 2000),
        ];
        let b = DataBatch::from_tuples(&tuples);
        assert_eq!(b.count().unwrap(), 2);
        assert!(!b.id().is_empty());
        assert!(b.attributes.contains_key(ATTR_BATCH_CREATED));
    }

    #[test]
    fn opaque_batch_has_zero_count() {
        let b = DataBatch::opaque(vec![1, 2, 3]);
        assert_eq!(b.count().unwrap(), 0);
        assert_eq!(b.content, vec![1, 2, 3]);
    }

    #[test]
    fn batch_serde_roundtrip_is_identity() {
        let b = DataBatch::from_tuples(&[EventTuple::new("x", -3.25, "", 0)]);
        let json = serde_json::to_string(&b).unwrap();
        let back: DataBatch = serde_json::from_str(&json).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn batch_ids_unique_across_one_million() {
        // Collision check on the id scheme.
        let mut seen = std::collections::HashSet::with_capacity(1_000_000);
        for _ in 0..1_000_000 {
            assert!(seen.insert(new_batch_id()));
        }
    }
}
