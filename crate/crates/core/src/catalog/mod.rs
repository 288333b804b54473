// SPDX-License-Identifier: Apache-2.0

//! The resource directory: a registry of every piece of system state.
//!
//! Items are keyed by hierarchical href paths (`/<kind>/<id>[/<sub>...]`)
//! and carry ordered `rel`/`val` metadata pairs. The store supports exact
//! get, prefix queries, a long-poll change feed, and full-item
//! last-writer-wins replacement; fine-grained state lives in sub-items so
//! updates stay small.

mod client;
mod service;
mod store;

pub use client::{CatalogClient, CatalogClientError};
pub use service::{CatalogConfig, CatalogService};
pub use store::CatalogStore;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maintained by the catalog on every write.
pub const REL_LAST_UPDATED: &str = "urn:echo:rel:lastUpdated";
/// Added by the staleness sweeper to device/worker items that stopped
/// heartbeating.
pub const REL_STALE: &str = "urn:echo:rel:stale";
/// Lease duration for advisory lock items; expired locks count as absent.
pub const REL_TTL_MS: &str = "urn:echo:rel:ttlMs";

pub const REL_CLASS: &str = "urn:echo:rel:class";
pub const REL_CPU_MILLIS: &str = "urn:echo:rel:cpuMillis";
pub const REL_MEM_MB: &str = "urn:echo:rel:memMb";
pub const REL_VISIBILITY: &str = "urn:echo:rel:visibility";
pub const REL_REACHABLE_FROM: &str = "urn:echo:rel:reachableFrom";
pub const REL_TAGS: &str = "urn:echo:rel:tags";
pub const REL_ENDPOINT: &str = "urn:echo:rel:endpoint";
pub const REL_PARENT_DEVICE: &str = "urn:echo:rel:parentDevice";
pub const REL_STATE: &str = "urn:echo:rel:state";
pub const REL_PROFILE: &str = "urn:echo:rel:profile";
pub const REL_THROTTLE: &str = "urn:echo:rel:cpuTokensPerSec";
pub const REL_STARTED: &str = "urn:echo:rel:started";
pub const REL_STOPPED: &str = "urn:echo:rel:stopped";
pub const REL_WARNING: &str = "urn:echo:rel:warning";
/// Generic JSON payload value for records and metrics documents.
pub const REL_JSON: &str = "urn:echo:rel:json";
/// Plain scalar value for single-metric sub-items (CPUUtil, MemUtil).
pub const REL_VALUE: &str = "urn:echo:rel:value";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid href {href:?}: {reason}")]
    InvalidHref { href: String, reason: String },
    #[error("href {0} already present")]
    AlreadyPresent(String),
    #[error("payload is not valid catalog JSON: {0}")]
    Parse(#[from] serde_json::Error),
}

/// One `rel`/`val` metadata pair. Duplicate `rel` keys are permitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub rel: String,
    pub val: String,
}

impl Relation {
    pub fn new(rel: impl Into<String>, val: impl Into<String>) -> Self {
        Self {
            rel: rel.into(),
            val: val.into(),
        }
    }
}

/// One registered asset: an href plus its metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    pub href: String,
    #[serde(rename = "item-metadata")]
    pub metadata: Vec<Relation>,
}

impl CatalogItem {
    pub fn new(href: impl Into<String>) -> Self {
        Self {
            href: href.into(),
            metadata: Vec::new(),
        }
    }

    pub fn with(mut self, rel: impl Into<String>, val: impl Into<String>) -> Self {
        self.metadata.push(Relation::new(rel, val));
        self
    }

    /// First value for `rel`, if any.
    pub fn rel(&self, rel: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|r| r.rel == rel)
            .map(|r| r.val.as_str())
    }

    /// Replaces every occurrence of `rel` with a single pair.
    pub fn set_rel(&mut self, rel: &str, val: impl Into<String>) {
        self.metadata.retain(|r| r.rel != rel);
        self.metadata.push(Relation::new(rel, val));
    }

    pub fn last_updated(&self) -> Option<DateTime<Utc>> {
        self.rel(REL_LAST_UPDATED)
            .and_then(|v| DateTime::parse_from_rfc3339(v).ok())
            .map(|dt| dt.with_timezone(&Utc))
    }

    pub fn is_stale(&self) -> bool {
        self.rel(REL_STALE) == Some("true")
    }

    /// `kind` per the href hierarchy: the first path segment.
    pub fn kind(&self) -> &str {
        self.href.trim_start_matches('/').split('/').next().unwrap_or("")
    }
}

/// Item kinds admitted at the first level of the href hierarchy.
pub const HREF_KINDS: [&str; 4] = ["device", "worker", "dataflow", "service"];

/// Validates an href against the path grammar:
/// `/<kind>/<id>[/<sub-category>...]` with no whitespace anywhere.
pub fn validate_href(href: &str) -> Result<(), CatalogError> {
    let fail = |reason: &str| {
        Err(CatalogError::InvalidHref {
            href: href.to_string(),
            reason: reason.to_string(),
        })
    };
    if href.is_empty() {
        return fail("empty");
    }
    if !href.starts_with('/') {
        return fail("must begin with '/'");
    }
    if href.chars().any(char::is_whitespace) {
        return fail("whitespace forbidden");
    }
    let segments: Vec<&str> = href[1..].split('/').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return fail("empty path segment");
    }
    if segments.len() < 2 {
        return fail("need at least /<kind>/<id>");
    }
    if !HREF_KINDS.contains(&segments[0]) {
        return fail("first segment must be one of device|worker|dataflow|service");
    }
    Ok(())
}

pub fn format_ts(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn href_grammar() {
        validate_href("/device/e97e0195acf4").unwrap();
        validate_href("/device/e97e0195acf4/CPUUtil").unwrap();
        validate_href("/service/master").unwrap();
        assert!(validate_href("bad href").is_err());
        assert!(validate_href("/device/a b").is_err());
        assert!(validate_href("/device").is_err());
        assert!(validate_href("/gadget/x").is_err());
        assert!(validate_href("/device//x").is_err());
        assert!(validate_href("").is_err());
    }

    #[test]
    fn item_rel_accessors() {
        let mut item = CatalogItem::new("/device/a").with("urn:echo:rel:cores", "4");
        assert_eq!(item.rel("urn:echo:rel:cores"), Some("4"));
        item.set_rel("urn:echo:rel:cores", "8");
        assert_eq!(item.rel("urn:echo:rel:cores"), Some("8"));
        assert_eq!(item.metadata.len(), 1);
        assert_eq!(item.kind(), "device");
    }

    #[test]
    fn item_json_shape_matches_wire_format() {
        let item = CatalogItem::new("/device/a").with("r", "v");
        let json = serde_json::to_value(&item).unwrap();
        assert!(json.get("item-metadata").is_some());
        assert_eq!(json["href"], "/device/a");
    }
}
