// SPDX-License-Identifier: Apache-2.0

//! Typed client for the catalog REST API.

use std::time::Duration;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::httpc::{HttpClient, HttpError};
use crate::httpd::percent_encode;

use super::{format_ts, CatalogItem};

#[derive(Debug, Error)]
pub enum CatalogClientError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("catalog rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("unexpected catalog response: {0}")]
    Protocol(String),
}

#[derive(Clone)]
pub struct CatalogClient {
    base: String,
    http: HttpClient,
}

impl CatalogClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            http: HttpClient::new(Duration::from_secs(10)),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn register(&self, item: &CatalogItem) -> Result<(), CatalogClientError> {
        let (status, body) = self.http.post_json(&format!("{}/cat", self.base), item)?;
        if status == 200 || status == 201 {
            Ok(())
        } else {
            Err(rejected(status, &body))
        }
    }

    /// Lease-aware conditional write. `Ok(true)` means acquired.
    pub fn register_if_absent(&self, item: &CatalogItem) -> Result<bool, CatalogClientError> {
        let (status, body) = self
            .http
            .post_json(&format!("{}/cat?if_absent=true", self.base), item)?;
        match status {
            200 | 201 => Ok(true),
            409 => Ok(false),
            _ => Err(rejected(status, &body)),
        }
    }

    pub fn get(&self, href: &str) -> Result<Option<CatalogItem>, CatalogClientError> {
        let url = format!("{}/cat/items?href={}", self.base, percent_encode(href));
        let (status, body) = self.http.get_json(&url)?;
        match status {
            200 => Ok(Some(parse_item(&body)?)),
            404 => Ok(None),
            _ => Err(rejected(status, &body)),
        }
    }

    pub fn query_prefix(&self, prefix: &str) -> Result<Vec<CatalogItem>, CatalogClientError> {
        let url = format!("{}/cat/items?prefix={}", self.base, percent_encode(prefix));
        let (status, body) = self.http.get_json(&url)?;
        if status != 200 {
            return Err(rejected(status, &body));
        }
        parse_items(&body)
    }

    /// `Ok(true)` deleted, `Ok(false)` was not there.
    pub fn delete(&self, href: &str) -> Result<bool, CatalogClientError> {
        let url = format!("{}/cat/items?href={}", self.base, percent_encode(href));
        let (status, body) = self.http.delete(&url)?;
        match status {
            204 => Ok(true),
            404 => Ok(false),
            _ => Err(rejected(status, &body)),
        }
    }

    /// Long-poll change feed; blocks server-side up to `wait`.
    pub fn watch(
        &self,
        prefix: &str,
        since: DateTime<Utc>,
        wait: Duration,
    ) -> Result<Vec<CatalogItem>, CatalogClientError> {
        let url = format!(
            "{}/cat/watch?prefix={}&since={}&wait_ms={}",
            self.base,
            percent_encode(prefix),
            percent_encode(&format_ts(since)),
            wait.as_millis()
        );
        let (status, body) = self
            .http
            .get_json_timeout(&url, Some(wait + Duration::from_secs(10)))?;
        if status != 200 {
            return Err(rejected(status, &body));
        }
        parse_items(&body)
    }

    /// True when the catalog answers its health route.
    pub fn is_healthy(&self) -> bool {
        matches!(
            self.http.get_json(&format!("{}/health", self.base)),
            Ok((200, _))
        )
    }
}

fn rejected(status: u16, body: &serde_json::Value) -> CatalogClientError {
    CatalogClientError::Rejected {
        status,
        message: body
            .get("error")
            .and_then(|e| e.as_str())
            .unwrap_or("unknown error")
            .to_string(),
    }
}

fn parse_item(body: &serde_json::Value) -> Result<CatalogItem, CatalogClientError> {
    serde_json::from_value(body.clone())
        .map_err(|e| CatalogClientError::Protocol(format!("bad item: {e}")))
}

fn parse_items(body: &serde_json::Value) -> Result<Vec<CatalogItem>, CatalogClientError> {
    serde_json::from_value(
        body.get("items")
            .cloned()
            .unwrap_or(serde_json::Value::Array(Vec::new())),
    )
    .map_err(|e| CatalogClientError::Protocol(format!("bad items: {e}")))
}
