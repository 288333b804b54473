// SPDX-License-Identifier: Apache-2.0

//! Blocking HTTP client helpers. Statuses are returned, not raised; only
//! transport failures (refused, timeout, reset) surface as errors so callers
//! can tell "peer said no" from "peer unreachable".

use std::time::Duration;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::httpd::FROM_DEVICE_HEADER;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("transport to {url}: {detail}")]
    Transport { url: String, detail: String },
    #[error("bad response body from {url}: {detail}")]
    BadBody { url: String, detail: String },
}

#[derive(Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    /// Identity stamped on requests for the reachability shim.
    from_device: Option<String>,
}

impl HttpClient {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .max_response_header_size(64 * 1024)
            .build()
            .into();
        Self {
            agent,
            from_device: None,
        }
    }

    pub fn with_from_device(mut self, device_id: impl Into<String>) -> Self {
        self.from_device = Some(device_id.into());
        self
    }

    pub fn get_json(&self, url: &str) -> Result<(u16, Value), HttpError> {
        self.get_json_timeout(url, None)
    }

    /// GET with a per-request timeout override (long-poll calls).
    pub fn get_json_timeout(
        &self,
        url: &str,
        timeout: Option<Duration>,
    ) -> Result<(u16, Value), HttpError> {
        let mut req = self.agent.get(url);
        if let Some(dev) = &self.from_device {
            req = req.header(FROM_DEVICE_HEADER, dev);
        }
        let req = match timeout {
            Some(t) => req.config().timeout_global(Some(t)).build(),
            None => req,
        };
        let resp = req.call().map_err(|e| transport(url, e))?;
        read_json(url, resp)
    }

    pub fn post_json<T: Serialize>(&self, url: &str, body: &T) -> Result<(u16, Value), HttpError> {
        self.post_json_timeout(url, body, None)
    }

    pub fn post_json_timeout<T: Serialize>(
        &self,
        url: &str,
        body: &T,
        timeout: Option<Duration>,
    ) -> Result<(u16, Value), HttpError> {
        let payload = serde_json::to_string(body).expect("request body is json");
        let mut req = self
            .agent
            .post(url)
            .header("Content-Type", "application/json");
        if let Some(dev) = &self.from_device {
            req = req.header(FROM_DEVICE_HEADER, dev);
        }
        let req = match timeout {
            Some(t) => req.config().timeout_global(Some(t)).build(),
            None => req,
        };
        let resp = req.send(&payload).map_err(|e| transport(url, e))?;
        read_json(url, resp)
    }

    pub fn delete(&self, url: &str) -> Result<(u16, Value), HttpError> {
        let mut req = self.agent.delete(url);
        if let Some(dev) = &self.from_device {
            req = req.header(FROM_DEVICE_HEADER, dev);
        }
        let resp = req.call().map_err(|e| transport(url, e))?;
        read_json(url, resp)
    }
}

fn transport(url: &str, e: ureq::Error) -> HttpError {
    HttpError::Transport {
        url: url.to_string(),
        detail: e.to_string(),
    }
}

fn read_json(url: &str, mut resp: ureq::http::Response<ureq::Body>) -> Result<(u16, Value), HttpError> {
    let status = resp.status().as_u16();
    let text = resp
        .body_mut()
        .with_config()
        .limit(64 * 1024 * 1024)
        .read_to_string()
        .map_err(|e| HttpError::BadBody {
            url: url.to_string(),
            detail: e.to_string(),
        })?;
    let value = if text.is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap_or(Value::String(text))
    };
    Ok((status, value))
}

/// `true` for HTTP errors worth retrying (transport-level only).
pub fn is_transport_error(e: &HttpError) -> bool {
    matches!(e, HttpError::Transport { .. })
}
