// SPDX-License-Identifier: Apache-2.0

//! Minimal synchronous HTTP service glue shared by every echo service.
//!
//! Thread-per-request on a small worker pool. Handlers may block (long-poll
//! reads, backpressured queue writes); the pool size bounds concurrent
//! blocked requests, which is plenty at testbed scale.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Serialize;

/// Header carrying the connecting device's identity, consulted by the
/// testbed's connection-gating shim.
pub const FROM_DEVICE_HEADER: &str = "X-Echo-From-Device";

#[derive(Debug)]
pub struct Request {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub body: Vec<u8>,
    /// Value of [`FROM_DEVICE_HEADER`], when present.
    pub from_device: Option<String>,
}

impl Request {
    pub fn json<T: serde::de::DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_slice(&self.body)
    }

    pub fn query_param(&self, key: &str) -> Option<&str> {
        self.query.get(key).map(String::as_str)
    }

    /// Path segments, e.g. `/fragments/f1/start` -> `["fragments","f1","start"]`.
    pub fn segments(&self) -> Vec<&str> {
        self.path.split('/').filter(|s| !s.is_empty()).collect()
    }
}

#[derive(Debug)]
pub struct Response {
    pub status: u16,
    pub body: Vec<u8>,
    pub content_type: &'static str,
}

impl Response {
    pub fn json<T: Serialize>(status: u16, value: &T) -> Self {
        Self {
            status,
            body: serde_json::to_vec(value).expect("response is json"),
            content_type: "application/json",
        }
    }

    pub fn error(status: u16, message: impl Into<String>) -> Self {
        Self::json(status, &serde_json::json!({ "error": message.into() }))
    }

    pub fn empty(status: u16) -> Self {
        Self {
            status,
            body: Vec::new(),
            content_type: "application/json",
        }
    }

    pub fn not_found() -> Self {
        Self::error(404, "not found")
    }
}

pub type Handler = Arc<dyn Fn(Request) -> Response + Send + Sync + 'static>;

/// A running HTTP server; dropping it (or calling [`HttpServer::shutdown`])
/// stops the worker pool.
pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
    stopping: Arc<AtomicBool>,
}

impl HttpServer {
    /// Binds `listen` (use port 0 for an OS-assigned port) and serves
    /// requests through `handler` on `n_workers` threads.
    pub fn start(listen: &str, n_workers: usize, handler: Handler) -> std::io::Result<Self> {
        let server = Arc::new(
            tiny_http::Server::http(listen)
                .map_err(|e| std::io::Error::other(format!("bind {listen}: {e}")))?,
        );
        let addr = match server.server_addr() {
            tiny_http::ListenAddr::IP(a) => a,
            _ => return Err(std::io::Error::other("unexpected listen address type")),
        };
        let stopping = Arc::new(AtomicBool::new(false));
        let workers = (0..n_workers.max(1))
            .map(|i| {
                let server = server.clone();
                let handler = handler.clone();
                let stopping = stopping.clone();
                std::thread::Builder::new()
                    .name(format!("http-{i}"))
                    .spawn(move || {
                        while !stopping.load(Ordering::Relaxed) {
                            let raw = match server.recv() {
                                Ok(r) => r,
                                Err(_) => break,
                            };
                            serve_one(raw, &handler);
                        }
                    })
                    .expect("spawn http worker")
            })
            .collect();
        Ok(Self {
            server,
            addr,
            workers,
            stopping,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(&mut self) {
        self.stopping.store(true, Ordering::Relaxed);
        // unblock() wakes exactly one blocked recv; fire once per worker.
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_one(mut raw: tiny_http::Request, handler: &Handler) {
    let method = raw.method().to_string();
    let (path, query) = split_url(raw.url());
    let from_device = raw
        .headers()
        .iter()
        .find(|h| h.field.as_str().as_str().eq_ignore_ascii_case(FROM_DEVICE_HEADER))
        .map(|h| h.value.as_str().to_string());
    let mut body = Vec::new();
    if raw.as_reader().read_to_end(&mut body).is_err() {
        let _ = raw.respond(tiny_http::Response::empty(400));
        return;
    }
    let req = Request {
        method,
        path,
        query,
        body,
        from_device,
    };
    let resp = handler(req);
    let out = tiny_http::Response::from_data(resp.body)
        .with_status_code(resp.status)
        .with_header(
            format!("Content-Type: {}", resp.content_type)
                .parse::<tiny_http::Header>()
                .expect("valid header"),
        );
    let _ = raw.respond(out);
}

fn split_url(url: &str) -> (String, BTreeMap<String, String>) {
    let (path, qs) = match url.split_once('?') {
        Some((p, q)) => (p, q),
        None => (url, ""),
    };
    let mut query = BTreeMap::new();
    for pair in qs.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        query.insert(percent_decode(k), percent_decode(v));
    }
    (percent_decode(path), query)
}

/// Percent-encodes everything outside RFC 3986 unreserved characters.
pub fn percent_encode(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'.' | b'_' | b'~' => {
                out.push(b as char)
            }
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

pub fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() + 1 && i + 2 <= bytes.len() - 1 + 1 {
            if let (Some(h), Some(l)) = (
                bytes.get(i + 1).and_then(|c| (*c as char).to_digit(16)),
                bytes.get(i + 2).and_then(|c| (*c as char).to_digit(16)),
            ) {
                out.push((h * 16 + l) as u8);
                i += 3;
                continue;
            }
        }
        if bytes[i] == b'+' {
            out.push(b' ');
        } else {
            out.push(bytes[i]);
        }
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_roundtrip() {
        let s = "/device/e97e 0195acf4/CPU%Util+x";
        assert_eq!(percent_decode(&percent_encode(s)), s);
    }

    #[test]
    fn url_split_decodes_query() {
        let (path, q) = split_url("/cat/items?href=%2Fdevice%2Fa&x=1");
        assert_eq!(path, "/cat/items");
        assert_eq!(q["href"], "/device/a");
        assert_eq!(q["x"], "1");
    }

    #[test]
    fn server_round_trip() {
        let handler: Handler = Arc::new(|req: Request| {
            assert_eq!(req.method, "POST");
            Response::json(
                200,
                &serde_json::json!({"path": req.path, "len": req.body.len()}),
            )
        });
        let mut srv = HttpServer::start("127.0.0.1:0", 2, handler).unwrap();
        let client = crate::httpc::HttpClient::new(std::time::Duration::from_secs(2));
        let (status, v) = client
            .post_json(
                &format!("{}/x/y", srv.url()),
                &serde_json::json!({"a": 1}),
            )
            .unwrap();
        assert_eq!(status, 200);
        assert_eq!(v["path"], "/x/y");
        srv.shutdown();
    }
}
