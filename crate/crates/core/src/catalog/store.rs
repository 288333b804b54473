// SPDX-License-Identifier: Apache-2.0

//! In-memory catalog store with change signaling, staleness sweeping, and
//! optional JSON snapshot persistence.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};

use super::{
    format_ts, validate_href, CatalogError, CatalogItem, REL_LAST_UPDATED, REL_STALE, REL_TTL_MS,
};

pub struct CatalogStore {
    items: RwLock<BTreeMap<String, Entry>>,
    /// Bumped on every mutation; watchers block on it.
    epoch: Mutex<u64>,
    changed: Condvar,
}

#[derive(Clone)]
struct Entry {
    item: CatalogItem,
    updated: DateTime<Utc>,
}

impl Default for CatalogStore {
    fn default() -> Self {
        Self::new()
    }
}

impl CatalogStore {
    pub fn new() -> Self {
        Self {
            items: RwLock::new(BTreeMap::new()),
            epoch: Mutex::new(0),
            changed: Condvar::new(),
        }
    }

    /// Registers (or fully replaces: last-writer-wins) an item, refreshing
    /// its lastUpdated relation. Returns `true` when an item was replaced.
    pub fn register(&self, item: CatalogItem) -> Result<bool, CatalogError> {
        validate_href(&item.href)?;
        let entry = stamp(item);
        let replaced = {
            let mut items = self.items.write().expect("catalog lock");
            items.insert(entry.item.href.clone(), entry).is_some()
        };
        self.notify();
        Ok(replaced)
    }

    /// Registers only when the href is absent (or its existing item has an
    /// expired TTL). Returns `true` when the write happened. Used for
    /// advisory locks.
    pub fn register_if_absent(&self, item: CatalogItem) -> Result<bool, CatalogError> {
        validate_href(&item.href)?;
        let entry = stamp(item);
        let acquired = {
            let mut items = self.items.write().expect("catalog lock");
            match items.get(&entry.item.href) {
                Some(existing) if !expired(existing) => false,
                _ => {
                    items.insert(entry.item.href.clone(), entry);
                    true
                }
            }
        };
        if acquired {
            self.notify();
        }
        Ok(acquired)
    }

    pub fn get(&self, href: &str) -> Option<CatalogItem> {
        self.items
            .read()
            .expect("catalog lock")
            .get(href)
            .map(|e| e.item.clone())
    }

    /// All items whose href starts with `prefix`, sorted by href. The empty
    /// prefix returns the full catalog.
    pub fn query_prefix(&self, prefix: &str) -> Vec<CatalogItem> {
        let items = self.items.read().expect("catalog lock");
        items
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, e)| e.item.clone())
            .collect()
    }

    /// Deletes exactly `href` (sub-items are independent). Returns `false`
    /// when nothing was there.
    pub fn delete(&self, href: &str) -> bool {
        let removed = self
            .items
            .write()
            .expect("catalog lock")
            .remove(href)
            .is_some();
        if removed {
            self.notify();
        }
        removed
    }

    pub fn len(&self) -> usize {
        self.items.read().expect("catalog lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Items under `prefix` changed strictly after `since`. Blocks up to
    /// `timeout` when there are none yet.
    pub fn watch(
        &self,
        prefix: &str,
        since: DateTime<Utc>,
        timeout: Duration,
    ) -> Vec<CatalogItem> {
        let deadline = Instant::now() + timeout;
        loop {
            let epoch_before = *self.epoch.lock().expect("epoch lock");
            let hits: Vec<CatalogItem> = {
                let items = self.items.read().expect("catalog lock");
                items
                    .range(prefix.to_string()..)
                    .take_while(|(k, _)| k.starts_with(prefix))
                    .filter(|(_, e)| e.updated > since)
                    .map(|(_, e)| e.item.clone())
                    .collect()
            };
            if !hits.is_empty() {
                return hits;
            }
            let now = Instant::now();
            if now >= deadline {
                return Vec::new();
            }
            let guard = self.epoch.lock().expect("epoch lock");
            if *guard != epoch_before {
                continue;
            }
            let (_g, _timeout) = self
                .changed
                .wait_timeout(guard, deadline - now)
                .expect("epoch lock");
        }
    }

    /// Flags top-level device/worker items not refreshed within
    /// `stale_after` by adding a stale relation. The flag write deliberately
    /// preserves lastUpdated, so the next real heartbeat clears it.
    /// Returns the hrefs flagged this pass.
    pub fn sweep_stale(&self, stale_after: Duration) -> Vec<String> {
        let now = Utc::now();
        let threshold =
            chrono::Duration::from_std(stale_after).unwrap_or(chrono::Duration::seconds(15));
        let mut flagged = Vec::new();
        {
            let mut items = self.items.write().expect("catalog lock");
            for (href, entry) in items.iter_mut() {
                let top_level = entry.item.href.matches('/').count() == 2;
                let liveness_kind = matches!(entry.item.kind(), "device" | "worker");
                if !(top_level && liveness_kind) || entry.item.is_stale() {
                    continue;
                }
                if now - entry.updated > threshold {
                    entry.item.set_rel(REL_STALE, "true");
                    flagged.push(href.clone());
                }
            }
        }
        if !flagged.is_empty() {
            self.notify();
        }
        flagged
    }

    /// Serializes the full catalog to a JSON file. The lastUpdated relation
    /// carries each item's timestamp, so the snapshot is self-contained.
    pub fn save_snapshot(&self, path: &Path) -> std::io::Result<()> {
        let items: Vec<CatalogItem> = self.query_prefix("");
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&items)?)?;
        std::fs::rename(&tmp, path)
    }

    pub fn load_snapshot(&self, path: &Path) -> std::io::Result<usize> {
        let bytes = std::fs::read(path)?;
        let loaded: Vec<CatalogItem> = serde_json::from_slice(&bytes)?;
        let count = loaded.len();
        let mut items = self.items.write().expect("catalog lock");
        for item in loaded {
            let updated = item.last_updated().unwrap_or_else(Utc::now);
            items.insert(item.href.clone(), Entry { item, updated });
        }
        drop(items);
        self.notify();
        Ok(count)
    }

    fn notify(&self) {
        let mut epoch = self.epoch.lock().expect("epoch lock");
        *epoch += 1;
        self.changed.notify_all();
    }
}

fn stamp(mut item: CatalogItem) -> Entry {
    let updated = Utc::now();
    item.set_rel(REL_LAST_UPDATED, format_ts(updated));
    // A fresh write is never stale.
    item.metadata.retain(|r| r.rel != REL_STALE);
    Entry { item, updated }
}

fn expired(entry: &Entry) -> bool {
    match entry.item.rel(REL_TTL_MS).and_then(|v| v.parse::<i64>().ok()) {
        Some(ttl_ms) => Utc::now() - entry.updated > chrono::Duration::milliseconds(ttl_ms),
        None => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn item(href: &str, val: &str) -> CatalogItem {
        CatalogItem::new(href).with("urn:echo:rel:x", val)
    }

    #[test]
    fn register_then_get_returns_item_with_last_updated() {
        let store = CatalogStore::new();
        store
            .register(CatalogItem::new("/device/e97e0195acf4").with("urn:echo:rel:cores", "4"))
            .unwrap();
        let got = store.get("/device/e97e0195acf4").expect("present");
        assert_eq!(got.rel("urn:echo:rel:cores"), Some("4"));
        assert!(got.last_updated().is_some());
    }

    #[test]
    fn reregister_replaces_whole_item() {
        let store = CatalogStore::new();
        store.register(item("/device/a", "1")).unwrap();
        let replaced = store.register(item("/device/a", "2")).unwrap();
        assert!(replaced);
        assert_eq!(store.get("/device/a").unwrap().rel("urn:echo:rel:x"), Some("2"));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn malformed_href_rejected() {
        let store = CatalogStore::new();
        assert!(matches!(
            store.register(CatalogItem::new("bad href")),
            Err(CatalogError::InvalidHref { .. })
        ));
    }

    #[test]
    fn get_missing_is_none() {
        let store = CatalogStore::new();
        assert!(store.get("/device/unknown").is_none());
    }

    #[test]
    fn prefix_query_semantics() {
        let store = CatalogStore::new();
        for href in ["/device/a", "/device/b", "/dataflow/x"] {
            store.register(CatalogItem::new(href)).unwrap();
        }
        let hits = store.query_prefix("/device/");
        assert_eq!(
            hits.iter().map(|i| i.href.as_str()).collect::<Vec<_>>(),
            vec!["/device/a", "/device/b"]
        );
        assert_eq!(store.query_prefix("").len(), 3);
        assert!(store.query_prefix("/worker/").is_empty());
    }

    #[test]
    fn delete_is_exact_key() {
        let store = CatalogStore::new();
        store.register(CatalogItem::new("/device/x")).unwrap();
        store.register(CatalogItem::new("/device/x/CPUUtil")).unwrap();
        assert!(store.delete("/device/x"));
        assert!(!store.delete("/device/x"), "second delete reports missing");
        assert!(store.get("/device/x/CPUUtil").is_some(), "sub-item survives");
    }

    #[test]
    fn watch_sees_later_writes_and_times_out_quietly() {
        let store = Arc::new(CatalogStore::new());
        let t0 = Utc::now() - chrono::Duration::seconds(1);
        store.register(item("/device/a", "1")).unwrap();
        let hits = store.watch("/device/", t0, Duration::from_millis(50));
        assert_eq!(hits.len(), 1);

        // No writes after `since`: empty after the timeout.
        let now = Utc::now();
        let hits = store.watch("/device/", now, Duration::from_millis(40));
        assert!(hits.is_empty());

        // A write while blocked wakes the watcher.
        let s2 = store.clone();
        let h = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(30));
            s2.register(item("/device/b", "9")).unwrap();
        });
        let since = Utc::now();
        let hits = store.watch("/device/", since, Duration::from_secs(5));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].href, "/device/b");
        h.join().unwrap();
    }

    #[test]
    fn watch_returns_latest_version_only() {
        let store = CatalogStore::new();
        let t0 = Utc::now() - chrono::Duration::seconds(1);
        store.register(item("/device/a", "1")).unwrap();
        store.register(item("/device/a", "2")).unwrap();
        let hits = store.watch("/device/", t0, Duration::from_millis(10));
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].rel("urn:echo:rel:x"), Some("2"));
    }

    #[test]
    fn sweeper_flags_quiet_workers_without_touching_timestamp() {
        let store = CatalogStore::new();
        store.register(CatalogItem::new("/worker/w1")).unwrap();
        store.register(CatalogItem::new("/worker/w1/metrics")).unwrap();
        store.register(CatalogItem::new("/dataflow/d1")).unwrap();
        std::thread::sleep(Duration::from_millis(30));
        let flagged = store.sweep_stale(Duration::from_millis(10));
        assert_eq!(flagged, vec!["/worker/w1".to_string()]);
        let w = store.get("/worker/w1").unwrap();
        assert!(w.is_stale());
        // Dataflow items and sub-items are not liveness-swept.
        assert!(!store.get("/dataflow/d1").unwrap().is_stale());
        assert!(!store.get("/worker/w1/metrics").unwrap().is_stale());
        // A heartbeat clears the flag.
        store.register(CatalogItem::new("/worker/w1")).unwrap();
        assert!(!store.get("/worker/w1").unwrap().is_stale());
    }

    #[test]
    fn if_absent_respects_ttl() {
        let store = CatalogStore::new();
        let lock = CatalogItem::new("/dataflow/u1/lock").with(REL_TTL_MS, "40");
        assert!(store.register_if_absent(lock.clone()).unwrap());
        assert!(!store.register_if_absent(lock.clone()).unwrap());
        std::thread::sleep(Duration::from_millis(60));
        assert!(store.register_if_absent(lock).unwrap(), "expired lock is absent");
    }

    #[test]
    fn snapshot_roundtrip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cat.json");
        let store = CatalogStore::new();
        store.register(item("/device/a", "1")).unwrap();
        store.register(item("/worker/w", "2")).unwrap();
        store.save_snapshot(&path).unwrap();

        let restored = CatalogStore::new();
        assert_eq!(restored.load_snapshot(&path).unwrap(), 2);
        assert_eq!(restored.query_prefix(""), store.query_prefix(""));
    }

    #[test]
    fn last_writer_wins_under_concurrency() {
        // Writers on distinct hrefs never lose items; a torn read is a bug.
        let store = Arc::new(CatalogStore::new());
        let mut handles = Vec::new();
        for w in 0..4 {
            let s = store.clone();
            handles.push(std::thread::spawn(move || {
                for i in 0..50 {
                    s.register(item(&format!("/device/d{w}"), &i.to_string())).unwrap();
                    let got = s.get(&format!("/device/d{w}")).unwrap();
                    assert!(got.rel("urn:echo:rel:x").is_some());
                    assert!(got.last_updated().is_some());
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        for w in 0..4 {
            assert_eq!(
                store.get(&format!("/device/d{w}")).unwrap().rel("urn:echo:rel:x"),
                Some("49")
            );
        }
    }
}
