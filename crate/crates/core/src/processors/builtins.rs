// SPDX-License-Identifier: Apache-2.0

//! Built-in processors: file replay source, SenML parsing, annotation, and
//! the file/count sinks.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use crate::databatch::{parse_senml_lines, DataBatch, SenmlRecord};

use super::config::{self, Config};
use super::{PortData, ProcCtx, ProcessorError, ProcessorLogic, SourcePoll};

/// Replays a SenML record file at a configured rate.
///
/// Config: `file` (path), `rate` (records/second, default 100), `loop`
/// (restart at EOF, default false), `raw` (emit opaque micro-batches of raw
/// record lines instead of parsed tuples, default false), `batch_records`
/// (records per raw batch, default 10).
///
/// In tuple mode every event of a record is emitted as one tuple; downstream
/// windowing turns the stream back into micro-batches. The final partial raw
/// batch is emitted at end-of-file (flush on close).
pub struct SourceReplay {
    records: Vec<SenmlRecord>,
    raw_lines: Vec<Vec<u8>>,
    rate: f64,
    replay_loop: bool,
    raw: bool,
    batch_records: usize,
    cursor: usize,
    next_due: Option<Instant>,
}

impl SourceReplay {
    pub fn from_config(cfg: &Config) -> Result<Self, ProcessorError> {
        let path = config::str_of(cfg, "file")?;
        let bytes = std::fs::read(path)
            .map_err(|e| ProcessorError::Config(format!("source file {path}: {e}")))?;
        let raw = config::bool_opt(cfg, "raw").unwrap_or(false);
        let (records, skipped) = parse_senml_lines(&bytes);
        if skipped > 0 {
            log::warn!("source_replay: {skipped} malformed records in {path} will be skipped");
        }
        let raw_lines = bytes
            .split(|b| *b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| l.to_vec())
            .collect();
        Ok(Self {
            records,
            raw_lines,
            rate: config::f64_opt(cfg, "rate").unwrap_or(100.0).max(0.001),
            replay_loop: config::bool_opt(cfg, "loop").unwrap_or(false),
            raw,
            batch_records: config::u64_opt(cfg, "batch_records").unwrap_or(10).max(1) as usize,
            cursor: 0,
            next_due: None,
        })
    }

    fn total(&self) -> usize {
        if self.raw {
            self.raw_lines.len()
        } else {
            self.records.len()
        }
    }

    /// Advances the pacing clock by `records` worth of time. After a long
    /// stall (pause, backpressure) the clock snaps to now instead of
    /// emitting a catch-up burst.
    fn advance_clock(&mut self, records: usize) {
        let step = Duration::from_secs_f64(records as f64 / self.rate);
        let now = Instant::now();
        let base = match self.next_due {
            Some(due) if now.duration_since(due) <= step * 2 => due,
            _ => now,
        };
        self.next_due = Some(base + step);
    }
}

impl ProcessorLogic for SourceReplay {
    fn on_input(&mut self, _input: PortData, _ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        Err(ProcessorError::Failed("source_replay takes no input".into()))
    }

    fn wants_poll(&self) -> bool {
        true
    }

    fn poll(&mut self, ctx: &mut ProcCtx<'_>) -> Result<SourcePoll, ProcessorError> {
        if self.total() == 0 {
            return Ok(SourcePoll::Exhausted);
        }
        if self.cursor >= self.total() {
            if !self.replay_loop {
                return Ok(SourcePoll::Exhausted);
            }
            self.cursor = 0;
        }
        if let Some(due) = self.next_due {
            let now = Instant::now();
            if now < due {
                return Ok(SourcePoll::Idle(due - now));
            }
        }
        if self.raw {
            let end = (self.cursor + self.batch_records).min(self.raw_lines.len());
            let mut content = Vec::new();
            for line in &self.raw_lines[self.cursor..end] {
                content.extend_from_slice(line);
                content.push(b'\n');
            }
            let emitted = end - self.cursor;
            self.cursor = end;
            self.advance_clock(emitted);
            ctx.emit(PortData::Batch(DataBatch::opaque(content)));
        } else {
            let record = self.records[self.cursor].clone();
            self.cursor += 1;
            self.advance_clock(1);
            for t in record.tuples() {
                ctx.emit(PortData::Tuple(t));
            }
        }
        Ok(SourcePoll::Emitted)
    }
}

/// Converts opaque SenML content into parsed event tuples. Malformed
/// records are skipped and counted, never halting the stream.
#[derive(Default)]
pub struct ParseSenml;

impl ProcessorLogic for ParseSenml {
    fn on_input(&mut self, input: PortData, ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        let batch = match input {
            PortData::Batch(b) => b,
            other => {
                return Err(ProcessorError::Failed(format!(
                    "parse_senml expects micro-batch input, got {other:?}"
                )))
            }
        };
        let (records, skipped) = parse_senml_lines(&batch.content);
        for _ in 0..skipped {
            ctx.soft_error("malformed SenML record skipped");
        }
        for record in records {
            for t in record.tuples() {
                ctx.emit(PortData::Tuple(t));
            }
        }
        Ok(())
    }
}

/// Adds one attribute to every batch passing through.
pub struct Annotate {
    key: String,
    val: String,
}

impl Annotate {
    pub fn from_config(cfg: &Config) -> Result<Self, ProcessorError> {
        Ok(Self {
            key: config::str_of(cfg, "key")?.to_string(),
            val: config::str_of(cfg, "val")?.to_string(),
        })
    }
}

impl ProcessorLogic for Annotate {
    fn on_input(&mut self, input: PortData, ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        match input {
            PortData::Batch(mut b) => {
                b.set_attribute(self.key.clone(), self.val.clone());
                ctx.emit(PortData::Batch(b));
                Ok(())
            }
            other => Err(ProcessorError::Failed(format!(
                "annotate expects micro-batch input, got {other:?}"
            ))),
        }
    }
}

/// Appends batch content to a file. Totals are exposed through the engine's
/// per-processor counters.
pub struct SinkFile {
    path: PathBuf,
}

impl SinkFile {
    pub fn from_config(cfg: &Config) -> Result<Self, ProcessorError> {
        let path = PathBuf::from(config::str_of(cfg, "path")?);
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        Ok(Self { path })
    }
}

impl ProcessorLogic for SinkFile {
    fn on_input(&mut self, input: PortData, _ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        let batch = match input {
            PortData::Batch(b) => b,
            other => {
                return Err(ProcessorError::Failed(format!(
                    "sink_file expects micro-batch input, got {other:?}"
                )))
            }
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        f.write_all(&batch.content)?;
        Ok(())
    }
}

/// Counts what arrives and drops it. The engine's in-counters are the
/// exposed totals; the internal tally is a cross-check.
#[derive(Default)]
pub struct SinkCount {
    pub batches: u64,
    pub tuples: u64,
}

impl ProcessorLogic for SinkCount {
    fn on_input(&mut self, input: PortData, _ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        if let PortData::Batch(b) = input {
            self.batches += 1;
            self.tuples += b.count().unwrap_or(0) as u64;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databatch::EventTuple;

    fn senml_file(dir: &std::path::Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("events.senml");
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        path
    }

    fn record_line(name: &str, v: f64, t: f64) -> String {
        format!(r#"{{"bn":"{name}","e":[{{"n":"x","u":"u","v":{v},"t":{t}}}]}}"#)
    }

    fn drain(logic: &mut dyn ProcessorLogic) -> (Vec<PortData>, u64) {
        let mut out = Vec::new();
        let mut soft = 0;
        loop {
            let mut emitted = Vec::new();
            let mut emit = |d: PortData| emitted.push(d);
            let mut ctx = ProcCtx::new(&mut emit);
            let status = logic.poll(&mut ctx).unwrap();
            soft += ctx.soft_errors;
            out.extend(emitted);
            match status {
                SourcePoll::Exhausted => break,
                SourcePoll::Idle(d) => std::thread::sleep(d.min(Duration::from_millis(5))),
                SourcePoll::Emitted => {}
            }
        }
        (out, soft)
    }

    #[test]
    fn source_replay_emits_all_tuples_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..20).map(|i| record_line("s/", i as f64, i as f64)).collect();
        let path = senml_file(dir.path(), &lines.iter().map(String::as_str).collect::<Vec<_>>());
        let mut cfg = Config::new();
        cfg.insert("file".into(), serde_json::json!(path.to_str().unwrap()));
        cfg.insert("rate".into(), serde_json::json!(10_000.0));
        let mut src = SourceReplay::from_config(&cfg).unwrap();
        let (out, _) = drain(&mut src);
        assert_eq!(out.len(), 20);
        let values: Vec<f64> = out
            .iter()
            .map(|d| match d {
                PortData::Tuple(t) => t.value,
                other => panic!("expected tuples, got {other:?}"),
            })
            .collect();
        assert_eq!(values, (0..20).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn source_replay_raw_mode_batches_lines() {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..25).map(|i| record_line("s/", i as f64, 0.0)).collect();
        let path = senml_file(dir.path(), &lines.iter().map(String::as_str).collect::<Vec<_>>());
        let mut cfg = Config::new();
        cfg.insert("file".into(), serde_json::json!(path.to_str().unwrap()));
        cfg.insert("rate".into(), serde_json::json!(10_000.0));
        cfg.insert("raw".into(), serde_json::json!(true));
        cfg.insert("batch_records".into(), serde_json::json!(10));
        let mut src = SourceReplay::from_config(&cfg).unwrap();
        let (out, _) = drain(&mut src);
        // 25 records in batches of 10: 10 + 10 + 5 (final partial flushed).
        assert_eq!(out.len(), 3);
        let line_counts: Vec<usize> = out
            .iter()
            .map(|d| match d {
                PortData::Batch(b) => b.content.split(|c| *c == b'\n').filter(|l| !l.is_empty()).count(),
                other => panic!("expected batches, got {other:?}"),
            })
            .collect();
        assert_eq!(line_counts, vec![10, 10, 5]);
    }

    #[test]
    fn source_replay_missing_file_is_deploy_error() {
        let mut cfg = Config::new();
        cfg.insert("file".into(), serde_json::json!("/nonexistent/x.senml"));
        assert!(matches!(
            SourceReplay::from_config(&cfg),
            Err(ProcessorError::Config(_))
        ));
    }

    #[test]
    fn source_replay_paces_roughly_at_rate() {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..50).map(|i| record_line("s/", i as f64, 0.0)).collect();
        let path = senml_file(dir.path(), &lines.iter().map(String::as_str).collect::<Vec<_>>());
        let mut cfg = Config::new();
        cfg.insert("file".into(), serde_json::json!(path.to_str().unwrap()));
        cfg.insert("rate".into(), serde_json::json!(500.0));
        let mut src = SourceReplay::from_config(&cfg).unwrap();
        let start = Instant::now();
        let (out, _) = drain(&mut src);
        let elapsed = start.elapsed();
        assert_eq!(out.len(), 50);
        // 50 records at 500/s is 100ms nominal; allow generous slack.
        assert!(elapsed >= Duration::from_millis(60), "{elapsed:?}");
        assert!(elapsed < Duration::from_millis(900), "{elapsed:?}");
    }

    #[test]
    fn parse_senml_skips_malformed_and_counts() {
        let mut parse = ParseSenml;
        let mut content = Vec::new();
        for i in 0..9 {
            content.extend_from_slice(record_line("s/", i as f64, 0.0).as_bytes());
            content.push(b'\n');
        }
        content.extend_from_slice(b"this is not senml\n");
        let batch = DataBatch::opaque(content);
        let mut out = Vec::new();
        let soft_errors = {
            let mut emit = |d: PortData| out.push(d);
            let mut ctx = ProcCtx::new(&mut emit);
            parse.on_input(PortData::Batch(batch), &mut ctx).unwrap();
            ctx.soft_errors
        };
        assert_eq!(out.len(), 9);
        assert_eq!(soft_errors, 1);
    }

    #[test]
    fn annotate_adds_attribute() {
        let mut cfg = Config::new();
        cfg.insert("key".into(), serde_json::json!("stage"));
        cfg.insert("val".into(), serde_json::json!("clean"));
        let mut a = Annotate::from_config(&cfg).unwrap();
        let mut out = Vec::new();
        let mut emit = |d: PortData| out.push(d);
        let mut ctx = ProcCtx::new(&mut emit);
        a.on_input(
            PortData::Batch(DataBatch::from_tuples(&[EventTuple::new("x", 1.0, "", 0)])),
            &mut ctx,
        )
        .unwrap();
        match &out[0] {
            PortData::Batch(b) => assert_eq!(b.attributes.get("stage").map(String::as_str), Some("clean")),
            other => panic!("expected batch, got {other:?}"),
        }
    }

    #[test]
    fn sink_file_appends_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.ndjson");
        let mut cfg = Config::new();
        cfg.insert("path".into(), serde_json::json!(path.to_str().unwrap()));
        let mut sink = SinkFile::from_config(&cfg).unwrap();
        let mut emit = |_d: PortData| {};
        let mut ctx = ProcCtx::new(&mut emit);
        sink.on_input(PortData::Batch(DataBatch::opaque(b"one\n".to_vec())), &mut ctx)
            .unwrap();
        sink.on_input(PortData::Batch(DataBatch::opaque(b"two\n".to_vec())), &mut ctx)
            .unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "one\ntwo\n");
    }
}
