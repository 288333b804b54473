// SPDX-License-Identifier: Apache-2.0

//! External-executable wrapper: each input batch is spilled to a file, a
//! child process transforms it into an output file, and the result is read
//! back as a batch. The contract for the child: read `{input_file}`, write
//! `{output_file}`, exit 0.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::databatch::{batch_to_file, file_to_batch, DataBatch, FileRef};

use super::config::Config;
use super::{PortData, ProcCtx, ProcessorError, ProcessorLogic, ATTR_ROUTE_TO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecSpec {
    pub command: String,
    /// Argument template; `{input_file}` and `{output_file}` are substituted.
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub expected_exit: i32,
    /// Optional downstream processor that receives error batches instead of
    /// them being dropped.
    #[serde(default)]
    pub error_to: Option<String>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl ExecSpec {
    pub fn from_config(cfg: &Config) -> Result<Self, ProcessorError> {
        let spec: ExecSpec =
            serde_json::from_value(serde_json::Value::Object(cfg.clone().into_iter().collect()))
                .map_err(|e| ProcessorError::Config(format!("exec spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Deploy-time check: a pathful command must exist and be executable.
    /// Bare names are resolved through PATH at run time.
    pub fn validate(&self) -> Result<(), ProcessorError> {
        if self.command.is_empty() {
            return Err(ProcessorError::Config("exec command must be non-empty".into()));
        }
        if self.command.contains('/') {
            let path = Path::new(&self.command);
            let meta = std::fs::metadata(path).map_err(|e| {
                ProcessorError::Config(format!("exec command {}: {e}", self.command))
            })?;
            if !meta.is_file() {
                return Err(ProcessorError::Config(format!(
                    "exec command {} is not a file",
                    self.command
                )));
            }
            #[cfg(unix)]
            {
                use std::os::unix::fs::PermissionsExt;
                if meta.permissions().mode() & 0o111 == 0 {
                    return Err(ProcessorError::Config(format!(
                        "exec command {} is not executable",
                        self.command
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ExecOutcome {
    Output(DataBatch),
    /// Child misbehaved; the message says how.
    Failed(String),
}

/// Runs one batch through the child process.
///
/// On success the output batch carries the input's attributes with the
/// output file's own attributes winning on conflict, and all temp files are
/// removed. Timeouts kill the child.
pub fn exec_process(
    spec: &ExecSpec,
    input: &DataBatch,
    scratch_dir: &Path,
) -> Result<ExecOutcome, ProcessorError> {
    let tmp = tempfile::Builder::new()
        .prefix("echo-exec-")
        .tempdir_in(scratch_dir)?;
    let input_ref = batch_to_file(input, tmp.path())?;
    let output_path = tmp.path().join("out.batch");

    let substitute = |arg: &str| {
        arg.replace("{input_file}", &input_ref.path.display().to_string())
            .replace("{output_file}", &output_path.display().to_string())
    };
    let mut cmd = Command::new(&spec.command);
    cmd.args(spec.args.iter().map(|a| substitute(a)))
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null());
    if let Some(dir) = &spec.workdir {
        cmd.current_dir(dir);
    }
    let mut child = cmd
        .spawn()
        .map_err(|e| ProcessorError::Failed(format!("spawn {}: {e}", spec.command)))?;

    let deadline = Instant::now() + Duration::from_millis(spec.timeout_ms);
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) => {
                if Instant::now() >= deadline {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Ok(ExecOutcome::Failed(format!(
                        "timed out after {} ms",
                        spec.timeout_ms
                    )));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(ProcessorError::Failed(format!("wait: {e}"))),
        }
    };

    let code = status.code().unwrap_or(-1);
    if code != spec.expected_exit {
        return Ok(ExecOutcome::Failed(format!(
            "exit code {code}, expected {}",
            spec.expected_exit
        )));
    }
    if !output_path.exists() {
        return Ok(ExecOutcome::Failed("child wrote no output file".into()));
    }
    let size = std::fs::metadata(&output_path)?.len();
    let mut output = file_to_batch(&FileRef {
        path: output_path,
        size_bytes: size,
    })?;

    // Input attributes propagate; the output's own win on conflict.
    let mut merged = input.attributes.clone();
    for (k, v) in std::mem::take(&mut output.attributes) {
        merged.insert(k, v);
    }
    output.attributes = merged;
    Ok(ExecOutcome::Output(output))
    // `tmp` drops here, removing input spill, sidecars, and output file.
}

/// Processor wrapper around [`exec_process`].
pub struct ExecLogic {
    spec: ExecSpec,
    scratch_dir: PathBuf,
}

impl ExecLogic {
    pub fn from_config(cfg: &Config, ctx: &super::BuildCtx) -> Result<Self, ProcessorError> {
        Ok(Self {
            spec: ExecSpec::from_config(cfg)?,
            scratch_dir: ctx.scratch_dir.clone(),
        })
    }
}

impl ProcessorLogic for ExecLogic {
    fn on_input(&mut self, input: PortData, ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        let batch = match input {
            PortData::Batch(b) => b,
            other => {
                return Err(ProcessorError::Failed(format!(
                    "exec expects micro-batch input, got {other:?}"
                )))
            }
        };
        match exec_process(&self.spec, &batch, &self.scratch_dir)? {
            ExecOutcome::Output(out) => {
                ctx.emit(PortData::Batch(out));
            }
            ExecOutcome::Failed(why) => {
                ctx.soft_error(format!("exec child failed: {why}"));
                if let Some(error_to) = &self.spec.error_to {
                    let mut err_batch = batch;
                    err_batch.set_attribute("exec.error", why);
                    err_batch.set_attribute(ATTR_ROUTE_TO, error_to.clone());
                    ctx.emit(PortData::Batch(err_batch));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::databatch::EventTuple;

    fn script(dir: &Path, name: &str, body: &str) -> String {
        let path = dir.join(name);
        std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        }
        path.display().to_string()
    }

    fn spec(command: String, args: &[&str]) -> ExecSpec {
        ExecSpec {
            command,
            args: args.iter().map(|s| s.to_string()).collect(),
            workdir: None,
            timeout_ms: 5_000,
            expected_exit: 0,
            error_to: None,
        }
    }

    fn four_tuple_batch() -> DataBatch {
        DataBatch::from_tuples(&[
            EventTuple::new("a", 1.0, "", 0),
            EventTuple::new("b", 2.0, "", 1),
            EventTuple::new("c", 3.0, "", 2),
            EventTuple::new("d", 4.0, "", 3),
        ])
    }

    #[test]
    fn line_count_utility_counts_tuples() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = script(
            dir.path(),
            "line_count.sh",
            r#"wc -l < "$1" | tr -d ' \n' > "$2""#,
        );
        let s = spec(cmd, &["{input_file}", "{output_file}"]);
        match exec_process(&s, &four_tuple_batch(), dir.path()).unwrap() {
            ExecOutcome::Output(out) => assert_eq!(out.content, b"4"),
            other => panic!("expected output, got {other:?}"),
        }
    }

    #[test]
    fn identity_copy_preserves_content_and_merges_attrs() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = script(dir.path(), "identity.sh", r#"cp "$1" "$2""#);
        let s = spec(cmd, &["{input_file}", "{output_file}"]);
        let mut input = four_tuple_batch();
        input.set_attribute("origin", "camera-3");
        match exec_process(&s, &input, dir.path()).unwrap() {
            ExecOutcome::Output(out) => {
                assert_eq!(out.content, input.content);
                // Input attribute propagated; no sidecar was written so a
                // synthesized id (output's own) wins over the input's.
                assert_eq!(out.attributes.get("origin").map(String::as_str), Some("camera-3"));
                assert_ne!(out.id(), input.id());
            }
            other => panic!("expected output, got {other:?}"),
        }
    }

    #[test]
    fn nonzero_exit_is_soft_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = script(dir.path(), "fail.sh", "exit 1");
        let s = spec(cmd, &[]);
        match exec_process(&s, &four_tuple_batch(), dir.path()).unwrap() {
            ExecOutcome::Failed(why) => assert!(why.contains("exit code 1"), "{why}"),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn timeout_kills_child() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = script(dir.path(), "slow.sh", "sleep 30");
        let mut s = spec(cmd, &[]);
        s.timeout_ms = 80;
        let start = Instant::now();
        match exec_process(&s, &four_tuple_batch(), dir.path()).unwrap() {
            ExecOutcome::Failed(why) => assert!(why.contains("timed out"), "{why}"),
            other => panic!("expected timeout, got {other:?}"),
        }
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn clean_run_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let scratch = dir.path().join("scratch");
        std::fs::create_dir(&scratch).unwrap();
        let cmd = script(dir.path(), "identity.sh", r#"cp "$1" "$2""#);
        let s = spec(cmd, &["{input_file}", "{output_file}"]);
        for _ in 0..3 {
            let _ = exec_process(&s, &four_tuple_batch(), &scratch).unwrap();
        }
        let leftovers: Vec<_> = std::fs::read_dir(&scratch).unwrap().collect();
        assert!(leftovers.is_empty(), "scratch not clean: {leftovers:?}");
    }

    #[test]
    fn missing_command_rejected_at_deploy() {
        let s = ExecSpec {
            command: "/nonexistent/bin/doesnotexist".into(),
            args: vec![],
            workdir: None,
            timeout_ms: 1000,
            expected_exit: 0,
            error_to: None,
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn error_route_tags_batch_for_error_edge() {
        let dir = tempfile::tempdir().unwrap();
        let cmd = script(dir.path(), "fail.sh", "exit 3");
        let mut cfg = Config::new();
        cfg.insert("command".into(), serde_json::json!(cmd));
        cfg.insert("error_to".into(), serde_json::json!("quarantine"));
        let ctx = super::super::BuildCtx {
            scratch_dir: dir.path().to_path_buf(),
            stop: std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false)),
            from_device: None,
        };
        let mut logic = ExecLogic::from_config(&cfg, &ctx).unwrap();
        let mut out = Vec::new();
        let mut emit = |d: PortData| out.push(d);
        let mut pctx = ProcCtx::new(&mut emit);
        logic
            .on_input(PortData::Batch(four_tuple_batch()), &mut pctx)
            .unwrap();
        assert_eq!(pctx.soft_errors, 1);
        match &out[0] {
            PortData::Batch(b) => {
                assert_eq!(b.attributes.get(ATTR_ROUTE_TO).map(String::as_str), Some("quarantine"));
                assert!(b.attributes.contains_key("exec.error"));
            }
            other => panic!("expected routed batch, got {other:?}"),
        }
    }
}
