// SPDX-License-Identifier: Apache-2.0

//! Processor logic: what runs inside a dataflow vertex.
//!
//! The engine adapts between the transport form (always a [`DataBatch`]) and
//! each processor's declared input/output data model, so logic here sees the
//! model it was annotated with: whole batches, replayed tuples, or files.
//!
//! Kinds:
//! - `builtin:<name>` — source_replay, parse_senml, annotate, sink_file,
//!   sink_count.
//! - `cep` — an embedded pattern-query pipeline over event streams.
//! - `exec` — delegate each batch to an external executable via file I/O.
//! - `bridge` — ship batches to a remote engine speaking the link wire
//!   protocol and emit whatever comes back.

mod bridge;
mod builtins;
mod cep;
mod exec;

pub use bridge::{BridgeLogic, BridgeSpec};
pub use builtins::{Annotate, ParseSenml, SinkCount, SinkFile, SourceReplay};
pub use cep::{CepPipeline, CepQuerySpec, CepStageSpec};
pub use exec::{exec_process, ExecLogic, ExecSpec};

use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::databatch::{DataBatch, EventTuple, FileRef};
use crate::flowmodel::ProcessorSpec;

/// Attribute that restricts a batch's fan-out to a single downstream edge.
pub const ATTR_ROUTE_TO: &str = "echo.route.to";

#[derive(Debug, Error)]
pub enum ProcessorError {
    #[error("processor config: {0}")]
    Config(String),
    #[error("unknown processor kind {0}")]
    UnknownKind(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Batch(#[from] crate::databatch::BatchError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Data crossing a processor port in its declared model.
#[derive(Debug, Clone)]
pub enum PortData {
    Batch(DataBatch),
    Tuple(EventTuple),
    File(FileRef),
}

/// What a poll pass produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourcePoll {
    /// Emitted something; poll again immediately.
    Emitted,
    /// Nothing due yet; poll again after roughly this long.
    Idle(Duration),
    /// This logic will never emit again.
    Exhausted,
}

/// Emission context handed to logic calls. Soft errors (skipped records,
/// failed child runs) are counted without halting the stream.
pub struct ProcCtx<'a> {
    emit_fn: &'a mut dyn FnMut(PortData),
    pub soft_errors: u64,
}

impl<'a> ProcCtx<'a> {
    pub fn new(emit_fn: &'a mut dyn FnMut(PortData)) -> Self {
        Self {
            emit_fn,
            soft_errors: 0,
        }
    }

    pub fn emit(&mut self, data: PortData) {
        (self.emit_fn)(data);
    }

    pub fn soft_error(&mut self, message: impl AsRef<str>) {
        self.soft_errors += 1;
        log::debug!("processor soft error: {}", message.as_ref());
    }
}

/// One processor's logic. Instances are single-threaded over their input;
/// the engine owns the thread and the model adaptation around these calls.
pub trait ProcessorLogic: Send {
    /// Handles one input item (already adapted to the declared input model).
    fn on_input(&mut self, input: PortData, ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError>;

    /// Source/async pass. Sources pace themselves here; bridge-like logic
    /// drains asynchronously arrived results. Default: never emits.
    fn poll(&mut self, _ctx: &mut ProcCtx<'_>) -> Result<SourcePoll, ProcessorError> {
        Ok(SourcePoll::Exhausted)
    }

    /// True when `poll` must be driven even while inputs are open.
    fn wants_poll(&self) -> bool {
        false
    }

    /// All inputs reached end-of-stream: flush. After this the engine keeps
    /// polling until `poll` returns `Exhausted`.
    fn on_eos(&mut self, _ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        Ok(())
    }
}

/// Deploy-time context for building logic instances.
pub struct BuildCtx {
    /// Scratch directory for file-model spills and exec temp files.
    pub scratch_dir: PathBuf,
    /// Raised when the hosting fragment stops; long retry loops watch it.
    pub stop: Arc<AtomicBool>,
    /// Identity stamped on outbound connections for the reachability shim.
    pub from_device: Option<String>,
}

impl BuildCtx {
    pub fn local_test() -> Self {
        Self {
            scratch_dir: std::env::temp_dir(),
            stop: Arc::new(AtomicBool::new(false)),
            from_device: None,
        }
    }
}

/// Resolves a processor spec to runnable logic.
pub fn build_logic(
    spec: &ProcessorSpec,
    ctx: &BuildCtx,
) -> Result<Box<dyn ProcessorLogic>, ProcessorError> {
    match spec.kind.as_str() {
        "cep" => Ok(Box::new(CepPipeline::from_config(&spec.config)?)),
        "exec" => Ok(Box::new(ExecLogic::from_config(&spec.config, ctx)?)),
        "bridge" => Ok(Box::new(BridgeLogic::from_config(&spec.config, ctx)?)),
        kind if kind.starts_with("builtin:") => match &kind["builtin:".len()..] {
            "source_replay" => Ok(Box::new(SourceReplay::from_config(&spec.config)?)),
            "parse_senml" => Ok(Box::new(ParseSenml::default())),
            "annotate" => Ok(Box::new(Annotate::from_config(&spec.config)?)),
            "sink_file" => Ok(Box::new(SinkFile::from_config(&spec.config)?)),
            "sink_count" => Ok(Box::new(SinkCount::default())),
            other => Err(ProcessorError::UnknownKind(format!("builtin:{other}"))),
        },
        other => Err(ProcessorError::UnknownKind(other.to_string())),
    }
}

pub(crate) mod config {
    //! Small typed accessors over the free-form processor config map.

    use super::ProcessorError;
    use serde_json::Value;
    use std::collections::BTreeMap;

    pub type Config = BTreeMap<String, Value>;

    pub fn str_of<'a>(cfg: &'a Config, key: &str) -> Result<&'a str, ProcessorError> {
        cfg.get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| ProcessorError::Config(format!("missing string key {key:?}")))
    }

    pub fn str_opt<'a>(cfg: &'a Config, key: &str) -> Option<&'a str> {
        cfg.get(key).and_then(Value::as_str)
    }

    pub fn f64_opt(cfg: &Config, key: &str) -> Option<f64> {
        cfg.get(key).and_then(Value::as_f64)
    }

    pub fn u64_opt(cfg: &Config, key: &str) -> Option<u64> {
        cfg.get(key).and_then(Value::as_u64)
    }

    pub fn bool_opt(cfg: &Config, key: &str) -> Option<bool> {
        cfg.get(key).and_then(Value::as_bool)
    }
}
