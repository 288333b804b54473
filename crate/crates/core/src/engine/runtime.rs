// SPDX-License-Identifier: Apache-2.0

//! The per-processor execution loop: one logical thread per processor
//! instance, adapting between transport batches and the processor's
//! declared data models, with pause, end-of-stream propagation, and
//! simulated-CPU charging.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::databatch::{
    batch_to_file, batch_to_stream, file_to_batch, DataBatch, WindowAccumulator, WindowPolicy,
    ATTR_BATCH_SEQ,
};
use crate::flowmodel::{DataModelKind, ProcessorSpec};
use crate::processors::{PortData, ProcCtx, ProcessorLogic, SourcePoll, ATTR_ROUTE_TO};

use super::queue::EdgeQueue;
use super::throttle::TokenThrottle;

#[derive(Default)]
pub struct Counters {
    pub in_batches: AtomicU64,
    pub in_tuples: AtomicU64,
    pub out_batches: AtomicU64,
    pub out_tuples: AtomicU64,
    pub errors: AtomicU64,
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            in_batches: self.in_batches.load(Ordering::Relaxed),
            in_tuples: self.in_tuples.load(Ordering::Relaxed),
            out_batches: self.out_batches.load(Ordering::Relaxed),
            out_tuples: self.out_tuples.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CounterSnapshot {
    pub in_batches: u64,
    pub in_tuples: u64,
    pub out_batches: u64,
    pub out_tuples: u64,
    pub errors: u64,
}

pub struct ProcessorHandle {
    pub spec: ProcessorSpec,
    pub paused: AtomicBool,
    pub removed: AtomicBool,
    pub eos_done: AtomicBool,
    pub counters: Counters,
    pub(super) logic: Mutex<Option<Box<dyn ProcessorLogic>>>,
    pub(super) thread: Mutex<Option<JoinHandle<()>>>,
    wake_lock: Mutex<()>,
    wake: Condvar,
}

impl ProcessorHandle {
    pub fn new(spec: ProcessorSpec, logic: Box<dyn ProcessorLogic>, paused: bool) -> Arc<Self> {
        Arc::new(Self {
            spec,
            paused: AtomicBool::new(paused),
            removed: AtomicBool::new(false),
            eos_done: AtomicBool::new(false),
            counters: Counters::default(),
            logic: Mutex::new(Some(logic)),
            thread: Mutex::new(None),
            wake_lock: Mutex::new(()),
            wake: Condvar::new(),
        })
    }

    pub fn set_paused(&self, paused: bool) {
        self.paused.store(paused, Ordering::Relaxed);
        self.wake.notify_all();
    }

    pub fn mark_removed(&self) {
        self.removed.store(true, Ordering::Relaxed);
        self.wake.notify_all();
    }

    pub fn join(&self) {
        if let Some(t) = self.thread.lock().expect("thread lock").take() {
            let _ = t.join();
        }
    }

    fn park(&self, timeout: Duration) {
        let guard = self.wake_lock.lock().expect("wake lock");
        let _ = self.wake.wait_timeout(guard, timeout);
    }

    /// UI state string: deployed/running/paused/stopped.
    pub fn state_str(&self, fragment_started: bool, fragment_stopped: bool) -> &'static str {
        if fragment_stopped {
            "stopped"
        } else if !fragment_started {
            "deployed"
        } else if self.paused.load(Ordering::Relaxed) {
            "paused"
        } else {
            "running"
        }
    }
}

pub struct RunArgs {
    pub handle: Arc<ProcessorHandle>,
    /// (upstream pid, queue feeding this processor)
    pub inputs: Vec<(String, Arc<EdgeQueue>)>,
    /// (downstream pid, queue this processor feeds)
    pub outputs: Vec<(String, Arc<EdgeQueue>)>,
    pub fragment_stop: Arc<AtomicBool>,
    pub throttle: Arc<TokenThrottle>,
    pub cost_per_tuple: f64,
    pub scratch_dir: PathBuf,
}

/// Spawns the execution thread for one processor instance.
pub fn spawn(args: RunArgs) {
    let handle = args.handle.clone();
    let name = format!("proc-{}", handle.spec.id);
    let t = std::thread::Builder::new()
        .name(name)
        .spawn(move || run_loop(args))
        .expect("spawn processor thread");
    *handle.thread.lock().expect("thread lock") = Some(t);
}

enum Phase {
    Active,
    Draining,
    Settled,
}

fn run_loop(args: RunArgs) {
    let RunArgs {
        handle,
        inputs,
        outputs,
        fragment_stop,
        throttle,
        cost_per_tuple,
        scratch_dir,
    } = args;
    let mut logic = match handle.logic.lock().expect("logic lock").take() {
        Some(l) => l,
        None => return,
    };
    let is_source = inputs.is_empty();
    let polls = logic.wants_poll();
    let input_model = handle.spec.input_model;
    let charge_on_produce = is_source;

    let mut router = OutputRouter::new(
        &handle,
        &outputs,
        &fragment_stop,
        &throttle,
        cost_per_tuple,
        charge_on_produce,
    );
    let mut eos_pending: BTreeSet<String> = inputs.iter().map(|(f, _)| f.clone()).collect();
    let mut phase = Phase::Active;
    let mut poll_exhausted = !polls;
    let mut rr = 0usize;

    loop {
        if fragment_stop.load(Ordering::Relaxed) || handle.removed.load(Ordering::Relaxed) {
            return;
        }
        if handle.paused.load(Ordering::Relaxed) {
            handle.park(Duration::from_millis(50));
            continue;
        }

        match phase {
            Phase::Active => {
                let mut did_work = false;
                let mut idle_hint = Duration::from_millis(5);

                if polls && !poll_exhausted {
                    match drive_call(&handle, &mut router, |l, ctx| l.poll(ctx), &mut logic) {
                        Some(SourcePoll::Emitted) => did_work = true,
                        Some(SourcePoll::Idle(d)) => idle_hint = d.min(Duration::from_millis(50)),
                        Some(SourcePoll::Exhausted) => poll_exhausted = true,
                        None => {}
                    }
                }

                if !inputs.is_empty() {
                    for k in 0..inputs.len() {
                        let (from, queue) = &inputs[(rr + k) % inputs.len()];
                        if let Some(batch) = queue.try_pop() {
                            rr = (rr + k + 1) % inputs.len();
                            if batch.is_eos() {
                                eos_pending.remove(from);
                            } else {
                                consume(
                                    &handle,
                                    &mut logic,
                                    &mut router,
                                    input_model,
                                    batch,
                                    &throttle,
                                    cost_per_tuple,
                                    &fragment_stop,
                                    &scratch_dir,
                                );
                            }
                            did_work = true;
                            break;
                        }
                    }
                }

                router.poll_time();

                let inputs_done = if is_source {
                    poll_exhausted
                } else {
                    eos_pending.is_empty()
                };
                if inputs_done {
                    drive_call(&handle, &mut router, |l, ctx| l.on_eos(ctx).map(|_| SourcePoll::Emitted), &mut logic);
                    phase = Phase::Draining;
                    continue;
                }

                if !did_work {
                    handle.park(idle_hint.max(Duration::from_millis(1)));
                }
            }
            Phase::Draining => {
                // Logic may still emit asynchronously arrived results.
                match drive_call(&handle, &mut router, |l, ctx| l.poll(ctx), &mut logic) {
                    Some(SourcePoll::Emitted) => {}
                    Some(SourcePoll::Idle(d)) => handle.park(d.min(Duration::from_millis(50))),
                    Some(SourcePoll::Exhausted) | None => {
                        router.flush_windows();
                        router.send_eos();
                        handle.eos_done.store(true, Ordering::Relaxed);
                        phase = Phase::Settled;
                    }
                }
            }
            Phase::Settled => {
                handle.park(Duration::from_millis(50));
            }
        }
    }
}

/// Runs one logic call, routing emissions and folding soft errors into the
/// counters. Hard errors are counted and the stream continues.
fn drive_call(
    handle: &ProcessorHandle,
    router: &mut OutputRouter<'_>,
    call: impl FnOnce(
        &mut Box<dyn ProcessorLogic>,
        &mut ProcCtx<'_>,
    ) -> Result<SourcePoll, crate::processors::ProcessorError>,
    logic: &mut Box<dyn ProcessorLogic>,
) -> Option<SourcePoll> {
    let mut emitted: Vec<PortData> = Vec::new();
    let result = {
        let mut emit = |d: PortData| emitted.push(d);
        let mut ctx = ProcCtx::new(&mut emit);
        let r = call(logic, &mut ctx);
        handle
            .counters
            .errors
            .fetch_add(ctx.soft_errors, Ordering::Relaxed);
        r
    };
    for data in emitted {
        router.route(data);
    }
    match result {
        Ok(status) => Some(status),
        Err(e) => {
            log::warn!("processor {}: {e}", handle.spec.id);
            handle.counters.errors.fetch_add(1, Ordering::Relaxed);
            None
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn consume(
    handle: &ProcessorHandle,
    logic: &mut Box<dyn ProcessorLogic>,
    router: &mut OutputRouter<'_>,
    input_model: DataModelKind,
    batch: DataBatch,
    throttle: &TokenThrottle,
    cost_per_tuple: f64,
    stop: &AtomicBool,
    scratch_dir: &PathBuf,
) {
    let count = batch.count().unwrap_or(0);
    let cost = cost_per_tuple * count.max(1) as f64;
    if throttle.take(cost, stop).is_err() {
        return;
    }
    handle.counters.in_batches.fetch_add(1, Ordering::Relaxed);
    handle
        .counters
        .in_tuples
        .fetch_add(count as u64, Ordering::Relaxed);

    match input_model {
        DataModelKind::Microbatch => {
            drive_call(
                handle,
                router,
                move |l, ctx| l.on_input(PortData::Batch(batch), ctx).map(|_| SourcePoll::Emitted),
                logic,
            );
        }
        DataModelKind::Stream => match batch_to_stream(&batch) {
            Ok(tuples) => {
                for t in tuples {
                    drive_call(
                        handle,
                        router,
                        move |l, ctx| {
                            l.on_input(PortData::Tuple(t), ctx).map(|_| SourcePoll::Emitted)
                        },
                        logic,
                    );
                }
            }
            Err(e) => {
                log::warn!("processor {}: undecodable batch: {e}", handle.spec.id);
                handle.counters.errors.fetch_add(1, Ordering::Relaxed);
            }
        },
        DataModelKind::File => {
            match batch_to_file(&batch, scratch_dir) {
                Ok(file_ref) => {
                    let path = file_ref.path.clone();
                    drive_call(
                        handle,
                        router,
                        move |l, ctx| {
                            l.on_input(PortData::File(file_ref), ctx).map(|_| SourcePoll::Emitted)
                        },
                        logic,
                    );
                    let _ = std::fs::remove_file(&path);
                    let _ = std::fs::remove_file(path.with_file_name(format!(
                        "{}.attrs.json",
                        path.file_name().unwrap_or_default().to_string_lossy()
                    )));
                }
                Err(e) => {
                    log::warn!("processor {}: file spill failed: {e}", handle.spec.id);
                    handle.counters.errors.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }
}

/// Routes processor emissions to output queues: window-accumulates stream
/// outputs, stamps per-edge sequence numbers, duplicates across fan-out
/// edges, honors single-edge routing tags.
struct OutputRouter<'a> {
    handle: &'a ProcessorHandle,
    outputs: &'a [(String, Arc<EdgeQueue>)],
    fragment_stop: &'a AtomicBool,
    throttle: &'a TokenThrottle,
    cost_per_tuple: f64,
    charge_on_produce: bool,
    accumulator: Option<WindowAccumulator>,
    seqs: HashMap<String, u64>,
    eos_sent: bool,
}

impl<'a> OutputRouter<'a> {
    fn new(
        handle: &'a ProcessorHandle,
        outputs: &'a [(String, Arc<EdgeQueue>)],
        fragment_stop: &'a AtomicBool,
        throttle: &'a TokenThrottle,
        cost_per_tuple: f64,
        charge_on_produce: bool,
    ) -> Self {
        let accumulator = if handle.spec.output_model == DataModelKind::Stream {
            Some(WindowAccumulator::new(window_policy(&handle.spec)))
        } else {
            None
        };
        Self {
            handle,
            outputs,
            fragment_stop,
            throttle,
            cost_per_tuple,
            charge_on_produce,
            accumulator,
            seqs: HashMap::new(),
            eos_sent: false,
        }
    }

    fn route(&mut self, data: PortData) {
        match data {
            PortData::Batch(b) => self.dispatch(b),
            PortData::Tuple(t) => match &mut self.accumulator {
                Some(acc) => {
                    if let Some(b) = acc.push(t) {
                        self.dispatch(b);
                    }
                }
                None => {
                    log::warn!(
                        "processor {}: tuple emitted without stream output model",
                        self.handle.spec.id
                    );
                    self.handle.counters.errors.fetch_add(1, Ordering::Relaxed);
                }
            },
            PortData::File(file_ref) => match file_to_batch(&file_ref) {
                Ok(b) => self.dispatch(b),
                Err(e) => {
                    log::warn!("processor {}: file output unreadable: {e}", self.handle.spec.id);
                    self.handle.counters.errors.fetch_add(1, Ordering::Relaxed);
                }
            },
        }
    }

    fn poll_time(&mut self) {
        if let Some(b) = self.accumulator.as_mut().and_then(|a| a.poll_time()) {
            self.dispatch(b);
        }
    }

    fn flush_windows(&mut self) {
        if let Some(b) = self.accumulator.as_mut().and_then(|a| a.flush()) {
            self.dispatch(b);
        }
    }

    fn dispatch(&mut self, batch: DataBatch) {
        if self.charge_on_produce {
            let count = batch.count().unwrap_or(0);
            let cost = self.cost_per_tuple * count.max(1) as f64;
            if self.throttle.take(cost, self.fragment_stop).is_err() {
                return;
            }
        }
        self.handle
            .counters
            .out_batches
            .fetch_add(1, Ordering::Relaxed);
        self.handle
            .counters
            .out_tuples
            .fetch_add(batch.count().unwrap_or(0) as u64, Ordering::Relaxed);

        let route_to = batch.attributes.get(ATTR_ROUTE_TO).cloned();
        for (to, queue) in self.outputs {
            if let Some(target) = &route_to {
                if target != to {
                    continue;
                }
            }
            let mut copy = batch.clone();
            let seq = self.seqs.entry(to.clone()).or_insert(0);
            copy.set_attribute(ATTR_BATCH_SEQ, seq.to_string());
            *seq += 1;
            if queue.push_blocking(copy, self.fragment_stop).is_err() {
                return;
            }
        }
    }

    /// Emits one fresh end-of-stream marker per output edge, once.
    fn send_eos(&mut self) {
        if self.eos_sent {
            return;
        }
        self.eos_sent = true;
        for (to, queue) in self.outputs {
            let mut marker = DataBatch::eos_marker();
            let seq = self.seqs.entry(to.clone()).or_insert(0);
            marker.set_attribute(ATTR_BATCH_SEQ, seq.to_string());
            *seq += 1;
            let _ = queue.push_blocking(marker, self.fragment_stop);
        }
    }
}

/// Window policy from the processor config (`"window"` key), defaulting to
/// a count window of 50.
pub fn window_policy(spec: &ProcessorSpec) -> WindowPolicy {
    spec.config
        .get("window")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default()
}
