// SPDX-License-Identifier: Apache-2.0

//! Core library of the `echo` platform: a self-contained orchestrator that
//! composes dataflows over hybrid data models (streams, micro-batches, files)
//! and executes them as fragments across simulated edge, fog and cloud
//! workers.
//!
//! The pieces fit together like this:
//!
//! * [`catalog`] — the resource directory, a REST registry of hierarchical
//!   href items that holds every piece of system state.
//! * [`flowmodel`] — dataflow specifications, validation, and the pure graph
//!   algorithms (edge cut, placement diff) used during deployment.
//! * [`databatch`] — the unit of data movement plus the automatic wrappers
//!   that convert between stream, micro-batch and file models.
//! * [`processors`] — processor logic: built-ins, an embedded CEP pipeline,
//!   an external-executable wrapper and a remote engine bridge.
//! * [`engine`] — the worker-local dataflow engine: fragments, bounded edge
//!   queues, push/pull remote links, pause/resume and live reconfiguration.
//! * [`agent`] — the device service that registers a device, spawns
//!   capacity-capped worker sandboxes and reports utilization.
//! * [`master`] — the stateless platform master: scheduling, deployment,
//!   stop and live rebalance, with all state kept in the catalog.

pub mod agent;
pub mod catalog;
pub mod databatch;
pub mod engine;
pub mod flowmodel;
pub mod httpc;
pub mod httpd;
pub mod master;
pub mod processors;
pub mod stub_engine;
pub mod wire;

pub use catalog::{CatalogClient, CatalogItem, Relation};
pub use databatch::{DataBatch, EventTuple, FileRef, WindowPolicy};
pub use flowmodel::{DataflowSpec, FragmentPlan, PlacementMapping, ProcessorSpec};
