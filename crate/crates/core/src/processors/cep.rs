// SPDX-License-Identifier: Apache-2.0

//! Embedded mini-CEP: an ordered pipeline of pattern-query stages over
//! event streams. Deterministic: the same query over the same tuple
//! sequence yields the same output sequence.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::databatch::EventTuple;

use super::config::Config;
use super::{PortData, ProcCtx, ProcessorError, ProcessorLogic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Avg,
    Min,
    Max,
    Count,
    Sum,
}

/// Constant operand of a filter: numeric or string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FilterConst {
    Number(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub field: String,
    pub op: FilterOp,
    #[serde(rename = "const")]
    pub constant: FilterConst,
}

/// One pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CepStageSpec {
    Filter(FilterSpec),
    Scale {
        field: String,
        factor: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Tumbling count window; emits one aggregate tuple per full window.
    /// Partial windows at end-of-stream are discarded, so output length is
    /// exactly `floor(input / n)`.
    WindowAgg {
        #[serde(rename = "n")]
        count_n: usize,
        agg: AggKind,
        field: String,
    },
    /// Tumbling window of `window_n` tuples; emits one alert tuple when at
    /// least `threshold` of them match the predicate.
    PatternCount {
        predicate: FilterSpec,
        window_n: usize,
        threshold: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CepQuerySpec {
    pub stages: Vec<CepStageSpec>,
}

impl CepQuerySpec {
    pub fn validate(&self) -> Result<(), ProcessorError> {
        if self.stages.is_empty() {
            return Err(ProcessorError::Config("cep pipeline must be non-empty".into()));
        }
        for stage in &self.stages {
            match stage {
                CepStageSpec::Filter(f) => validate_filter(f)?,
                CepStageSpec::Scale { field, .. } => {
                    if field.is_empty() {
                        return Err(ProcessorError::Config("scale field must be non-empty".into()));
                    }
                }
                CepStageSpec::WindowAgg { count_n, field, .. } => {
                    if *count_n < 1 {
                        return Err(ProcessorError::Config("window_agg n must be >= 1".into()));
                    }
                    if field.is_empty() {
                        return Err(ProcessorError::Config("window_agg field must be non-empty".into()));
                    }
                }
                CepStageSpec::PatternCount {
                    predicate,
                    window_n,
                    threshold,
                } => {
                    validate_filter(predicate)?;
                    if *window_n < 1 || *threshold < 1 {
                        return Err(ProcessorError::Config(
                            "pattern_count window and threshold must be >= 1".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn validate_filter(f: &FilterSpec) -> Result<(), ProcessorError> {
    if f.field.is_empty() {
        return Err(ProcessorError::Config("filter field must be non-empty".into()));
    }
    if matches!(f.constant, FilterConst::Text(_))
        && !matches!(f.op, FilterOp::Eq | FilterOp::Ne)
    {
        return Err(ProcessorError::Config(format!(
            "filter on string constant supports only == and != (field {})",
            f.field
        )));
    }
    Ok(())
}

/// A running pipeline: the spec plus per-stage state.
pub struct CepPipeline {
    stages: Vec<Stage>,
}

enum Stage {
    Filter(FilterSpec),
    Scale {
        field: String,
        factor: f64,
        offset: f64,
    },
    WindowAgg {
        count_n: usize,
        agg: AggKind,
        field: String,
        values: Vec<f64>,
        last: Option<EventTuple>,
    },
    PatternCount {
        predicate: FilterSpec,
        window_n: usize,
        threshold: usize,
        window: VecDeque<bool>,
        last: Option<EventTuple>,
    },
}

impl CepPipeline {
    pub fn new(spec: &CepQuerySpec) -> Result<Self, ProcessorError> {
        spec.validate()?;
        let stages = spec
            .stages
            .iter()
            .map(|s| match s.clone() {
                CepStageSpec::Filter(f) => Stage::Filter(f),
                CepStageSpec::Scale {
                    field,
                    factor,
                    offset,
                } => Stage::Scale {
                    field,
                    factor,
                    offset,
                },
                CepStageSpec::WindowAgg {
                    count_n,
                    agg,
                    field,
                } => Stage::WindowAgg {
                    count_n,
                    agg,
                    field,
                    values: Vec::new(),
                    last: None,
                },
                CepStageSpec::PatternCount {
                    predicate,
                    window_n,
                    threshold,
                } => Stage::PatternCount {
                    predicate,
                    window_n,
                    threshold,
                    window: VecDeque::new(),
                    last: None,
                },
            })
            .collect();
        Ok(Self { stages })
    }

    pub fn from_config(cfg: &Config) -> Result<Self, ProcessorError> {
        let spec: CepQuerySpec = serde_json::from_value(serde_json::json!({
            "stages": cfg.get("stages").cloned().unwrap_or(serde_json::Value::Null)
        }))
        .map_err(|e| ProcessorError::Config(format!("cep stages: {e}")))?;
        Self::new(&spec)
    }

    /// Pushes one tuple through every stage in order.
    pub fn push(&mut self, tuple: EventTuple, out: &mut Vec<EventTuple>, errors: &mut u64) {
        let mut current = vec![tuple];
        for stage in &mut self.stages {
            if current.is_empty() {
                break;
            }
            let mut next = Vec::new();
            for t in current {
                stage.apply(t, &mut next, errors);
            }
            current = next;
        }
        out.extend(current);
    }

    /// Convenience: run a whole finite stream through a fresh copy of the
    /// pipeline state.
    pub fn run(
        spec: &CepQuerySpec,
        input: impl IntoIterator<Item = EventTuple>,
    ) -> Result<(Vec<EventTuple>, u64), ProcessorError> {
        let mut pipeline = Self::new(spec)?;
        let mut out = Vec::new();
        let mut errors = 0;
        for t in input {
            pipeline.push(t, &mut out, &mut errors);
        }
        Ok((out, errors))
    }
}

impl Stage {
    fn apply(&mut self, tuple: EventTuple, out: &mut Vec<EventTuple>, errors: &mut u64) {
        match self {
            Stage::Filter(f) => match eval_filter(f, &tuple) {
                Ok(true) => out.push(tuple),
                Ok(false) => {}
                Err(_) => *errors += 1,
            },
            Stage::Scale {
                field,
                factor,
                offset,
            } => match field.as_str() {
                "v" => {
                    let mut t = tuple;
                    t.value = t.value * *factor + *offset;
                    out.push(t);
                }
                "t" => {
                    let mut t = tuple;
                    t.timestamp = (t.timestamp as f64 * *factor + *offset) as i64;
                    out.push(t);
                }
                _ => *errors += 1,
            },
            Stage::WindowAgg {
                count_n,
                agg,
                field,
                values,
                last,
            } => {
                match tuple.numeric_field(field) {
                    Some(v) => values.push(v),
                    None => {
                        *errors += 1;
                        return;
                    }
                }
                *last = Some(tuple);
                if values.len() >= *count_n {
                    let vs = std::mem::take(values);
                    let anchor = last.as_ref().expect("window non-empty");
                    out.push(aggregate(*agg, field, &vs, anchor));
                }
            }
            Stage::PatternCount {
                predicate,
                window_n,
                threshold,
                window,
                last,
            } => {
                let matched = match eval_filter(predicate, &tuple) {
                    Ok(m) => m,
                    Err(_) => {
                        *errors += 1;
                        false
                    }
                };
                window.push_back(matched);
                *last = Some(tuple);
                if window.len() >= *window_n {
                    let hits = window.iter().filter(|m| **m).count();
                    if hits >= *threshold {
                        let anchor = last.as_ref().expect("window non-empty");
                        out.push(EventTuple::new("alert", hits as f64, "count", anchor.timestamp));
                    }
                    window.clear();
                }
            }
        }
    }
}

fn aggregate(agg: AggKind, field: &str, values: &[f64], anchor: &EventTuple) -> EventTuple {
    let v = match agg {
        AggKind::Avg => values.iter().sum::<f64>() / values.len() as f64,
        AggKind::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        AggKind::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        AggKind::Count => values.len() as f64,
        AggKind::Sum => values.iter().sum(),
    };
    let name = format!("{}({})", agg_name(agg), field);
    let unit = if agg == AggKind::Count {
        "count".to_string()
    } else {
        anchor.unit.clone()
    };
    EventTuple::new(name, v, unit, anchor.timestamp)
}

fn agg_name(agg: AggKind) -> &'static str {
    match agg {
        AggKind::Avg => "avg",
        AggKind::Min => "min",
        AggKind::Max => "max",
        AggKind::Count => "count",
        AggKind::Sum => "sum",
    }
}

fn eval_filter(f: &FilterSpec, tuple: &EventTuple) -> Result<bool, ()> {
    match &f.constant {
        FilterConst::Number(c) => {
            let v = tuple.numeric_field(&f.field).ok_or(())?;
            Ok(match f.op {
                FilterOp::Lt => v < *c,
                FilterOp::Le => v <= *c,
                FilterOp::Gt => v > *c,
                FilterOp::Ge => v >= *c,
                FilterOp::Eq => v == *c,
                FilterOp::Ne => v != *c,
            })
        }
        FilterConst::Text(c) => {
            let v = tuple.string_field(&f.field).ok_or(())?;
            Ok(match f.op {
                FilterOp::Eq => v == c,
                FilterOp::Ne => v != c,
                _ => return Err(()),
            })
        }
    }
}

impl ProcessorLogic for CepPipeline {
    fn on_input(&mut self, input: PortData, ctx: &mut ProcCtx<'_>) -> Result<(), ProcessorError> {
        let tuple = match input {
            PortData::Tuple(t) => t,
            other => {
                return Err(ProcessorError::Failed(format!(
                    "cep expects stream input, got {other:?}"
                )))
            }
        };
        let mut out = Vec::new();
        let mut errors = 0;
        self.push(tuple, &mut out, &mut errors);
        for _ in 0..errors {
            ctx.soft_error("cep stage dropped tuple");
        }
        for t in out {
            ctx.emit(PortData::Tuple(t));
        }
        Ok(())
    }
}
