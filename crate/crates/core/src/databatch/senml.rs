// SPDX-License-Identifier: Apache-2.0

//! SenML-shaped record files: newline-delimited JSON records, each carrying
//! a base name and a list of events.

use serde::{Deserialize, Serialize};

/// One record line: `{"bn": str, "e": [{"n","u","v","t"}, ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenmlRecord {
    pub bn: String,
    pub e: Vec<SenmlEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenmlEvent {
    pub n: String,
    #[serde(default)]
    pub u: String,
    pub v: f64,
    pub t: f64,
}

impl SenmlRecord {
    /// Flattens the record into event tuples; names are `<bn><n>`.
    pub fn tuples(&self) -> Vec<super::EventTuple> {
        self.e
            .iter()
            .map(|ev| super::EventTuple {
                name: format!("{}{}", self.bn, ev.n),
                value: ev.v,
                unit: ev.u.clone(),
                timestamp: (ev.t * 1000.0) as i64,
            })
            .collect()
    }
}

/// Parses newline-delimited SenML records, skipping malformed lines.
///
/// Returns the parsed records and the number of lines skipped.
pub fn parse_senml_lines(content: &[u8]) -> (Vec<SenmlRecord>, usize) {
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in content.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
        match serde_json::from_slice::<SenmlRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) => skipped += 1,
        }
    }
    (records, skipped)
}
