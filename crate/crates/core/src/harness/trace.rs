//! Per-round trace records and their CSV form.
//!
//! The file starts with the comment line `# trispec-trace v1`, followed by a
//! CSV header and one row per round. Empty cells stand for absent values.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::metrics::RoundCost;
use crate::router::{check_routing, RoundCase, RoundOutcome, RoutingFields};

use super::HarnessError;

pub const TRACE_HEADER: &str = "# trispec-trace v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run_id: String,
    pub prompt: usize,
    pub round: u64,
    pub case: RoundCase,
    pub tau_a: Option<usize>,
    pub tau_m: Option<usize>,
    pub tau_t: Option<usize>,
    pub emitted: usize,
    pub proxy_called: bool,
    pub target_called: bool,
    pub t_d: f64,
    pub t_v: f64,
    pub t_o: f64,
    pub cost: f64,
}

impl TraceRecord {
    pub fn new(run_id: &str, prompt: usize, round: u64, outcome: &RoundOutcome, cost: RoundCost) -> Self {
        Self {
            run_id: run_id.to_string(),
            prompt,
            round,
            case: outcome.case,
            tau_a: outcome.tau_a,
            tau_m: outcome.tau_m,
            tau_t: outcome.tau_t,
            emitted: outcome.emitted.len(),
            proxy_called: outcome.proxy_called,
            target_called: outcome.target_called,
            t_d: cost.drafting,
            t_v: cost.verification,
            t_o: cost.overhead,
            cost: cost.total(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        check_routing(&RoutingFields {
            case: self.case,
            tau_a: self.tau_a,
            tau_m: self.tau_m,
            tau_t: self.tau_t,
            emitted: self.emitted,
            proxy_called: self.proxy_called,
            target_called: self.target_called,
        })?;
        for (name, v) in [("t_d", self.t_d), ("t_v", self.t_v), ("t_o", self.t_o)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} = {v} is not a valid cost"));
            }
        }
        let sum = self.t_d + self.t_v + self.t_o;
        if (sum - self.cost).abs() > 1e-9 * sum.max(1.0) {
            return Err(format!("cost {} != t_d + t_v + t_o = {sum}", self.cost));
        }
        Ok(())
    }
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<(), HarnessError> {
    writeln!(w, "{TRACE_HEADER}")?;
    let mut csv = csv::Writer::from_writer(w);
    for r in records {
        csv.serialize(r)?;
    }
    if records.is_empty() {
        csv.write_record([
            "run_id",
            "prompt",
            "round",
            "case",
            "tau_a",
            "tau_m",
            "tau_t",
            "emitted",
            "proxy_called",
            "target_called",
            "t_d",
            "t_v",
            "t_o",
            "cost",
        ])?;
    }
    csv.flush()?;
    Ok(())
}

/// Read a trace, checking the version line and re-validating every row.
pub fn read_trace<R: Read>(r: R) -> Result<Vec<TraceRecord>, HarnessError> {
    let mut reader = BufReader::new(r);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != TRACE_HEADER {
        return Err(HarnessError::InvalidRow {
            row: 0,
            reason: format!("expected '{TRACE_HEADER}', got '{}'", first.trim_end()),
        });
    }
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_reader(reader).deserialize().enumerate() {
        let rec: TraceRecord = row?;
        rec.validate()
            .map_err(|reason| HarnessError::InvalidRow { row: i + 1, reason })?;
        out.push(rec);
    }
    Ok(out)
}
