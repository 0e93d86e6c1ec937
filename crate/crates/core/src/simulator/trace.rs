//! CSV trace export and import.

use std::io::{Read, Write};

use thiserror::Error;

use super::SimTrace;
use crate::controller::Mode;

pub const TRACE_HEADER: [&str; 21] = [
    "t",
    "q1",
    "q2",
    "q3",
    "q4",
    "q5",
    "q6",
    "qd1",
    "qd2",
    "qd3",
    "qd4",
    "qd5",
    "qd6",
    "mode",
    "sigma_fov",
    "xi",
    "yi",
    "kbar",
    "xe",
    "ye",
    "ze",
];

fn header() -> &'static [&'static str] {
    &TRACE_HEADER
}

/// One parsed line of a trace file.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub q: [f64; 6],
    pub qdot: [f64; 6],
    pub mode: Mode,
    pub sigma_fov: f64,
    pub xi: f64,
    pub yi: f64,
    pub k_bar: f64,
    pub ee: [f64; 3],
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("trace header does not match the expected columns")]
    Header,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub fn write_trace_csv<W: Write>(trace: &SimTrace, writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header())?;
    for r in &trace.records {
        let mut row: Vec<String> = Vec::with_capacity(21);
        row.push(r.t.to_string());
        row.extend(r.q.iter().map(f64::to_string));
        row.extend(r.qdot.iter().map(f64::to_string));
        row.push(r.mode.label().to_string());
        row.push(r.sigma_fov.to_string());
        row.push(r.spray_point.x.to_string());
        row.push(r.spray_point.y.to_string());
        row.push(r.k_bar.to_string());
        row.extend(r.ee_position.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(reader: R) -> Result<Vec<TraceRow>, TraceParseError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    if rdr.headers()?.iter().ne(header().iter().copied()) {
        return Err(TraceParseError::Header);
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| TraceParseError::Malformed { line, message };
        if record.len() != 21 {
            return Err(bad(format!("expected 21 fields, found {}", record.len())));
        }
        let num = |i: usize| -> Result<f64, TraceParseError> {
            record[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("column `{}`: {e}", header()[i])))
        };
        let mut q = [0.0; 6];
        let mut qdot = [0.0; 6];
        for i in 0..6 {
            q[i] = num(1 + i)?;
            qdot[i] = num(7 + i)?;
        }
        let mode = record[13]
            .trim()
            .parse::<Mode>()
            .map_err(|e| bad(format!("column `mode`: {e}")))?;
        rows.push(TraceRow {
            t: num(0)?,
            q,
            qdot,
            mode,
            sigma_fov: num(14)?,
            xi: num(15)?,
            yi: num(16)?,
            k_bar: num(17)?,
            ee: [num(18)?, num(19)?, num(20)?],
        });
    }
    Ok(rows)
}
