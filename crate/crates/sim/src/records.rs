//! Simulation output rows and their CSV forms.

use std::fmt::Write as _;
use std::io::{self, Write};

/// One agent epoch: truth, estimate and what the epoch did.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub time_s: f64,
    pub node_id: u32,
    pub true_position: [f64; 3],
    pub est_position: [f64; 3],
    /// Trace of the position covariance; NaN for least squares.
    pub cov_trace: f64,
    /// Completed range measurements this epoch.
    pub n_meas: u32,
    pub activated: bool,
    pub policy: String,
}

impl RunRecord {
    pub const HEADER: &'static str =
        "time_s,node_id,true_x,true_y,true_z,est_x,est_y,est_z,cov_trace,n_meas,activated,policy";

    pub fn error(&self) -> f64 {
        let d: f64 = (0..3).map(|i| (self.true_position[i] - self.est_position[i]).powi(2)).sum();
        d.sqrt()
    }

    fn write_row(&self, out: &mut String) {
        let [tx, ty, tz] = self.true_position;
        let [ex, ey, ez] = self.est_position;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.time_s,
            self.node_id,
            tx,
            ty,
            tz,
            ex,
            ey,
            ez,
            self.cov_trace,
            self.n_meas,
            u8::from(self.activated),
            self.policy
        );
    }
}

/// One averaged measurement with a neighbor, as the initiator saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRow {
    pub time_s: f64,
    pub initiator: String,
    pub responder: String,
    /// Completed exchanges averaged into `range`.
    pub count: u32,
    pub range: f64,
    pub true_range: f64,
    pub xi: f64,
}

impl MeasurementRow {
    pub const HEADER: &'static str = "time_s,initiator,responder,count,range,true_range,xi";

    fn write_row(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            self.time_s, self.initiator, self.responder, self.count, self.range, self.true_range, self.xi
        );
    }
}

/// One message at one receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time_s: f64,
    pub kind: &'static str,
    pub src: String,
    pub dst: String,
    pub outcome: &'static str,
}

impl TraceRow {
    pub const HEADER: &'static str = "time_s,kind,src,dst,outcome";

    fn write_row(&self, out: &mut String) {
        let _ = writeln!(out, "{},{},{},{},{}", self.time_s, self.kind, self.src, self.dst, self.outcome);
    }
}

fn to_csv<T>(header: &str, rows: &[T], write_row: impl Fn(&T, &mut String)) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(header);
    out.push('\n');
    for r in rows {
        write_row(r, &mut out);
    }
    out
}

pub fn records_csv(rows: &[RunRecord]) -> String {
    to_csv(RunRecord::HEADER, rows, RunRecord::write_row)
}

pub fn measurements_csv(rows: &[MeasurementRow]) -> String {
    to_csv(MeasurementRow::HEADER, rows, MeasurementRow::write_row)
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    to_csv(TraceRow::HEADER, rows, TraceRow::write_row)
}

pub fn write_records<W: Write>(mut w: W, rows: &[RunRecord]) -> io::Result<()> {
    w.write_all(records_csv(rows).as_bytes())
}

/// Parses a RunRecord CSV as written by [`records_csv`].
pub fn parse_records(text: &str) -> Result<Vec<RunRecord>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == RunRecord::HEADER => {}
        _ => return Err("missing or unexpected RunRecord header".into()),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |what: &str| format!("line {}: {what}", i + 2);
            if f.len() != 12 {
                return Err(bad("expected 12 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number `{s}`")));
            Ok(RunRecord {
                time_s: num(f[0])?,
                node_id: f[1].parse().map_err(|_| bad("bad node_id"))?,
                true_position: [num(f[2])?, num(f[3])?, num(f[4])?],
                est_position: [num(f[5])?, num(f[6])?, num(f[7])?],
                cov_trace: num(f[8])?,
                n_meas: f[9].parse().map_err(|_| bad("bad n_meas"))?,
                activated: match f[10] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("activated must be 0 or 1")),
                },
                policy: f[11].to_string(),
            })
        })
        .collect()
}
