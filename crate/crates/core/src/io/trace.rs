//! Epoch trace CSV.

use std::fmt::Write as _;
use std::path::Path;

use super::{read_text, write_atomic};
use crate::altmin::EpochTrace;
use crate::error::{Result, TcmfError};

pub const HEADER: &str =
    "epoch,lambda,linf_g,linf_l,linf_s,log_g,log_l,log_s,support_violations,wall_ms";

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// CSV text for `rows`. With `omit_timing` the `wall_ms` column is left empty,
/// which makes the output a pure function of the inputs.
pub fn render_trace(rows: &[EpochTrace], omit_timing: bool) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        let wall = if omit_timing {
            String::new()
        } else {
            format!("{:.3}", r.wall_ms)
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.lambda,
            opt(&r.linf_g),
            opt(&r.linf_l),
            opt(&r.linf_s),
            opt(&r.log_g),
            opt(&r.log_l),
            opt(&r.log_s),
            opt(&r.support_violations),
            wall,
        );
    }
    out
}

pub fn write_trace(path: &Path, rows: &[EpochTrace], omit_timing: bool) -> Result<()> {
    write_atomic(path, render_trace(rows, omit_timing).as_bytes())
}

pub fn parse_trace(text: &str, path: &Path) -> Result<Vec<EpochTrace>> {
    let corrupt = |reason: String| TcmfError::CorruptData {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(corrupt("unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(corrupt(format!(
                "row {} has {} fields",
                n + 1,
                fields.len()
            )));
        }
        let bad = |name: &str| corrupt(format!("row {}: bad {name}", n + 1));
        let real = |i: usize, name: &str| -> Result<Option<f64>> {
            if fields[i].is_empty() {
                Ok(None)
            } else {
                fields[i].parse().map(Some).map_err(|_| bad(name))
            }
        };
        rows.push(EpochTrace {
            epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
            lambda: fields[1].parse().map_err(|_| bad("lambda"))?,
            linf_g: real(2, "linf_g")?,
            linf_l: real(3, "linf_l")?,
            linf_s: real(4, "linf_s")?,
            log_g: real(5, "log_g")?,
            log_l: real(6, "log_l")?,
            log_s: real(7, "log_s")?,
            support_violations: if fields[8].is_empty() {
                None
            } else {
                Some(fields[8].parse().map_err(|_| bad("support_violations"))?)
            },
            wall_ms: real(9, "wall_ms")?.unwrap_or(0.0),
        });
    }
    Ok(rows)
}

pub fn read_trace(path: &Path) -> Result<Vec<EpochTrace>> {
    parse_trace(&read_text(path)?, path)
}
