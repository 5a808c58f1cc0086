//! Line-oriented text format for traces.
//!
//! ```text
//! # mchammer-trace v1
//! # probe=mc_hammer
//! # target=victim_0
//! 0,1000,1149
//! 1,1209,1515
//! ```
//!
//! Unknown metadata keys are preserved; unknown version strings are rejected.

use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::model::{Sample, Trace};

pub const TRACE_HEADER: &str = "# mchammer-trace v1";
const HEADER_PREFIX: &str = "# mchammer-trace ";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot serialize metadata: {0}")]
    InvalidMeta(String),
}

fn parse_err(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Parse {
        line,
        msg: msg.into(),
    }
}

fn valid_key(key: &str) -> bool {
    !key.is_empty() && key.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

pub fn write_trace<W: Write>(trace: &Trace, mut sink: W) -> Result<(), TraceError> {
    writeln!(sink, "{TRACE_HEADER}")?;
    for (key, value) in trace.meta.iter() {
        if !valid_key(key) {
            return Err(TraceError::InvalidMeta(format!(
                "key `{key}` does not match [a-z_]+"
            )));
        }
        if value.contains(['\n', '\r']) {
            return Err(TraceError::InvalidMeta(format!(
                "value of `{key}` spans several lines"
            )));
        }
        writeln!(sink, "# {key}={value}")?;
    }
    for s in &trace.samples {
        writeln!(sink, "{},{},{}", s.index, s.tsc_start, s.tsc_end)?;
    }
    sink.flush()?;
    Ok(())
}

pub fn trace_to_string(trace: &Trace) -> Result<String, TraceError> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    Ok(String::from_utf8(buf).expect("trace writer emits UTF-8"))
}

pub fn read_trace<R: BufRead>(source: R) -> Result<Trace, TraceError> {
    let mut lines = source.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(parse_err(1, "empty input, expected version header")),
    };
    let header = header.trim_end_matches('\r');
    if header != TRACE_HEADER {
        let msg = match header.strip_prefix(HEADER_PREFIX) {
            Some(version) => format!("unsupported trace version `{version}`"),
            None => format!("missing version header `{TRACE_HEADER}`"),
        };
        return Err(parse_err(1, msg));
    }

    let mut trace = Trace::default();
    let mut in_meta = true;
    for (n, line) in lines.enumerate() {
        let line_no = n + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if in_meta {
            if let Some(entry) = line.strip_prefix("# ") {
                let (key, value) = entry
                    .split_once('=')
                    .ok_or_else(|| parse_err(line_no, "metadata line without `=`"))?;
                if !valid_key(key) {
                    return Err(parse_err(
                        line_no,
                        format!("metadata key `{key}` does not match [a-z_]+"),
                    ));
                }
                trace.meta.set(key, value);
                continue;
            }
            in_meta = false;
        }
        let expected = trace.samples.len() as u64;
        let sample = parse_row(line, line_no)?;
        if sample.index != expected {
            return Err(parse_err(
                line_no,
                format!("index {} breaks the sequence, expected {expected}", sample.index),
            ));
        }
        trace.samples.push(sample);
    }
    Ok(trace)
}

fn parse_row(line: &str, line_no: usize) -> Result<Sample, TraceError> {
    let mut fields = line.split(',');
    let mut next = |name: &str| -> Result<u64, TraceError> {
        let field = fields
            .next()
            .ok_or_else(|| parse_err(line_no, format!("truncated row, missing {name}")))?;
        if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
            return Err(parse_err(line_no, format!("{name} `{field}` is not an unsigned integer")));
        }
        field
            .parse()
            .map_err(|_| parse_err(line_no, format!("{name} `{field}` overflows 64 bits")))
    };
    let index = next("index")?;
    let tsc_start = next("tsc_start")?;
    let tsc_end = next("tsc_end")?;
    if fields.next().is_some() {
        return Err(parse_err(line_no, "trailing fields after tsc_end"));
    }
    Ok(Sample::new(index, tsc_start, tsc_end))
}

pub fn trace_from_str(text: &str) -> Result<Trace, TraceError> {
    read_trace(text.as_bytes())
}
