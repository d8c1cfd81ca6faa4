//! File formats: predictor parameters, event traces, datasets and loss
//! traces. Every parser returns a `Parse` error on malformed input and never
//! panics.

use crate::engine::SlotEvent;
use crate::error::{FrescoError, Result};
use crate::model::{FeatureRow, FEATURES};
use crate::risk::{Dataset, LstmParams, Sample};

const PARAMS_MAGIC: &str = "fresco-lstm 1";

/// Flat text tensor: a magic line, `input`, `hidden` and `count` header
/// lines, then one value per line in the flat parameter order.
pub fn params_to_text(p: &LstmParams) -> String {
    let mut out = format!("{PARAMS_MAGIC}\ninput {}\nhidden {}\ncount {}\n", p.input, p.hidden, p.len());
    for v in p.iter() {
        out.push_str(&format!("{v:?}\n"));
    }
    out
}

fn header_value(line: Option<&str>, key: &str) -> Result<usize> {
    let line = line.ok_or_else(|| FrescoError::parse("params file", format!("missing `{key}` line")))?;
    let rest = line
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| FrescoError::parse("params file", format!("expected `{key} <n>`, got `{line}`")))?;
    rest.trim()
        .parse()
        .map_err(|_| FrescoError::parse("params file", format!("bad `{key}` value `{rest}`")))
}

pub fn params_from_text(text: &str) -> Result<LstmParams> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some(PARAMS_MAGIC) {
        return Err(FrescoError::parse("params file", "missing magic line"));
    }
    let input = header_value(lines.next(), "input")?;
    let hidden = header_value(lines.next(), "hidden")?;
    let count = header_value(lines.next(), "count")?;
    if input != FEATURES || hidden == 0 || hidden > 4096 {
        return Err(FrescoError::parse("params file", format!("unsupported shape {input}x{hidden}")));
    }
    let mut p = LstmParams::zeros(input, hidden);
    if count != p.len() {
        return Err(FrescoError::parse("params file", format!("count {count} does not match shape ({})", p.len())));
    }
    let mut n = 0;
    for line in lines {
        if n == count {
            return Err(FrescoError::parse("params file", "trailing values"));
        }
        let v: f64 = line
            .parse()
            .map_err(|_| FrescoError::parse("params file", format!("bad value `{line}`")))?;
        if !v.is_finite() {
            return Err(FrescoError::parse("params file", "non-finite value"));
        }
        p.set(n, v);
        n += 1;
    }
    if n != count {
        return Err(FrescoError::parse("params file", format!("expected {count} values, found {n}")));
    }
    Ok(p)
}

/// One JSON object per line.
pub fn trace_to_jsonl(events: &[SlotEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}

pub fn trace_from_jsonl(text: &str) -> Result<Vec<SlotEvent>> {
    let mut out: Vec<SlotEvent> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: SlotEvent = serde_json::from_str(line).map_err(|err| FrescoError::parse("trace", format!("line {}: {err}", n + 1)))?;
        if out.last().is_some_and(|prev| prev.t > e.t) {
            return Err(FrescoError::parse("trace", format!("line {}: events out of time order", n + 1)));
        }
        out.push(e);
    }
    Ok(out)
}

/// Header for a dataset with observation window `window`.
pub fn dataset_header(window: usize) -> String {
    let mut cols = vec!["y".to_string()];
    for step in 0..window {
        for f in 0..FEATURES {
            cols.push(format!("x{step}_{f}"));
        }
    }
    cols.join(",")
}

/// One row per sample: the label, then the window flattened oldest first.
pub fn dataset_to_csv(data: &Dataset) -> String {
    let window = data.samples.first().map_or(0, |s| s.x.len());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(dataset_header(window).split(',')).expect("in-memory write");
    for s in &data.samples {
        let mut rec = vec![format!("{:?}", s.y)];
        rec.extend(s.x.iter().flatten().map(|v| format!("{v:?}")));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| FrescoError::parse("dataset", e))?;
    let width = header.len();
    if width == 0 || header.get(0) != Some("y") || (width - 1) % FEATURES != 0 {
        return Err(FrescoError::parse("dataset", "header must be `y` followed by window x features columns"));
    }
    let window = (width - 1) / FEATURES;
    if dataset_header(window) != header.iter().collect::<Vec<_>>().join(",") {
        return Err(FrescoError::parse("dataset", "unexpected column names"));
    }
    let mut samples = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| FrescoError::parse("dataset", e))?;
        let mut vals = Vec::with_capacity(width);
        for cell in rec.iter() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| FrescoError::parse("dataset", format!("bad number `{cell}`")))?;
            if !v.is_finite() {
                return Err(FrescoError::parse("dataset", "non-finite value"));
            }
            vals.push(v);
        }
        let y = vals[0];
        if y != 0.0 && y != 1.0 {
            return Err(FrescoError::parse("dataset", format!("label must be 0 or 1, got {y}")));
        }
        let x: Vec<FeatureRow> = vals[1..]
            .chunks_exact(FEATURES)
            .map(|c| {
                let mut row = [0.0; FEATURES];
                row.copy_from_slice(c);
                row
            })
            .collect();
        samples.push(Sample { x, y });
    }
    Ok(Dataset { samples })
}

pub fn loss_trace_to_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l:?}\n", i + 1));
    }
    out
}
