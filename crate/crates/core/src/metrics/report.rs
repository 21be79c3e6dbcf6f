//! CSV output of metric values.

use std::fmt::Write;

/// One `(metric, part/attribute, masking_mode, value)` record.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub key: String,
    pub mode: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(metric: &str, key: impl ToString, mode: &str, value: f64) -> Self {
        Self { metric: metric.into(), key: key.to_string(), mode: mode.into(), value }
    }
}

/// Shortest round-trip representation, so values survive a CSV round trip.
pub fn fmt_value(v: f64) -> String {
    format!("{v:?}")
}

pub fn rows_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,part,masking_mode,value\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.metric, r.key, r.mode, fmt_value(r.value)).unwrap();
    }
    out
}

/// Parses the output of [`rows_csv`].
pub fn parse_rows_csv(text: &str) -> Option<Vec<MetricRow>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f.len() == 4).then_some(())?;
            Some(MetricRow { metric: f[0].into(), key: f[1].into(), mode: f[2].into(), value: f[3].parse().ok()? })
        })
        .collect()
}

/// `[K x G]` mAP matrix, one row per discovered part.
pub fn matrix_csv(matrix: &[Vec<f64>]) -> String {
    let groups = matrix.first().map_or(0, Vec::len);
    let mut out = String::from("part");
    for g in 0..groups {
        write!(out, ",g{g}").unwrap();
    }
    out.push('\n');
    for (k, row) in matrix.iter().enumerate() {
        write!(out, "k{k}").unwrap();
        for v in row {
            write!(out, ",{}", fmt_value(*v)).unwrap();
        }
        out.push('\n');
    }
    out
}
