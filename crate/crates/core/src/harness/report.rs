use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::report::{fmt_value, parse_rows_csv};

pub const REPORT_DIR: &str = "report";

/// Metrics aggregated in the summary, in column order.
pub const SUMMARY_METRICS: [&str; 6] = ["ps", "mppo", "mask_area", "nmi", "ari", "map"];

/// Mean and sample standard deviation of one metric over runs.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    /// Masking mode or trained variant.
    pub mode: String,
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn mode_rank(mode: &str) -> usize {
    ["late", "early", "single", "soft", "hard", "ste"].iter().position(|m| *m == mode).unwrap_or(usize::MAX)
}

fn metric_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut seeds: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")))
        .collect();
    seeds.sort();
    for seed in seeds {
        let mut runs: Vec<PathBuf> = fs::read_dir(&seed)?
            .filter_map(|e| e.ok().map(|e| e.path().join("metrics.csv")))
            .filter(|p| p.is_file())
            .collect();
        runs.sort();
        files.extend(runs);
    }
    Ok(files)
}

/// Aggregates the `key = all` rows of every `seed_*/*/metrics.csv` under
/// `root`, grouped by mode and metric.
pub fn summarize(root: &Path) -> Result<Vec<SummaryRow>> {
    if !root.is_dir() {
        return Err(Error::Config(format!("run directory {} does not exist", root.display())));
    }
    let files = metric_files(root)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no completed runs under {}", root.display())));
    }
    let mut groups: BTreeMap<(usize, String, String), Vec<f64>> = BTreeMap::new();
    for f in &files {
        let text = fs::read_to_string(f)?;
        let rows = parse_rows_csv(&text).ok_or_else(|| Error::Config(format!("malformed metrics file {}", f.display())))?;
        for r in rows.into_iter().filter(|r| r.key == "all") {
            groups.entry((mode_rank(&r.mode), r.mode, r.metric)).or_default().push(r.value);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((_, mode, metric), values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let std = if values.len() > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow { mode, metric, values, mean, std }
        })
        .collect())
}

/// Writes `summary.csv` (one row per mode, mean and std columns per metric)
/// and `report.md` under `root/report/`.
pub fn make_report(root: &Path) -> Result<Vec<SummaryRow>> {
    let rows = summarize(root)?;
    let mut modes: Vec<&str> = Vec::new();
    for r in &rows {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    let lookup = |mode: &str, metric: &str| rows.iter().find(|r| r.mode == mode && r.metric == metric);

    let mut csv = String::from("variant,runs");
    for m in SUMMARY_METRICS {
        write!(csv, ",{m}_mean,{m}_std").unwrap();
    }
    csv.push('\n');
    let mut md = String::from(
        "# Report\n\n\
         Synthetic desk-scale data with a toy ViT pretrained in this repository as the frozen backbone. \
         These numbers are not comparable to results on real datasets with foundation backbones.\n\n\
         Values are mean ± sample std over seeds.\n\n| variant | runs |",
    );
    for m in SUMMARY_METRICS {
        write!(md, " {m} |").unwrap();
    }
    md.push_str("\n|---|---|");
    md.push_str(&"---|".repeat(SUMMARY_METRICS.len()));
    md.push('\n');
    for mode in &modes {
        let runs = rows.iter().filter(|r| r.mode == *mode).map(|r| r.values.len()).max().unwrap_or(0);
        write!(csv, "{mode},{runs}").unwrap();
        write!(md, "| {mode} | {runs} |").unwrap();
        for m in SUMMARY_METRICS {
            match lookup(mode, m) {
                Some(r) => {
                    write!(csv, ",{},{}", fmt_value(r.mean), fmt_value(r.std)).unwrap();
                    write!(md, " {:.4} ± {:.4} |", r.mean, r.std).unwrap();
                }
                None => {
                    csv.push_str(",,");
                    md.push_str(" |");
                }
            }
        }
        csv.push('\n');
        md.push('\n');
    }
    let dir = root.join(REPORT_DIR);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("summary.csv"), csv)?;
    fs::write(dir.join("report.md"), md)?;
    Ok(rows)
}
