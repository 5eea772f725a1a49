//! Consolidated report: one row per (experiment, metric).
//!
//! Columns of `report.csv`, in order:
//!
//! - `experiment`: the producing stage directory relative to the output
//!   root, e.g. `eval/teacher`, `bounds/embed-match`, `students/distill`;
//! - `metric`: metric name, e.g. `recall@5` or `lemma4.lhs`;
//! - `value`: the number as stored in the source file, written in shortest
//!   round-trip form. Verdicts are 1 (holds) or 0.
//!
//! `report.json` holds the same rows as `{"columns": [...], "rows": [...]}`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use irdistill_core::bounds::BoundReport;
use irdistill_core::retrieval::Metrics;
use serde::{Deserialize, Serialize};

use crate::commands::{BoundsSummary, DistillSummary, BOUNDS_DIR, EVAL_DIR, STUDENTS_DIR};

pub const COLUMNS: [&str; 3] = ["experiment", "metric", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub experiment: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

/// Source files found under `root`, in a stable order, plus the stage
/// directories that lack theirs.
pub fn discover(root: &Path) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for (dir, file) in [
        (STUDENTS_DIR, "summary.json"),
        (EVAL_DIR, "metrics.json"),
        (BOUNDS_DIR, "bounds.json"),
    ] {
        let base = root.join(dir);
        if !base.is_dir() {
            continue;
        }
        let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&base)
            .with_context(|| format!("listing {}", base.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        subdirs.retain(|p| p.is_dir());
        subdirs.sort();
        for d in subdirs {
            let f = d.join(file);
            if f.is_file() {
                found.push(f);
            } else {
                missing.push(f);
            }
        }
    }
    Ok((found, missing))
}

fn experiment_name(root: &Path, file: &Path) -> String {
    let dir = file.parent().unwrap_or(file);
    let rel = dir.strip_prefix(root).unwrap_or(dir);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn bound_rows(prefix: &str, r: &BoundReport, push: &mut impl FnMut(String, f64)) {
    push(format!("{prefix}.lhs"), r.lhs);
    push(format!("{prefix}.rhs"), r.rhs);
    push(format!("{prefix}.holds"), if r.verdict { 1.0 } else { 0.0 });
    push(format!("{prefix}.K"), r.k);
    push(format!("{prefix}.r_emb_q"), r.r_emb_q);
    push(format!("{prefix}.r_emb_d"), r.r_emb_d);
    push(format!("{prefix}.term_label"), r.term_label);
    for (name, v) in [
        ("delta_teacher_estimate", r.delta_teacher_estimate),
        ("term_label_heldout", r.term_label_heldout),
        ("uniform_deviation_lower_bound", r.uniform_deviation_lower_bound),
    ] {
        if let Some(v) = v {
            push(format!("{prefix}.{name}"), v);
        }
    }
}

/// Rows of one source file, chosen by its file name.
pub fn rows_of(root: &Path, file: &Path) -> Result<Vec<Row>> {
    let experiment = experiment_name(root, file);
    let bytes = std::fs::read(file).with_context(|| format!("reading {}", file.display()))?;
    let parse_err = || format!("parsing {}", file.display());
    let mut rows = Vec::new();
    let mut push = |metric: String, value: f64| {
        rows.push(Row {
            experiment: experiment.clone(),
            metric,
            value,
        })
    };
    match file.file_name().and_then(|n| n.to_str()) {
        Some("metrics.json") => {
            let m: Metrics = serde_json::from_slice(&bytes).with_context(parse_err)?;
            for (name, v) in m.named() {
                push(name.to_string(), v);
            }
        }
        Some("bounds.json") => {
            let b: BoundsSummary = serde_json::from_slice(&bytes).with_context(parse_err)?;
            bound_rows("lemma4", &b.lemma4, &mut push);
            bound_rows("lemma5", &b.lemma5, &mut push);
            bound_rows("theorem1", &b.theorem1, &mut push);
            push("mean_abs_discrepancy".to_string(), b.mean_abs_discrepancy);
        }
        Some("summary.json") => {
            let s: DistillSummary = serde_json::from_slice(&bytes).with_context(parse_err)?;
            if let Some(v) = s.initial_loss {
                push("initial_loss".to_string(), v);
            }
            if let Some(v) = s.final_loss {
                push("final_loss".to_string(), v);
            }
        }
        _ => bail!(
            "{}: unsupported report input (expected metrics.json, bounds.json or summary.json)",
            file.display()
        ),
    }
    Ok(rows)
}

/// Builds the report from explicit files, or from everything under `root`
/// when `inputs` is empty. Missing files are listed in the error. Also
/// returns the files read.
pub fn build(root: &Path, inputs: &[PathBuf]) -> Result<(Report, Vec<PathBuf>)> {
    let files = if inputs.is_empty() {
        let (found, missing) = discover(root)?;
        if !missing.is_empty() {
            bail!("missing report inputs: {}", list(&missing));
        }
        found
    } else {
        let missing: Vec<PathBuf> = inputs.iter().filter(|p| !p.is_file()).cloned().collect();
        if !missing.is_empty() {
            bail!("missing report inputs: {}", list(&missing));
        }
        inputs.to_vec()
    };
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(rows_of(root, f)?);
    }
    let report = Report {
        columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
    };
    Ok((report, files))
}

fn list(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn to_csv(report: &Report) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in &report.rows {
        w.write_record([r.experiment.as_str(), r.metric.as_str(), &r.value.to_string()])?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_csv(bytes: &[u8]) -> Vec<Row> {
        let mut r = csv::Reader::from_reader(bytes);
        assert_eq!(r.headers().unwrap().iter().collect::<Vec<_>>(), COLUMNS);
        r.records()
            .map(|rec| {
                let rec = rec.unwrap();
                Row {
                    experiment: rec[0].to_string(),
                    metric: rec[1].to_string(),
                    value: rec[2].parse().unwrap(),
                }
            })
            .collect()
    }

    fn metrics(x: f64) -> Metrics {
        Metrics {
            recall_at_1: x,
            recall_at_5: x + 0.1,
            recall_at_20: 1.0 / 3.0,
            relaxed_recall_at_5: x * 1e-17,
            mrr_at_10: std::f64::consts::PI,
            ndcg_at_10: 100.0 * 2f64.ln() / 3f64.ln(),
        }
    }

    fn write_metrics(root: &Path, name: &str, m: &Metrics) -> PathBuf {
        let dir = root.join(EVAL_DIR).join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let f = dir.join("metrics.json");
        std::fs::write(&f, serde_json::to_vec(m).unwrap()).unwrap();
        f
    }

    #[test]
    fn empty_root_gives_header_only() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join(EVAL_DIR)).unwrap();
        let (r, files) = build(dir.path(), &[]).unwrap();
        assert!(r.rows.is_empty() && files.is_empty());
        assert_eq!(to_csv(&r).unwrap(), b"experiment,metric,value\n");
    }

    #[test]
    fn two_experiments_two_rows_per_metric_with_exact_values() {
        let dir = tempfile::tempdir().unwrap();
        let a = metrics(12.345678901234567);
        let b = metrics(0.1 + 0.2);
        write_metrics(dir.path(), "a", &a);
        write_metrics(dir.path(), "b", &b);
        let (r, _) = build(dir.path(), &[]).unwrap();
        let rows = from_csv(&to_csv(&r).unwrap());
        assert_eq!(rows, r.rows);
        for (name, _) in a.named() {
            assert_eq!(rows.iter().filter(|row| row.metric == name).count(), 2);
        }
        for (exp, m) in [("eval/a", &a), ("eval/b", &b)] {
            for (name, v) in m.named() {
                let row = rows.iter().find(|r| r.experiment == exp && r.metric == name).unwrap();
                assert_eq!(row.value.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn missing_inputs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join(EVAL_DIR).join("half-done")).unwrap();
        let err = build(dir.path(), &[]).unwrap_err().to_string();
        assert!(err.contains("half-done"), "{err}");
        let gone = [dir.path().join("x/metrics.json"), dir.path().join("y/bounds.json")];
        let err = build(dir.path(), &gone).unwrap_err().to_string();
        assert!(err.contains("x/metrics.json") && err.contains("y/bounds.json"), "{err}");
    }
}
