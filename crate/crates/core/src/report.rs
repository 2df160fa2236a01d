//! Weight tables and long-format CSV exports for external plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dro::{DroTrace, MixtureWeights, Provenance};
use crate::error::{Error, Result};
use crate::fsutil::{write_json, write_text};
use crate::reference::{csv_error, CheckpointRecord};

/// Relative change against the baseline row beyond which a cell is marked.
pub const HIGHLIGHT_THRESHOLD: f64 = 0.25;

/// Version of the long-format export layout described in `schema.json`.
pub const EXPORT_SCHEMA_VERSION: u32 = 1;
pub const TRACE_FILE: &str = "dro_trace.csv";
pub const LOSSES_FILE: &str = "reference_losses.csv";
pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub alpha: f64,
    /// Display text without the mark, e.g. `16.3%`.
    pub percent: String,
    pub mark: Option<Mark>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub method: String,
    pub cells: Vec<Cell>,
}

/// A rendered comparison of mixture weights, one row per method.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    pub domains: Vec<String>,
    /// Index of the row the marks compare against.
    pub baseline: usize,
    pub rows: Vec<WeightRow>,
}

/// Decimal places shown for a percentage: two below 10%, one above.
fn decimals(percent: f64) -> i32 {
    if percent < 9.995 {
        2
    } else {
        1
    }
}

fn quantize(percent: f64) -> f64 {
    let scale = 10f64.powi(decimals(percent));
    (percent * scale).round() / scale
}

/// Rounds each percentage to its display precision, then nudges the
/// coarsest cells by one display unit until the shown total is within 0.05
/// of the exact one (100 for normalized weights).
fn display_percentages(alpha: &[f64]) -> Vec<f64> {
    let exact: Vec<f64> = alpha.iter().map(|a| a * 100.0).collect();
    let total: f64 = exact.iter().sum();
    let mut shown: Vec<f64> = exact.iter().map(|&p| quantize(p)).collect();
    for _ in 0..alpha.len() {
        let excess: f64 = shown.iter().sum::<f64>() - total;
        if excess.abs() <= 0.05 + 1e-9 {
            break;
        }
        // The cell whose rounding moved it furthest in the offending direction.
        let Some(i) = (0..shown.len())
            .filter(|&i| decimals(exact[i]) == 1)
            .max_by(|&a, &b| {
                let da = (shown[a] - exact[a]) * excess.signum();
                let db = (shown[b] - exact[b]) * excess.signum();
                da.total_cmp(&db)
            })
        else {
            break;
        };
        shown[i] = ((shown[i] - 0.1 * excess.signum()) * 10.0).round() / 10.0;
    }
    shown
}

fn format_percent(shown: f64, exact: f64) -> String {
    format!("{:.*}%", decimals(exact) as usize, shown)
}

fn mark_for(alpha: f64, baseline: f64) -> Option<Mark> {
    if baseline <= 0.0 {
        return (alpha > 0.0).then_some(Mark::Up);
    }
    let change = alpha / baseline - 1.0;
    if change > HIGHLIGHT_THRESHOLD {
        Some(Mark::Up)
    } else if change < -HIGHLIGHT_THRESHOLD {
        Some(Mark::Down)
    } else {
        None
    }
}

/// Builds the table. Marks compare each cell with the first row whose
/// provenance is `uniform`, or with the first row if there is none.
pub fn render_weight_table(rows: &[(String, MixtureWeights)], domains: &[String]) -> Result<WeightTable> {
    if rows.is_empty() {
        return Err(Error::invalid("no weight rows to report"));
    }
    for (name, w) in rows {
        if w.len() != domains.len() {
            return Err(Error::DimensionMismatch {
                context: format!("weights of `{name}`"),
                expected: domains.len(),
                found: w.len(),
            });
        }
    }
    let baseline = rows
        .iter()
        .position(|(_, w)| w.provenance == Provenance::Uniform)
        .unwrap_or(0);
    let base = &rows[baseline].1.alpha;
    let rows = rows
        .iter()
        .enumerate()
        .map(|(r, (method, w))| {
            let shown = display_percentages(&w.alpha);
            let cells = w
                .alpha
                .iter()
                .zip(&shown)
                .zip(base)
                .map(|((&a, &s), &b)| Cell {
                    alpha: a,
                    percent: format_percent(s, a * 100.0),
                    mark: if r == baseline { None } else { mark_for(a, b) },
                })
                .collect();
            WeightRow {
                method: method.clone(),
                cells,
            }
        })
        .collect();
    Ok(WeightTable {
        domains: domains.to_vec(),
        baseline,
        rows,
    })
}

impl WeightTable {
    /// Fixed-width text; marked cells carry `↑` or `↓`.
    pub fn to_text(&self) -> String {
        let render = |c: &Cell| match c.mark {
            Some(Mark::Up) => format!("{} ↑", c.percent),
            Some(Mark::Down) => format!("{} ↓", c.percent),
            None => c.percent.clone(),
        };
        let mut widths: Vec<usize> = self.domains.iter().map(|d| d.chars().count()).collect();
        let mut first = "method".len();
        for row in &self.rows {
            first = first.max(row.method.chars().count());
            for (w, c) in widths.iter_mut().zip(&row.cells) {
                *w = (*w).max(render(c).chars().count());
            }
        }
        let mut out = String::new();
        let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w.saturating_sub(s.chars().count())));
        let _ = write!(out, "{}", pad("method", first));
        for (d, w) in self.domains.iter().zip(&widths) {
            let _ = write!(out, "  {}", pad(d, *w));
        }
        out = out.trim_end().to_string();
        out.push('\n');
        for row in &self.rows {
            let mut line = pad(&row.method, first);
            for (c, w) in row.cells.iter().zip(&widths) {
                let _ = write!(line, "  {}", pad(&render(c), *w));
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    /// `method,domain,alpha,percent,mark` with `alpha` at full precision.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
        w.write_record(["method", "domain", "alpha", "percent", "mark"]).map_err(to_err)?;
        for row in &self.rows {
            for (d, c) in self.domains.iter().zip(&row.cells) {
                let mark = match c.mark {
                    Some(Mark::Up) => "up",
                    Some(Mark::Down) => "down",
                    None => "",
                };
                w.write_record([row.method.as_str(), d, &c.alpha.to_string(), &c.percent, mark])
                    .map_err(to_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `weights.txt` and `weights.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("weights.txt"), &self.to_text())?;
        write_text(&dir.join("weights.csv"), &self.to_csv()?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ExportSchema {
    version: u32,
    columns: Vec<String>,
    files: BTreeMap<String, Vec<String>>,
}

/// Writes the DRO trace, and the reference loss curves when given, as
/// `step,domain,metric,value` CSVs plus a `schema.json` describing them.
pub fn export_trace(dir: &Path, names: &[String], trace: &DroTrace, records: &[CheckpointRecord]) -> Result<Vec<PathBuf>> {
    if trace.is_empty() {
        return Err(Error::invalid("cannot export an empty DRO trace"));
    }
    if trace.num_domains() != names.len() {
        return Err(Error::DimensionMismatch {
            context: "trace domains".into(),
            expected: names.len(),
            found: trace.num_domains(),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    let mut written = Vec::new();

    let path = dir.join(TRACE_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["step", "domain", "metric", "value"]).map_err(|e| csv_error(&path, e))?;
    for (t, (alpha, excess)) in trace.alphas.iter().zip(&trace.excess).enumerate() {
        let step = (t + 1).to_string();
        for (metric, values) in [("alpha", alpha), ("excess_loss", excess)] {
            for (name, v) in names.iter().zip(values) {
                w.write_record([step.as_str(), name, metric, &v.to_string()])
                    .map_err(|e| csv_error(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    files.insert(TRACE_FILE.to_string(), vec!["alpha".into(), "excess_loss".into()]);
    written.push(path);

    if !records.is_empty() {
        let path = dir.join(LOSSES_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["step", "domain", "metric", "value"]).map_err(|e| csv_error(&path, e))?;
        for r in records {
            let step = r.step.to_string();
            for (metric, values) in [("train_loss", &r.train_loss), ("val_loss", &r.val_loss)] {
                for (name, v) in names.iter().zip(values) {
                    w.write_record([step.as_str(), name, metric, &v.to_string()])
                        .map_err(|e| csv_error(&path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.insert(LOSSES_FILE.to_string(), vec!["train_loss".into(), "val_loss".into()]);
        written.push(path);
    }

    let schema = ExportSchema {
        version: EXPORT_SCHEMA_VERSION,
        columns: ["step", "domain", "metric", "value"].map(String::from).to_vec(),
        files,
    };
    let path = dir.join(SCHEMA_FILE);
    write_json(&path, &schema)?;
    written.push(path);
    Ok(written)
}

/// Reads back a trace written by [`export_trace`]; `names` fixes the domain
/// order.
pub fn import_trace(dir: &Path, names: &[String]) -> Result<DroTrace> {
    let schema_path = dir.join(SCHEMA_FILE);
    let schema: ExportSchema = crate::fsutil::read_json(&schema_path)?;
    if schema.version != EXPORT_SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported export schema version {}",
            schema_path.display(),
            schema.version
        )));
    }
    #[derive(Deserialize)]
    struct Row {
        step: usize,
        domain: String,
        metric: String,
        value: f64,
    }
    let path = dir.join(TRACE_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let k = names.len();
    let mut steps: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in r.deserialize() {
        let row: Row = row.map_err(|e| csv_error(&path, e))?;
        let i = names
            .iter()
            .position(|n| *n == row.domain)
            .ok_or_else(|| Error::invalid(format!("{}: unknown domain `{}`", path.display(), row.domain)))?;
        let entry = steps
            .entry(row.step)
            .or_insert_with(|| (vec![f64::NAN; k], vec![f64::NAN; k]));
        match row.metric.as_str() {
            "alpha" => entry.0[i] = row.value,
            "excess_loss" => entry.1[i] = row.value,
            other => return Err(Error::invalid(format!("{}: unknown metric `{other}`", path.display()))),
        }
    }
    let mut trace = DroTrace::new();
    for (expected, (step, (alpha, excess))) in (1..).zip(steps) {
        if step != expected || alpha.iter().chain(&excess).any(|v| v.is_nan()) {
            return Err(Error::invalid(format!("{}: step {step} is incomplete", path.display())));
        }
        trace.push(alpha, excess);
    }
    if trace.is_empty() {
        return Err(Error::invalid(format!("{}: no trace rows", path.display())));
    }
    Ok(trace)
}

/// `step,domain,alpha,excess_loss`, one row per step and domain.
pub fn write_alpha_trace(path: &Path, names: &[String], trace: &DroTrace) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["step", "domain", "alpha", "excess_loss"])
        .map_err(|e| csv_error(path, e))?;
    for (t, (alpha, excess)) in trace.alphas.iter().zip(&trace.excess).enumerate() {
        let step = (t + 1).to_string();
        for ((name, a), l) in names.iter().zip(alpha).zip(excess) {
            w.write_record([step.as_str(), name, &a.to_string(), &l.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_alpha_trace`].
pub fn read_alpha_trace(path: &Path, names: &[String]) -> Result<DroTrace> {
    #[derive(Deserialize)]
    struct Row {
        step: usize,
        domain: String,
        alpha: f64,
        excess_loss: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let k = names.len();
    let mut trace = DroTrace::new();
    let mut current: Option<(usize, Vec<f64>, Vec<f64>)> = None;
    let flush = |cur: Option<(usize, Vec<f64>, Vec<f64>)>, trace: &mut DroTrace| -> Result<()> {
        if let Some((step, alpha, excess)) = cur {
            if step != trace.len() + 1 || alpha.iter().any(|v| v.is_nan()) {
                return Err(Error::invalid(format!("{}: step {step} is incomplete", path.display())));
            }
            trace.push(alpha, excess);
        }
        Ok(())
    };
    for row in r.deserialize() {
        let row: Row = row.map_err(|e| csv_error(path, e))?;
        let i = names
            .iter()
            .position(|n| *n == row.domain)
            .ok_or_else(|| Error::invalid(format!("{}: unknown domain `{}`", path.display(), row.domain)))?;
        if current.as_ref().is_none_or(|c| c.0 != row.step) {
            flush(current.take(), &mut trace)?;
            current = Some((row.step, vec![f64::NAN; k], vec![f64::NAN; k]));
        }
        let c = current.as_mut().expect("set above");
        c.1[i] = row.alpha;
        c.2[i] = row.excess_loss;
    }
    flush(current, &mut trace)?;
    if trace.is_empty() {
        return Err(Error::invalid(format!("{}: no trace rows", path.display())));
    }
    Ok(trace)
}

/// `{domain: alpha}` in domain order.
pub fn weights_json(names: &[String], weights: &MixtureWeights) -> Result<serde_json::Value> {
    if names.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            context: "weights file".into(),
            expected: names.len(),
            found: weights.len(),
        });
    }
    let map: serde_json::Map<String, serde_json::Value> = names
        .iter()
        .zip(&weights.alpha)
        .map(|(n, a)| (n.clone(), serde_json::Value::from(*a)))
        .collect();
    Ok(serde_json::Value::Object(map))
}

pub fn write_weights(path: &Path, names: &[String], weights: &MixtureWeights) -> Result<()> {
    write_json(path, &weights_json(names, weights)?)
}

/// Reads a `{domain: alpha}` file, keeping file order.
pub fn read_weights(path: &Path, provenance: Provenance) -> Result<(Vec<String>, MixtureWeights)> {
    let map: serde_json::Map<String, serde_json::Value> = crate::fsutil::read_json(path)?;
    let mut names = Vec::with_capacity(map.len());
    let mut alpha = Vec::with_capacity(map.len());
    for (name, v) in map {
        let a = v
            .as_f64()
            .ok_or_else(|| Error::invalid(format!("{}: weight of `{name}` is not a number", path.display())))?;
        names.push(name);
        alpha.push(a);
    }
    Ok((names, MixtureWeights::from_unnormalized(alpha, provenance)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn weights(alpha: &[f64], provenance: Provenance) -> MixtureWeights {
        MixtureWeights::from_unnormalized(alpha.to_vec(), provenance).unwrap()
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn relative_threshold_marks() {
        let rows = vec![
            ("uniform".to_string(), weights(&[0.25, 0.75], Provenance::Uniform)),
            ("dro".to_string(), weights(&[0.5, 0.5], Provenance::DroAveraged)),
        ];
        let table = render_weight_table(&rows, &names(2)).unwrap();
        assert_eq!(table.rows[1].cells[0].mark, Some(Mark::Up));
        assert_eq!(table.rows[1].cells[1].mark, Some(Mark::Down));
        assert!(table.rows[0].cells.iter().all(|c| c.mark.is_none()));
    }

    #[test]
    fn identical_rows_have_no_marks() {
        let w = weights(&[0.1, 0.2, 0.7], Provenance::Uniform);
        let rows = vec![("a".to_string(), w.clone()), ("b".to_string(), w)];
        let table = render_weight_table(&rows, &names(3)).unwrap();
        assert!(table.rows.iter().flat_map(|r| &r.cells).all(|c| c.mark.is_none()));
    }

    #[test]
    fn small_and_large_percent_formats() {
        let table = render_weight_table(&[("u".into(), weights(&[0.0342, 0.163, 0.8028], Provenance::Uniform))], &names(3)).unwrap();
        let shown: Vec<&str> = table.rows[0].cells.iter().map(|c| c.percent.as_str()).collect();
        assert_eq!(shown, vec!["3.42%", "16.3%", "80.3%"]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let rows = vec![("u".to_string(), weights(&[0.5, 0.5], Provenance::Uniform))];
        assert!(render_weight_table(&rows, &names(3)).is_err());
        assert!(render_weight_table(&[], &names(3)).is_err());
    }

    proptest! {
        #[test]
        fn rendered_rows_sum_to_one_hundred(raw in prop::collection::vec(0.0f64..1.0, 1..12)) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-3);
            let w = weights(&raw, Provenance::DroAveraged);
            let table = render_weight_table(&[("x".into(), w)], &names(raw.len())).unwrap();
            let total: f64 = table.rows[0]
                .cells
                .iter()
                .map(|c| c.percent.trim_end_matches('%').parse::<f64>().unwrap())
                .sum();
            prop_assert!((total - 100.0).abs() <= 0.1 + 1e-9, "{total}");
        }
    }

    fn trace(k: usize, steps: usize) -> DroTrace {
        let mut t = DroTrace::new();
        for s in 0..steps {
            let raw: Vec<f64> = (0..k).map(|i| 1.0 + ((s * 7 + i * 3) % 11) as f64 / 3.0).collect();
            let total: f64 = raw.iter().sum();
            t.push(raw.iter().map(|r| r / total).collect(), (0..k).map(|i| (s + i) as f64 * 0.01).collect());
        }
        t
    }

    #[test]
    fn export_counts_alpha_rows() {
        let dir = tempfile::tempdir().unwrap();
        export_trace(dir.path(), &names(3), &trace(3, 100), &[]).unwrap();
        let text = fs::read_to_string(dir.path().join(TRACE_FILE)).unwrap();
        assert_eq!(text.lines().filter(|l| l.contains(",alpha,")).count(), 300);
        assert!(!dir.path().join(LOSSES_FILE).exists());
    }

    #[test]
    fn export_round_trips_the_average() {
        let dir = tempfile::tempdir().unwrap();
        let original = trace(3, 100);
        let records = vec![CheckpointRecord {
            step: 10,
            train_loss: vec![1.0, 2.0, 3.0],
            val_loss: vec![1.5, 2.5, 3.5],
            checkpoint: None,
        }];
        export_trace(dir.path(), &names(3), &original, &records).unwrap();
        let back = import_trace(dir.path(), &names(3)).unwrap();
        let a = crate::dro::average_alpha(&original).unwrap();
        let b = crate::dro::average_alpha(&back).unwrap();
        for (x, y) in a.alpha.iter().zip(&b.alpha) {
            assert!((x - y).abs() <= 1e-10);
        }
        assert_eq!(back, original);
        let losses = fs::read_to_string(dir.path().join(LOSSES_FILE)).unwrap();
        assert_eq!(losses.lines().count(), 1 + 6);
    }

    #[test]
    fn empty_trace_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_trace(dir.path(), &names(2), &DroTrace::new(), &[]).is_err());
    }

    #[test]
    fn alpha_trace_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alpha_trace.csv");
        let original = trace(2, 17);
        write_alpha_trace(&path, &names(2), &original).unwrap();
        assert_eq!(read_alpha_trace(&path, &names(2)).unwrap(), original);
    }

    #[test]
    fn weights_file_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        let n = vec!["zeta".to_string(), "alpha".to_string()];
        let w = weights(&[0.3, 0.7], Provenance::DroAveraged);
        write_weights(&path, &n, &w).unwrap();
        let (names_back, back) = read_weights(&path, Provenance::DroAveraged).unwrap();
        assert_eq!(names_back, n);
        assert_eq!(back, w);
    }
}
