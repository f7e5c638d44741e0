//! Long-format result tables (`experiment, method, seed, epoch, metric, value`)
//! with CSV, JSON and SVG renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub method: String,
    pub seed: u64,
    /// Fine-tuning epochs completed, for per-epoch metrics.
    pub epoch: Option<usize>,
    pub metric: String,
    pub value: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub experiment: String,
    pub method: String,
    pub epoch: Option<usize>,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Svg => "svg",
        }
    }
}

pub const CSV_HEADER: [&str; 6] = ["experiment", "method", "seed", "epoch", "metric", "value"];

/// Nine significant digits, enough to recover any `f32` exactly.
pub fn format_value(v: f32) -> String {
    format!("{v:.8e}")
}

/// Mean and std per `(experiment, method, epoch, metric)` in first-seen order.
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, String, Option<usize>, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, Option<usize>, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let key = (r.experiment.clone(), r.method.clone(), r.epoch, r.metric.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r.value as f64);
    }
    order
        .into_iter()
        .map(|key| {
            let vals = &groups[&key];
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let (experiment, method, epoch, metric) = key;
            AggregateRow { experiment, method, epoch, metric, n, mean, std }
        })
        .collect()
}

pub fn to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in rows {
        let epoch = r.epoch.map(|e| e.to_string()).unwrap_or_default();
        w.write_record([
            r.experiment.as_str(),
            r.method.as_str(),
            &r.seed.to_string(),
            &epoch,
            r.metric.as_str(),
            &format_value(r.value),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::Parse(format!("unexpected report header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("report row {}: {e}", i + 1)))?;
        let bad = |what: &str| Error::Parse(format!("report row {}: bad {what}", i + 1));
        rows.push(ReportRow {
            experiment: rec[0].to_string(),
            method: rec[1].to_string(),
            seed: rec[2].parse().map_err(|_| bad("seed"))?,
            epoch: if rec[3].is_empty() { None } else { Some(rec[3].parse().map_err(|_| bad("epoch"))?) },
            metric: rec[4].to_string(),
            value: rec[5].parse().map_err(|_| bad("value"))?,
        });
    }
    Ok(rows)
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    rows: Vec<ReportRow>,
    aggregate: Vec<AggregateRow>,
}

pub fn to_json(rows: &[ReportRow]) -> Result<String> {
    let doc = JsonReport { rows: rows.to_vec(), aggregate: aggregate(rows) };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

pub fn parse_json(text: &str) -> Result<(Vec<ReportRow>, Vec<AggregateRow>)> {
    let doc: JsonReport = serde_json::from_str(text)?;
    Ok((doc.rows, doc.aggregate))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Seed-mean `metric` against epoch, one polyline per `experiment/method`.
pub fn to_svg(rows: &[ReportRow], metric: &str) -> String {
    let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for a in aggregate(rows) {
        let (Some(epoch), true) = (a.epoch, a.metric == metric) else { continue };
        let name = format!("{}/{}", a.experiment, a.method);
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((epoch, a.mean)),
            None => series.push((name, vec![(epoch, a.mean)])),
        }
    }
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 180.0, 20.0, 50.0);
    let max_epoch = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).max().unwrap_or(1).max(1);
    let min_epoch = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).min().unwrap_or(0);
    let span = (max_epoch - min_epoch).max(1) as f64;
    let (lo, hi) = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).fold((f64::MAX, f64::MIN), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    let (lo, hi) = if lo > hi { (0.0, 1.0) } else if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let px = |e: usize| left + (e - min_epoch) as f64 / span * (w - left - right);
    let py = |v: f64| top + (hi - v) / (hi - lo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">epoch</text>"#,
        (x0 + x1) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {:.1})">{metric}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    for (label, v) in [(format!("{lo:.3}"), lo), (format!("{hi:.3}"), hi)] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{label}</text>"#, x0 - 4.0, py(v) + 3.0);
    }
    for e in [min_epoch, max_epoch] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{e}</text>"#, px(e), y1 + 14.0);
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(e, v)| format!("{:.2},{:.2}", px(e), py(v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
        let ly = top + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="10" fill="{color}">{}</text>"#,
            w - right + 8.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub const REPORT_STEM: &str = "report";
pub const SVG_METRIC: &str = "finetuned_acc";

pub fn render(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => to_csv(rows),
        ReportFormat::Json => to_json(rows),
        ReportFormat::Svg => Ok(to_svg(rows, SVG_METRIC)),
    }
}

/// Writes `report.<ext>` into `dir` and returns its path.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, dir: impl AsRef<Path>) -> Result<PathBuf> {
    if rows.is_empty() {
        return Err(Error::InvalidArg("no report rows to emit".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{REPORT_STEM}.{}", format.extension()));
    fs::write(&path, render(rows, format)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_report_csv(dir: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = dir.as_ref().join(format!("{REPORT_STEM}.csv"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_csv(&text)
}
