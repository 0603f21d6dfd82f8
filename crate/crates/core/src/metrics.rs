//! Average precision and run-efficiency accounting.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no positive labels")]
    NoPositives,
    #[error("{labels} labels but {scores} scores")]
    Length { labels: usize, scores: usize },
    #[error("score at position {0} is NaN")]
    NaN(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// (recall, precision) after each distinct score threshold, descending.
    pub points: Vec<(f64, f64)>,
    pub auprc: f64,
}

pub fn pr_curve(labels: &[bool], scores: &[f64]) -> Result<PrCurve, MetricsError> {
    if labels.len() != scores.len() {
        return Err(MetricsError::Length { labels: labels.len(), scores: scores.len() });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(MetricsError::NaN(i));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = Vec::new();
    let mut ap = 0.0;
    let (mut tp, mut seen, mut prev_recall) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok(PrCurve { points, auprc: ap })
}

/// Step-wise average precision with tied scores entering together.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64, MetricsError> {
    pr_curve(labels, scores).map(|c| c.auprc)
}

/// One logged message as seen by the metrics table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageBytes {
    pub phase: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub unit: String,
    pub value: f64,
}

/// Peak resident set size of this process, when the platform exposes it.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

pub fn run_metrics(log: &[MessageBytes], wall: Duration, peak_memory: Option<u64>) -> Vec<MetricRow> {
    let row = |metric: &str, unit: &str, value: f64| MetricRow {
        metric: metric.to_string(),
        unit: unit.to_string(),
        value,
    };
    let mut by_phase: BTreeMap<&str, u64> = BTreeMap::new();
    for m in log {
        *by_phase.entry(m.phase.as_str()).or_default() += m.bytes;
    }
    let mut rows = vec![row("total_training_time", "s", wall.as_secs_f64())];
    if let Some(mem) = peak_memory {
        rows.push(row("peak_memory", "bytes", mem as f64));
    }
    rows.push(row("network_bytes_total", "bytes", log.iter().map(|m| m.bytes).sum::<u64>() as f64));
    rows.push(row("messages_total", "count", log.len() as f64));
    for (phase, bytes) in by_phase {
        rows.push(row(&format!("network_bytes_{phase}"), "bytes", bytes as f64));
    }
    rows
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "unit", "value"])?;
    for r in rows {
        out.write_record([r.metric.as_str(), r.unit.as_str(), &r.value.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
