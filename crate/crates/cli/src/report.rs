//! Metric rows, CSV writers and JSON summaries.
//!
//! Floats are printed with Rust's shortest-round-trip formatting, so a CSV
//! is a deterministic function of the computed values and reruns with the
//! same seeds are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use mergecal_core::drift::DriftRecord;
use mergecal_core::Result;

/// One long-format metrics row. Empty task/layer mean "not applicable".
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub stage: String,
    pub task: Option<usize>,
    pub layer: Option<usize>,
    pub metric: String,
    pub value: f64,
}

impl MetricsRow {
    pub fn new(
        run_id: &str,
        stage: &str,
        task: Option<usize>,
        layer: Option<usize>,
        metric: impl Into<String>,
        value: f64,
    ) -> Self {
        MetricsRow {
            run_id: run_id.to_string(),
            stage: stage.to_string(),
            task,
            layer,
            metric: metric.into(),
            value,
        }
    }
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: &str = "run_id,stage,task,layer,metric,value";

/// Renders rows in their given order; no quoting is needed because no field
/// may contain commas.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        debug_assert!(!r.metric.contains(','), "metric names must be comma-free");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.run_id,
            r.stage,
            opt(r.task),
            opt(r.layer),
            r.metric,
            r.value
        ));
    }
    out
}

/// Parses a metrics CSV back into rows (used by round-trip checks).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(mergecal_core::CoreError::InvalidConfig(format!(
                    "unexpected metrics header: {line}"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(mergecal_core::CoreError::InvalidConfig(format!(
                "bad metrics row: {line}"
            )));
        }
        let parse_opt = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<usize>().map(Some).map_err(|e| {
                    mergecal_core::CoreError::InvalidConfig(format!("bad index `{s}`: {e}"))
                })
            }
        };
        rows.push(MetricsRow {
            run_id: fields[0].to_string(),
            stage: fields[1].to_string(),
            task: parse_opt(fields[2])?,
            layer: parse_opt(fields[3])?,
            metric: fields[4].to_string(),
            value: fields[5].parse::<f64>().map_err(|e| {
                mergecal_core::CoreError::InvalidConfig(format!("bad value `{}`: {e}", fields[5]))
            })?,
        });
    }
    Ok(rows)
}

pub const DRIFT_HEADER: &str = "task,layer,sample,e_norm,m_norm,p_norm,cosine";

/// Per-sample drift CSV for one model's records across tasks.
pub fn drift_csv(records: &[(usize, Vec<DriftRecord>)]) -> String {
    let mut out = String::from(DRIFT_HEADER);
    out.push('\n');
    for (task, recs) in records {
        for rec in recs {
            for s in 0..rec.e_norm.len() {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    task,
                    rec.layer,
                    s,
                    rec.e_norm[s],
                    rec.m_norm[s],
                    rec.p_norm[s],
                    rec.cosine_to_expert[s]
                ));
            }
        }
    }
    out
}

/// Per-layer mean drift statistics for the JSON summary.
#[derive(Clone, Debug, Serialize)]
pub struct LayerMeans {
    pub layer: usize,
    pub mean_e_norm: f64,
    pub mean_m_norm: f64,
    pub mean_p_norm: f64,
    pub mean_cosine: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelDriftSummary {
    pub per_layer: Vec<LayerMeans>,
    pub mean_final_drift: f64,
    pub mean_final_cosine: f64,
    /// Relative error of the final-drift reconstruction from local
    /// mismatches (per task).
    pub reconstruction_relative_error: BTreeMap<String, f64>,
    /// Fraction of test samples whose expert top-1 decision the model
    /// preserves (per task), and the macro average.
    pub margin_preservation_rate: BTreeMap<String, f64>,
    pub mean_margin_preservation: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftSummary {
    pub models: BTreeMap<String, ModelDriftSummary>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Aggregates per-task records into per-layer means.
pub fn layer_means(records: &[(usize, Vec<DriftRecord>)]) -> Vec<LayerMeans> {
    let mut per_layer: BTreeMap<usize, (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (_, recs) in records {
        for rec in recs {
            let slot = per_layer.entry(rec.layer).or_default();
            slot.0.extend_from_slice(&rec.e_norm);
            slot.1.extend_from_slice(&rec.m_norm);
            slot.2.extend_from_slice(&rec.p_norm);
            slot.3.extend_from_slice(&rec.cosine_to_expert);
        }
    }
    per_layer
        .into_iter()
        .map(|(layer, (e, m, p, c))| LayerMeans {
            layer,
            mean_e_norm: mean(&e),
            mean_m_norm: mean(&m),
            mean_p_norm: mean(&p),
            mean_cosine: mean(&c),
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
