use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{metric_mean, ExampleMetrics, MiaScore, OutputMetric};
use crate::error::Result;
use crate::hash::hex64;

#[derive(Serialize)]
struct MetricRow<'a> {
    model_hash: &'a str,
    example_id: &'a str,
    metric: &'a str,
    value: f64,
}

/// Long-format dump: one row per (example, metric).
pub fn metrics_csv(model_hash: u64, rows: &[ExampleMetrics]) -> Result<String> {
    let hash = hex64(model_hash);
    let flat: Vec<MetricRow> = rows
        .iter()
        .flat_map(|r| {
            let hash = hash.as_str();
            r.values.iter().map(move |(m, v)| MetricRow {
                model_hash: hash,
                example_id: &r.id,
                metric: m.as_str(),
                value: *v,
            })
        })
        .collect();
    crate::report::csv_string(&flat)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_hash: String,
    pub n_examples: usize,
    pub means: BTreeMap<String, f64>,
    pub mia_auc: BTreeMap<String, f64>,
    /// How wrong-answer probabilities are pooled in the truth ratio.
    pub truth_ratio_wrong_pooling: String,
    pub n_truth_ratio_degenerate: usize,
}

impl ModelSummary {
    pub fn new(model_hash: u64, rows: &[ExampleMetrics], mia: &[MiaScore]) -> Self {
        let means = OutputMetric::ALL
            .into_iter()
            .filter_map(|m| metric_mean(rows, m).map(|v| (m.as_str().to_string(), v)))
            .collect();
        Self {
            model_hash: hex64(model_hash),
            n_examples: rows.len(),
            means,
            mia_auc: mia
                .iter()
                .map(|s| (s.variant.as_str().to_string(), s.auc))
                .collect(),
            truth_ratio_wrong_pooling: "arithmetic_mean".into(),
            n_truth_ratio_degenerate: rows.iter().filter(|r| r.truth_ratio_degenerate).count(),
        }
    }
}
