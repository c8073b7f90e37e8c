use serde::{Deserialize, Serialize};

use super::UdsReport;
use crate::error::Result;
use crate::report::csv_string;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSweepRow {
    pub tau: f64,
    pub mean_ke: f64,
    pub std_ke: f64,
    pub n_skipped: usize,
    pub pct_skipped: f64,
}

#[derive(Serialize)]
struct LerRow<'a> {
    example_id: &'a str,
    layer: usize,
    delta_s1: f64,
    delta_s2: f64,
    /// Empty for layers outside the example's KE set.
    ler: Option<f64>,
}

/// Per-layer table with columns `example_id, layer, delta_s1, delta_s2, ler`.
pub fn ler_csv(report: &UdsReport) -> Result<String> {
    let mut rows = Vec::new();
    for e in &report.examples {
        for l in 0..e.delta_s1.len() {
            rows.push(LerRow {
                example_id: &e.id,
                layer: l,
                delta_s1: e.delta_s1[l],
                delta_s2: e.delta_s2[l],
                ler: e.ler.iter().find(|(k, _)| *k == l).map(|(_, r)| *r),
            });
        }
    }
    csv_string(&rows)
}
