//! Method ranking with and without the patching-based privacy term.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::harmonic_mean;

/// Per-model inputs to the ranking formulas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelComponents {
    pub method: String,
    pub config_id: String,
    pub memorization: Option<f64>,
    pub mia_agg: Option<f64>,
    pub uds: Option<f64>,
    pub utility_rel: Option<f64>,
}

/// `HM(1−ES, 1−EM, 1−ParaProb, 1−TruthRatio)`.
pub fn memorization(es: f64, em: f64, para_prob: f64, truth_ratio: f64) -> f64 {
    harmonic_mean(&[1.0 - es, 1.0 - em, 1.0 - para_prob, 1.0 - truth_ratio])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredModel {
    pub method: String,
    pub config_id: String,
    pub memorization: f64,
    pub mia_agg: f64,
    pub uds: f64,
    pub privacy_without: f64,
    pub privacy_with: f64,
    pub utility_rel: f64,
    pub score_without: f64,
    pub score_with: f64,
}

impl ScoredModel {
    pub fn new(c: &ModelComponents) -> Result<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| {
                Error::input(format!("`{}` is missing ranking component {name}", c.config_id))
            })
        };
        let memorization = need(c.memorization, "memorization")?;
        let mia_agg = need(c.mia_agg, "mia_agg")?;
        let uds = need(c.uds, "uds")?;
        let utility_rel = need(c.utility_rel, "utility_rel")?;
        let privacy_without = mia_agg;
        let privacy_with = harmonic_mean(&[mia_agg, uds]);
        Ok(Self {
            method: c.method.clone(),
            config_id: c.config_id.clone(),
            memorization,
            mia_agg,
            uds,
            privacy_without,
            privacy_with,
            utility_rel,
            score_without: harmonic_mean(&[memorization, privacy_without, utility_rel]),
            score_with: harmonic_mean(&[memorization, privacy_with, utility_rel]),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub method: String,
    pub config_without: String,
    pub config_with: String,
    pub memorization: f64,
    pub mia_agg: f64,
    pub uds: f64,
    pub privacy_without: f64,
    pub privacy_with: f64,
    pub utility_rel: f64,
    pub score_without: f64,
    pub score_with: f64,
    pub rank_without: usize,
    pub rank_with: usize,
}

/// A method whose best configuration changes once the privacy term includes UDS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigShift {
    pub method: String,
    pub config_without: String,
    pub config_with: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Sorted by `score_with`, best first.
    pub rows: Vec<RankingRow>,
    pub shifts: Vec<ConfigShift>,
}

/// Ranks 1.. by descending score; ties share the earlier position order of
/// the input (stable sort), so ranks stay a permutation.
fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![0; scores.len()];
    for (r, i) in idx.into_iter().enumerate() {
        out[i] = r + 1;
    }
    out
}

/// Picks each method's best config under both formulas and ranks methods.
pub fn aggregate_and_rank(models: &[ModelComponents]) -> Result<Ranking> {
    let scored = models.iter().map(ScoredModel::new).collect::<Result<Vec<_>>>()?;
    let mut by_method: BTreeMap<&str, Vec<&ScoredModel>> = BTreeMap::new();
    for s in &scored {
        by_method.entry(&s.method).or_default().push(s);
    }
    let best = |v: &[&ScoredModel], f: fn(&ScoredModel) -> f64| -> ScoredModel {
        (*v.iter().fold(v[0], |b, &s| if f(s) > f(b) { s } else { b })).clone()
    };
    let mut rows = Vec::new();
    let mut shifts = Vec::new();
    for (method, v) in &by_method {
        let bw = best(v, |s| s.score_without);
        let bu = best(v, |s| s.score_with);
        if bw.config_id != bu.config_id {
            shifts.push(ConfigShift {
                method: method.to_string(),
                config_without: bw.config_id.clone(),
                config_with: bu.config_id.clone(),
            });
        }
        rows.push(RankingRow {
            method: method.to_string(),
            config_without: bw.config_id.clone(),
            config_with: bu.config_id.clone(),
            memorization: bu.memorization,
            mia_agg: bu.mia_agg,
            uds: bu.uds,
            privacy_without: bw.privacy_without,
            privacy_with: bu.privacy_with,
            utility_rel: bu.utility_rel,
            score_without: bw.score_without,
            score_with: bu.score_with,
            rank_without: 0,
            rank_with: 0,
        });
    }
    let rw = ranks(&rows.iter().map(|r| r.score_without).collect::<Vec<_>>());
    let ru = ranks(&rows.iter().map(|r| r.score_with).collect::<Vec<_>>());
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank_without = rw[i];
        r.rank_with = ru[i];
    }
    rows.sort_by_key(|r| r.rank_with);
    Ok(Ranking { rows, shifts })
}

pub fn ranking_csv(ranking: &Ranking) -> Result<String> {
    crate::report::csv_string(&ranking.rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(method: &str, mia: f64, uds: f64) -> ModelComponents {
        ModelComponents {
            method: method.into(),
            config_id: format!("{method}-0"),
            memorization: Some(1.0),
            mia_agg: Some(mia),
            uds: Some(uds),
            utility_rel: Some(1.0),
        }
    }

    #[test]
    fn all_ones_rank_first() {
        let r = aggregate_and_rank(&[comp("a", 1.0, 1.0)]).unwrap();
        assert_eq!(r.rows[0].score_with, 1.0);
        assert_eq!(r.rows[0].rank_with, 1);
    }

    #[test]
    fn uds_swaps_the_two_model_pool() {
        let r = aggregate_and_rank(&[comp("a", 0.9, 0.3), comp("b", 0.7, 0.7)]).unwrap();
        let a = r.rows.iter().find(|x| x.method == "a").unwrap();
        let b = r.rows.iter().find(|x| x.method == "b").unwrap();
        assert_eq!((a.rank_without, b.rank_without), (1, 2));
        assert_eq!((a.rank_with, b.rank_with), (2, 1));
    }

    #[test]
    fn missing_component_is_named() {
        let mut c = comp("a", 0.5, 0.5);
        c.uds = None;
        let e = aggregate_and_rank(&[c]).unwrap_err().to_string();
        assert!(e.contains("uds"), "{e}");
    }
}
