//! Two-stage activation patching: how much of the full model's entity
//! knowledge survives in an unlearned model's hidden states.
//!
//! Stage 1 patches retain-model states into the full model one layer at a
//! time and records the log-prob drop on the entity tokens; layers whose
//! drop exceeds `tau` carry the fact. Stage 2 repeats the patching with the
//! unlearned model as the source and reports, per layer, which fraction of
//! the stage-1 drop it reproduces.

mod report;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{entity_positions, FactExample, PromptType};
use crate::error::{Error, Result};
use crate::hash::hex64;
use crate::io::{read_json, write_json};
use crate::stats::{mean, spearman, Spearman};
use crate::tinylm::{CaptureRequest, PatchLocation, StateSource, ToyTransformer};

pub use report::{ler_csv, TauSweepRow};

pub const CACHE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TAU: f64 = 0.05;

/// What patching overwrites: the raw residual-stream value at the named
/// site, before the receiving block's own normalisation.
pub const PATCH_SEMANTICS: &str = "raw_stream_value_at_site";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneRecord {
    pub id: String,
    pub prompt_type: PromptType,
    pub entity_len: usize,
    /// Reference log-probs of the entity tokens under the full model (nats).
    pub s_full: Vec<f64>,
    /// Mean log-prob drop per layer when retain states are patched in.
    pub delta_s1: Vec<f64>,
    pub ke_layers: Vec<usize>,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOneCache {
    pub format_version: u32,
    pub tau: f64,
    pub location: PatchLocation,
    pub patch_semantics: String,
    pub full_hash: String,
    pub retain_hash: String,
    pub records: Vec<StageOneRecord>,
}

impl StageOneCache {
    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.tau.is_finite() {
            return Err(Error::input("cannot persist a cache with non-finite tau"));
        }
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: StageOneCache = read_json(path)?;
        if c.format_version != CACHE_FORMAT_VERSION {
            return Err(Error::StaleCache(format!(
                "cache format_version {} (expected {CACHE_FORMAT_VERSION})",
                c.format_version
            )));
        }
        Ok(c)
    }

    /// Re-threshold the stored drops at a new `tau`.
    pub fn with_tau(&self, tau: f64) -> StageOneCache {
        let mut c = self.clone();
        c.tau = tau;
        for r in &mut c.records {
            r.ke_layers = ke_layers(&r.delta_s1, tau);
            r.skipped = r.ke_layers.is_empty();
        }
        c
    }

    pub fn n_skipped(&self) -> usize {
        self.records.iter().filter(|r| r.skipped).count()
    }
}

/// Layers whose stage-1 drop strictly exceeds `tau`.
pub fn ke_layers(delta_s1: &[f64], tau: f64) -> Vec<usize> {
    (0..delta_s1.len()).filter(|&l| delta_s1[l] > tau).collect()
}

/// Fraction of the stage-1 drop reproduced in stage 2, clipped to [0, 1].
pub fn layer_erasure_ratio(delta_s1: f64, delta_s2: f64) -> f64 {
    (delta_s2 / delta_s1).clamp(0.0, 1.0)
}

/// Stage-1-weighted mean of the per-layer erasure ratios over `ke`.
pub fn example_uds(delta_s1: &[f64], delta_s2: &[f64], ke: &[usize]) -> Option<f64> {
    if ke.is_empty() {
        return None;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for &l in ke {
        num += delta_s1[l] * layer_erasure_ratio(delta_s1[l], delta_s2[l]);
        den += delta_s1[l];
    }
    Some(num / den)
}

/// Entity-token log-probs under `full`, optionally with one patched site.
fn entity_logprobs(
    full: &ToyTransformer,
    seq: &[u32],
    positions: &[usize],
    patch: Option<crate::tinylm::PatchSpec>,
) -> Result<Vec<f64>> {
    let lp = match patch {
        Some(p) => full.forward_with_patch(seq, &[p])?,
        None => full.forward(seq)?,
    };
    Ok(positions.iter().map(|&p| lp.get(p, seq[p + 1])).collect())
}

/// Per-layer mean drop `mean_t(s_full - s_patched)` with `source`'s states
/// patched into `full` at `positions`, one layer per pass.
fn layer_drops(
    full: &ToyTransformer,
    source: &dyn StateSource,
    seq: &[u32],
    positions: &[usize],
    s_full: &[f64],
    location: PatchLocation,
) -> Result<Vec<f64>> {
    let n_layers = full.n_layers();
    let req = CaptureRequest::new((0..n_layers).collect(), positions.to_vec(), location);
    let cap = source.capture(seq, &req)?;
    (0..n_layers)
        .map(|l| {
            let s = entity_logprobs(full, seq, positions, Some(cap.to_patch(l)))?;
            let d: Vec<f64> = s_full.iter().zip(&s).map(|(a, b)| a - b).collect();
            let m = mean(&d);
            if !m.is_finite() {
                return Err(Error::Numerics {
                    step: l,
                    what: "non-finite patched log-prob".into(),
                });
            }
            Ok(m)
        })
        .collect()
}

fn check_pair(full: &ToyTransformer, other: &dyn StateSource, what: &str) -> Result<()> {
    if !full.config().same_shape(other.model_config()) {
        return Err(Error::input(format!(
            "{what} model config does not match the full model"
        )));
    }
    Ok(())
}

fn prepared(example: &FactExample) -> Result<(Vec<u32>, Vec<usize>)> {
    let seq = example.sequence();
    let pos = entity_positions(example, &seq)?;
    Ok((seq, pos))
}

/// Stage 1: baseline drops and knowledge-encoding layers for every example.
pub fn stage1_baseline(
    full: &ToyTransformer,
    retain: &dyn StateSource,
    forget: &[FactExample],
    tau: f64,
    location: PatchLocation,
) -> Result<StageOneCache> {
    check_pair(full, retain, "retain")?;
    let records = forget
        .par_iter()
        .map(|e| {
            let (seq, pos) = prepared(e)?;
            let s_full = entity_logprobs(full, &seq, &pos, None)?;
            let delta_s1 = layer_drops(full, retain, &seq, &pos, &s_full, location)?;
            let ke = ke_layers(&delta_s1, tau);
            Ok(StageOneRecord {
                id: e.id.clone(),
                prompt_type: e.prompt_type,
                entity_len: e.entity_len(),
                s_full,
                delta_s1,
                skipped: ke.is_empty(),
                ke_layers: ke,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageOneCache {
        format_version: CACHE_FORMAT_VERSION,
        tau,
        location,
        patch_semantics: PATCH_SEMANTICS.into(),
        full_hash: hex64(full.param_hash()),
        retain_hash: hex64(retain.source_hash()),
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub id: String,
    pub prompt_type: PromptType,
    pub entity_len: usize,
    pub delta_s1: Vec<f64>,
    pub delta_s2: Vec<f64>,
    /// `(layer, LER)` for each knowledge-encoding layer.
    pub ler: Vec<(usize, f64)>,
    pub uds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdsReport {
    pub format_version: u32,
    pub tau: f64,
    pub location: PatchLocation,
    pub full_hash: String,
    pub retain_hash: String,
    pub unl_hash: String,
    pub examples: Vec<ExampleScore>,
    pub model_uds: f64,
    pub n_scored: usize,
    pub n_skipped: usize,
    pub by_prompt_type: BTreeMap<PromptType, f64>,
    /// Mean LER per layer over the examples for which it is a KE layer.
    pub by_layer: BTreeMap<usize, f64>,
}

impl UdsReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn scores(&self) -> impl Iterator<Item = (&ExampleScore, f64)> {
        self.examples.iter().filter_map(|e| e.uds.map(|u| (e, u)))
    }
}

fn check_cache(full: &ToyTransformer, cache: &StageOneCache, forget: &[FactExample]) -> Result<()> {
    if cache.full_hash != hex64(full.param_hash()) {
        return Err(Error::StaleCache(format!(
            "cache built for full model {}, got {}",
            cache.full_hash,
            hex64(full.param_hash())
        )));
    }
    if cache.records.len() != forget.len()
        || cache.records.iter().zip(forget).any(|(r, e)| r.id != e.id)
    {
        return Err(Error::StaleCache("cache examples do not match the forget split".into()));
    }
    if cache.records.iter().any(|r| r.delta_s1.len() != full.n_layers()) {
        return Err(Error::StaleCache("cache layer count does not match the model".into()));
    }
    Ok(())
}

/// Stage 2: per-layer erasure ratios and the model-level score for `unlearned`.
pub fn stage2_eval(
    full: &ToyTransformer,
    unlearned: &dyn StateSource,
    cache: &StageOneCache,
    forget: &[FactExample],
) -> Result<UdsReport> {
    check_pair(full, unlearned, "unlearned")?;
    check_cache(full, cache, forget)?;
    let examples = forget
        .par_iter()
        .zip(&cache.records)
        .map(|(e, rec)| {
            let (seq, pos) = prepared(e)?;
            let delta_s2 = layer_drops(full, unlearned, &seq, &pos, &rec.s_full, cache.location)?;
            let ler = rec
                .ke_layers
                .iter()
                .map(|&l| (l, layer_erasure_ratio(rec.delta_s1[l], delta_s2[l])))
                .collect();
            Ok(ExampleScore {
                id: rec.id.clone(),
                prompt_type: rec.prompt_type,
                entity_len: rec.entity_len,
                uds: example_uds(&rec.delta_s1, &delta_s2, &rec.ke_layers),
                delta_s1: rec.delta_s1.clone(),
                delta_s2,
                ler,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(cache, hex64(unlearned.source_hash()), examples)
}

fn assemble(cache: &StageOneCache, unl_hash: String, examples: Vec<ExampleScore>) -> Result<UdsReport> {
    let scored: Vec<f64> = examples.iter().filter_map(|e| e.uds).collect();
    if scored.is_empty() {
        return Err(Error::Skipped(format!(
            "every example has an empty KE layer set at tau = {}",
            cache.tau
        )));
    }
    let mut by_type: BTreeMap<PromptType, Vec<f64>> = BTreeMap::new();
    let mut by_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in &examples {
        if let Some(u) = e.uds {
            by_type.entry(e.prompt_type).or_default().push(u);
        }
        for &(l, r) in &e.ler {
            by_layer.entry(l).or_default().push(r);
        }
    }
    Ok(UdsReport {
        format_version: CACHE_FORMAT_VERSION,
        tau: cache.tau,
        location: cache.location,
        full_hash: cache.full_hash.clone(),
        retain_hash: cache.retain_hash.clone(),
        unl_hash,
        model_uds: mean(&scored),
        n_scored: scored.len(),
        n_skipped: examples.len() - scored.len(),
        by_prompt_type: by_type.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
        by_layer: by_layer.into_iter().map(|(k, v)| (k, mean(&v))).collect(),
        examples,
    })
}

/// Retain-free fallback: mean raw log-prob drop per example when the
/// unlearned model's states are patched into the full model, averaged over
/// layers, with no stage-1 normalisation.
pub fn original_target_scores(
    full: &ToyTransformer,
    unlearned: &dyn StateSource,
    forget: &[FactExample],
    location: PatchLocation,
) -> Result<Vec<(String, f64)>> {
    check_pair(full, unlearned, "unlearned")?;
    forget
        .par_iter()
        .map(|e| {
            let (seq, pos) = prepared(e)?;
            let s_full = entity_logprobs(full, &seq, &pos, None)?;
            let d = layer_drops(full, unlearned, &seq, &pos, &s_full, location)?;
            Ok((e.id.clone(), mean(&d)))
        })
        .collect()
}

/// KE-set size statistics across thresholds, from one stage-1 pass.
pub fn ke_tau_sweep(cache: &StageOneCache, taus: &[f64]) -> Result<Vec<TauSweepRow>> {
    if taus.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::input("taus must be sorted ascending"));
    }
    Ok(taus
        .iter()
        .map(|&tau| {
            let sizes: Vec<f64> = cache
                .records
                .iter()
                .map(|r| ke_layers(&r.delta_s1, tau).len() as f64)
                .collect();
            let m = mean(&sizes);
            let var = sizes.iter().map(|s| (s - m).powi(2)).sum::<f64>() / sizes.len() as f64;
            let n_skipped = sizes.iter().filter(|&&s| s == 0.0).count();
            TauSweepRow {
                tau,
                mean_ke: m,
                std_ke: var.sqrt(),
                n_skipped,
                pct_skipped: 100.0 * n_skipped as f64 / sizes.len() as f64,
            }
        })
        .collect())
}

/// Spearman correlation between entity length and per-example score.
pub fn entity_length_correlation(report: &UdsReport) -> Result<Spearman> {
    let (x, y): (Vec<f64>, Vec<f64>) = report
        .scores()
        .map(|(e, u)| (e.entity_len as f64, u))
        .unzip();
    spearman(&x, &y)
}
