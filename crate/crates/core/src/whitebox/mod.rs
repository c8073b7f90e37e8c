//! White-box baselines that compare internal states or parameter
//! sensitivities of the full, retain and unlearned models, layer by layer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{entity_positions, FactExample, LossSpan};
use crate::error::{Error, Result};
use crate::report::csv_string;
use crate::stats::mean;
use crate::tinylm::{grad_fisher, CaptureRequest, PatchLocation, StateSource, ToyTransformer};

pub const EPSILON: f64 = 1e-8;
pub const DEFAULT_MASK_FRACTION: f64 = 0.001;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerErasure {
    pub layer: usize,
    pub erasure: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerErasureTable {
    pub metric: String,
    pub epsilon: f64,
    pub tau: Option<f64>,
    pub mask_fraction: Option<f64>,
    pub layers: Vec<LayerErasure>,
    pub aggregate: f64,
}

/// `Σ w·e / Σ w`; `None` when every weight is zero.
pub fn weighted_aggregate(layers: &[LayerErasure]) -> Option<f64> {
    let den: f64 = layers.iter().map(|l| l.weight).sum();
    if den <= 0.0 {
        return None;
    }
    Some(layers.iter().map(|l| l.weight * l.erasure).sum::<f64>() / den)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    metric: &'a str,
    layer: usize,
    erasure: f64,
    weight: f64,
}

/// Rows `metric, layer, erasure, weight` for several tables.
pub fn erasure_csv(tables: &[&LayerErasureTable]) -> Result<String> {
    let rows: Vec<CsvRow> = tables
        .iter()
        .flat_map(|t| {
            t.layers.iter().map(move |l| CsvRow {
                metric: &t.metric,
                layer: l.layer,
                erasure: l.erasure,
                weight: l.weight,
            })
        })
        .collect();
    csv_string(&rows)
}

fn center(h: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = h.to_vec();
    for j in 0..d {
        let m = (0..n).map(|i| h[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * d + j] -= m;
        }
    }
    out
}

/// `‖AᵀB‖_F²` for row-major `A: n×da`, `B: n×db`.
fn cross_frob_sq(a: &[f64], b: &[f64], n: usize, da: usize, db: usize) -> f64 {
    let mut acc = 0.0;
    for p in 0..da {
        for q in 0..db {
            let s: f64 = (0..n).map(|i| a[i * da + p] * b[i * db + q]).sum();
            acc += s * s;
        }
    }
    acc
}

/// Linear CKA between two row-aligned representation matrices
/// (`h1: n×d1`, `h2: n×d2`, row-major), computed in feature space.
pub fn linear_cka(h1: &[f64], d1: usize, h2: &[f64], d2: usize) -> Result<f64> {
    if d1 == 0 || d2 == 0 || !h1.len().is_multiple_of(d1) || !h2.len().is_multiple_of(d2) {
        return Err(Error::input("CKA matrix shape mismatch"));
    }
    let n = h1.len() / d1;
    if n != h2.len() / d2 || n < 2 {
        return Err(Error::input("CKA needs two matrices with the same n >= 2 rows"));
    }
    let a = center(h1, n, d1);
    let b = center(h2, n, d2);
    let ab = cross_frob_sq(&a, &b, n, d1, d2);
    let aa = cross_frob_sq(&a, &a, n, d1, d1).sqrt();
    let bb = cross_frob_sq(&b, &b, n, d2, d2).sqrt();
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::Degenerate("zero-variance representation in CKA".into()));
    }
    Ok((ab / (aa * bb)).clamp(0.0, 1.0))
}

/// Per-layer CKA erasure from precomputed similarities
/// (`c_fr`: full vs retain, `c_ur`: unlearned vs retain).
pub fn cka_erasure_from(c_fr: &[f64], c_ur: &[f64]) -> Result<LayerErasureTable> {
    let layers: Vec<LayerErasure> = c_fr
        .iter()
        .zip(c_ur)
        .enumerate()
        .map(|(l, (&fr, &ur))| LayerErasure {
            layer: l,
            erasure: ((ur - fr) / (1.0 - fr + EPSILON)).clamp(0.0, 1.0),
            weight: 1.0 - fr,
        })
        .collect();
    let aggregate = weighted_aggregate(&layers)
        .ok_or_else(|| Error::Degenerate("full and retain states are identical at every layer".into()))?;
    Ok(LayerErasureTable {
        metric: "cka".into(),
        epsilon: EPSILON,
        tau: None,
        mask_fraction: None,
        layers,
        aggregate,
    })
}

/// States at every layer, stacked over all entity positions of `forget`:
/// one `[rows × d_model]` matrix per layer.
fn stacked_states(
    model: &dyn StateSource,
    forget: &[FactExample],
    location: PatchLocation,
) -> Result<Vec<Vec<f64>>> {
    let cfg = model.model_config();
    let (n_layers, d) = (cfg.n_layers, cfg.d_model);
    let per_example = forget
        .par_iter()
        .map(|e| {
            let seq = e.sequence();
            let pos = entity_positions(e, &seq)?;
            model.capture(&seq, &CaptureRequest::new((0..n_layers).collect(), pos, location))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n_layers)
        .map(|l| {
            per_example
                .iter()
                .flat_map(|c| c.layer_states(l).iter().map(|&x| x as f64))
                .collect::<Vec<f64>>()
        })
        .inspect(|m| debug_assert_eq!(m.len() % d, 0))
        .collect())
}

pub fn cka_erasure(
    full: &dyn StateSource,
    retain: &dyn StateSource,
    unlearned: &dyn StateSource,
    forget: &[FactExample],
    location: PatchLocation,
) -> Result<LayerErasureTable> {
    let d = full.model_config().d_model;
    let hf = stacked_states(full, forget, location)?;
    let hr = stacked_states(retain, forget, location)?;
    let hu = stacked_states(unlearned, forget, location)?;
    let mut c_fr = Vec::with_capacity(hf.len());
    let mut c_ur = Vec::with_capacity(hf.len());
    for l in 0..hf.len() {
        c_fr.push(linear_cka(&hf[l], d, &hr[l], d)?);
        c_ur.push(linear_cka(&hu[l], d, &hr[l], d)?);
    }
    cka_erasure_from(&c_fr, &c_ur)
}

/// Mean (over examples) entity log-prob when `model`'s layer outputs are
/// read through `full`'s final norm and unembedding, per layer.
pub fn lens_logprobs(
    full: &ToyTransformer,
    model: &dyn StateSource,
    forget: &[FactExample],
) -> Result<Vec<f64>> {
    let n_layers = full.n_layers();
    let per_example = forget
        .par_iter()
        .map(|e| {
            let seq = e.sequence();
            let pos = entity_positions(e, &seq)?;
            let cap = model.capture(
                &seq,
                &CaptureRequest::new((0..n_layers).collect(), pos.clone(), PatchLocation::LayerOutput),
            )?;
            (0..n_layers)
                .map(|l| {
                    let lp = full.decode_states(cap.layer_states(l))?;
                    let v: Vec<f64> = pos
                        .iter()
                        .enumerate()
                        .map(|(i, &p)| lp.get(i, seq[p + 1]))
                        .collect();
                    Ok(mean(&v))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n_layers)
        .map(|l| mean(&per_example.iter().map(|k| k[l]).collect::<Vec<_>>()))
        .collect())
}

/// Lens erasure from per-layer readouts of the three models.
pub fn logit_lens_erasure_from(
    k_full: &[f64],
    k_ret: &[f64],
    k_unl: &[f64],
    tau: f64,
) -> Result<LayerErasureTable> {
    let layers: Vec<LayerErasure> = (0..k_full.len())
        .map(|l| {
            let d_s1 = k_full[l] - k_ret[l];
            let d_unl = k_full[l] - k_unl[l];
            let pass = d_s1 > tau;
            LayerErasure {
                layer: l,
                erasure: if pass { (d_unl / d_s1).clamp(0.0, 1.0) } else { 0.0 },
                weight: if pass { d_s1 } else { 0.0 },
            }
        })
        .collect();
    let aggregate = weighted_aggregate(&layers)
        .ok_or_else(|| Error::Skipped(format!("no layer has a lens gap above tau = {tau}")))?;
    Ok(LayerErasureTable {
        metric: "logit_lens".into(),
        epsilon: EPSILON,
        tau: Some(tau),
        mask_fraction: None,
        layers,
        aggregate,
    })
}

pub fn logit_lens_erasure(
    full: &ToyTransformer,
    retain: &dyn StateSource,
    unlearned: &dyn StateSource,
    forget: &[FactExample],
    tau: f64,
) -> Result<LayerErasureTable> {
    let k_full = lens_logprobs(full, full, forget)?;
    let k_ret = lens_logprobs(full, retain, forget)?;
    let k_unl = lens_logprobs(full, unlearned, forget)?;
    logit_lens_erasure_from(&k_full, &k_ret, &k_unl, tau)
}

/// Indices of the top `ceil(p·n)` entries (at least one) of `scores`;
/// ties go to the lower index.
pub fn top_fraction(scores: &[f64], p: f64) -> Vec<usize> {
    let k = ((p * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Per-block masked Fisher means `(F̄_full, F̄_ret, F̄_unl)`.
pub fn masked_fisher_means(
    blocks: &[std::ops::Range<usize>],
    f_full: &[f64],
    f_ret: &[f64],
    f_unl: &[f64],
    p: f64,
) -> Vec<(f64, f64, f64)> {
    blocks
        .iter()
        .map(|r| {
            let a: Vec<f64> = r.clone().map(|i| (f_ret[i] - f_full[i]).max(0.0)).collect();
            let mask: Vec<usize> = top_fraction(&a, p).into_iter().map(|i| r.start + i).collect();
            let avg = |f: &[f64]| mean(&mask.iter().map(|&i| f[i]).collect::<Vec<_>>());
            (avg(f_full), avg(f_ret), avg(f_unl))
        })
        .collect()
}

/// Fisher erasure from per-layer masked means.
pub fn fisher_erasure_from(means: &[(f64, f64, f64)], p: f64) -> Result<LayerErasureTable> {
    let layers: Vec<LayerErasure> = means
        .iter()
        .enumerate()
        .map(|(l, &(full, ret, unl))| {
            let e = ret - full;
            LayerErasure {
                layer: l,
                erasure: 1.0 - ((ret - unl) / (e + EPSILON)).clamp(0.0, 1.0),
                weight: e.max(0.0),
            }
        })
        .collect();
    let aggregate = weighted_aggregate(&layers).ok_or_else(|| {
        Error::Degenerate("retain Fisher never exceeds full Fisher on the mask".into())
    })?;
    Ok(LayerErasureTable {
        metric: "fisher_masked".into(),
        epsilon: EPSILON,
        tau: None,
        mask_fraction: Some(p),
        layers,
        aggregate,
    })
}

/// Diagonal Fisher of `model` on the entity tokens of `forget`.
pub fn forget_fisher(model: &ToyTransformer, forget: &[FactExample]) -> Result<Vec<f64>> {
    let data: Vec<_> = forget.iter().map(|e| e.train_sequence(LossSpan::Entity)).collect();
    grad_fisher(model, &data)
}

pub fn fisher_masked_erasure(
    full: &ToyTransformer,
    retain: &ToyTransformer,
    unlearned: &ToyTransformer,
    forget: &[FactExample],
    p: f64,
) -> Result<LayerErasureTable> {
    let f_full = forget_fisher(full, forget)?;
    let f_ret = forget_fisher(retain, forget)?;
    let f_unl = forget_fisher(unlearned, forget)?;
    fisher_masked_erasure_with(full, &f_full, &f_ret, &f_unl, p)
}

/// Same as [`fisher_masked_erasure`] with Fishers already computed.
pub fn fisher_masked_erasure_with(
    full: &ToyTransformer,
    f_full: &[f64],
    f_ret: &[f64],
    f_unl: &[f64],
    p: f64,
) -> Result<LayerErasureTable> {
    let blocks: Vec<_> = (0..full.n_layers()).map(|l| full.layout().block_range(l)).collect();
    fisher_erasure_from(&masked_fisher_means(&blocks, f_full, f_ret, f_unl, p), p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cka_hand_table() {
        let t = cka_erasure_from(&[0.5, 0.9], &[0.75, 0.9]).unwrap();
        assert!((t.layers[0].erasure - 0.25 / (0.5 + EPSILON)).abs() < 1e-15);
        assert_eq!(t.layers[1].erasure, 0.0);
        assert!((t.aggregate - 0.4167).abs() < 5e-5);
    }

    #[test]
    fn fisher_hand_table() {
        let t = fisher_erasure_from(&[(1.0, 4.0, 2.5), (1.0, 3.0, 3.0)], 0.001).unwrap();
        assert!((t.layers[0].erasure - 0.5).abs() < 1e-8);
        assert_eq!(t.layers[1].erasure, 1.0);
        assert_eq!((t.layers[0].weight, t.layers[1].weight), (3.0, 2.0));
        assert!((t.aggregate - 0.7).abs() < 1e-8);
    }

    #[test]
    fn top_fraction_ties_take_lowest_index() {
        assert_eq!(top_fraction(&[1.0, 3.0, 3.0, 0.0], 0.25), vec![1]);
        assert_eq!(top_fraction(&[0.0; 5], 0.001), vec![0]);
        assert_eq!(top_fraction(&[1.0, 2.0, 3.0, 4.0], 0.5), vec![2, 3]);
    }

    #[test]
    fn cka_invariances() {
        let h: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 - 3.0).collect();
        assert!((linear_cka(&h, 4, &h, 4).unwrap() - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = h.iter().map(|x| -2.5 * x).collect();
        assert!((linear_cka(&h, 4, &scaled, 4).unwrap() - 1.0).abs() < 1e-12);
        assert!(linear_cka(&[1.0, 1.0, 1.0, 1.0], 2, &h[..4], 2).is_err());
    }

    #[test]
    fn lens_skips_without_gap() {
        let err = logit_lens_erasure_from(&[-1.0, -1.0], &[-1.0, -1.01], &[-2.0, -2.0], 0.05).unwrap_err();
        assert_eq!(err.kind(), "SkippedError");
    }
}
