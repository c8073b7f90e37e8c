//! Unlearning methods that turn the full model into audit targets.
//!
//! All losses are masked to entity tokens (or entity positions for the
//! representation-level method). Each optimizer step pairs one forget batch
//! with one retain batch; the retain batches cycle through a per-epoch
//! shuffle of the retain set.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FactExample, IdkVariant, LossSpan};
use crate::error::{Error, Result};
use crate::tinylm::train::{epoch_order, masked_nll_grad};
use crate::tinylm::{AdamW, StepMask, ToyTransformer, TrainSequence};

pub mod pool;

pub use pool::{
    generate_pool, reference_train_config, train_references, FixtureEntry, Pool, PoolConfig,
    PoolModel, PoolTag, ReferenceData, References,
};

/// Divergence guard: abort when the monitored loss exceeds this multiple of
/// its first-step value.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Lower bound on the reference value of the guard, so a nearly perfect
/// starting fit does not trip it on ordinary noise.
pub const DIVERGENCE_FLOOR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GradDiff,
    IdkNll,
    Npo,
    Rmu,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::GradDiff, Method::IdkNll, Method::Npo, Method::Rmu];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::GradDiff => "grad_diff",
            Method::IdkNll => "idk_nll",
            Method::Npo => "npo",
            Method::Rmu => "rmu",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub lr: f64,
    pub epochs: usize,
    /// Weight of the retain term.
    pub alpha: f64,
    /// Inverse temperature, NPO only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Steered layer, RMU only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmu_layer: Option<usize>,
    /// Target norm of the steering vector, RMU only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmu_scale: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
}

fn default_batch() -> usize {
    8
}

impl UnlearnConfig {
    pub fn new(method: Method, lr: f64, epochs: usize, alpha: f64, seed: u64) -> Self {
        Self {
            method,
            lr,
            epochs,
            alpha,
            beta: None,
            rmu_layer: None,
            rmu_scale: None,
            batch_size: default_batch(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::input("lr must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::input("alpha must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::input("batch_size must be >= 1"));
        }
        match self.method {
            Method::Npo => match self.beta {
                Some(b) if b.is_finite() && b > 0.0 => {}
                _ => return Err(Error::input("npo requires a positive beta")),
            },
            Method::Rmu => {
                if self.rmu_layer.is_none() {
                    return Err(Error::input("rmu requires rmu_layer"));
                }
                match self.rmu_scale {
                    Some(c) if c.is_finite() && c > 0.0 => {}
                    _ => return Err(Error::input("rmu requires a positive rmu_scale")),
                }
            }
            Method::GradDiff | Method::IdkNll => {}
        }
        Ok(())
    }

    fn expect(&self, method: Method) -> Result<()> {
        if self.method != method {
            return Err(Error::input(format!(
                "config is for {}, not {}",
                self.method.as_str(),
                method.as_str()
            )));
        }
        self.validate()
    }

    /// Short stable identifier, e.g. `npo-lr1e-4-e5-a1-b0.1-s0`.
    pub fn id(&self) -> String {
        let mut s = format!(
            "{}-lr{:e}-e{}-a{}",
            self.method.as_str(),
            self.lr,
            self.epochs,
            self.alpha
        );
        if let Some(b) = self.beta {
            s += &format!("-b{b}");
        }
        if let (Some(l), Some(c)) = (self.rmu_layer, self.rmu_scale) {
            s += &format!("-l{l}-c{c}");
        }
        s + &format!("-s{}", self.seed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnlearnTrace {
    /// Total objective at every optimizer step.
    pub step_loss: Vec<f64>,
    /// Quantity watched by the divergence guard at every step.
    pub monitored: Vec<f64>,
}

/// One per-example loss term with its gradient.
enum Term<'a> {
    Nll,
    Npo { beta: f64, ref_nll: &'a [f64] },
    Steer { layer: usize, targets: &'a [Vec<Vec<f32>>] },
}

/// Entity positions of a masked sequence: rows that predict a target.
fn target_rows(seq: &TrainSequence) -> Vec<usize> {
    (1..seq.tokens.len()).filter(|&i| seq.target_mask[i]).map(|i| i - 1).collect()
}

impl Term<'_> {
    /// Unnormalised loss, normaliser count and gradient for example `idx`.
    fn eval(
        &self,
        model: &ToyTransformer,
        seq: &TrainSequence,
        idx: usize,
    ) -> Result<(f64, usize, Vec<f32>)> {
        match self {
            Term::Nll => masked_nll_grad(model, seq),
            Term::Npo { beta, ref_nll } => {
                let (nll, _, g) = masked_nll_grad(model, seq)?;
                // s = Σ log π_θ − log π_ref over entity tokens
                let s = ref_nll[idx] - nll;
                let loss = 2.0 / beta * softplus(beta * s);
                let coef = -2.0 * sigmoid(beta * s);
                Ok((loss, 1, g.into_iter().map(|x| x * coef as f32).collect()))
            }
            Term::Steer { layer, targets } => {
                let trace = model.forward_trace(&seq.tokens, Some(*layer))?;
                let h = trace.layer_output(*layer);
                let d = model.config().d_model;
                let rows = target_rows(seq);
                let mut dh = vec![0.0f32; h.len()];
                let mut loss = 0.0;
                for (r, target) in rows.iter().zip(&targets[idx]) {
                    for j in 0..d {
                        let diff = h[r * d + j] - target[j];
                        loss += (diff as f64) * (diff as f64);
                        dh[r * d + j] = 2.0 * diff;
                    }
                }
                let g = model.backward(&trace, None, &[(*layer, dh)]);
                Ok((loss, rows.len(), g))
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-example `(loss, count, grad)` over a batch, summed in index order.
fn batch_term(
    term: &Term,
    model: &ToyTransformer,
    seqs: &[TrainSequence],
    idx: &[usize],
) -> Result<(f64, usize, Vec<f32>)> {
    let parts: Vec<_> = idx
        .par_iter()
        .map(|&i| term.eval(model, &seqs[i], i))
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0f32; model.params().len()];
    let (mut loss, mut count) = (0.0, 0);
    for (l, c, g) in parts {
        loss += l;
        count += c;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
    }
    Ok((loss, count, grad))
}

struct Objective<'a> {
    forget: Term<'a>,
    forget_seqs: Vec<TrainSequence>,
    /// +1 descends the forget term, −1 ascends it.
    forget_sign: f64,
    retain: Term<'a>,
    retain_seqs: Vec<TrainSequence>,
    /// Watch the retain term instead of the total (when the total is unbounded below).
    monitor_retain: bool,
    mask: StepMask,
}

fn run(full: &ToyTransformer, obj: Objective, cfg: &UnlearnConfig) -> Result<(ToyTransformer, UnlearnTrace)> {
    let mut model = full.clone();
    let mut trace = UnlearnTrace::default();
    if cfg.epochs == 0 || obj.forget_seqs.is_empty() {
        return Ok((model, trace));
    }
    let mut opt = AdamW::new(model.params().len(), cfg.lr, 0.0, Some(1.0));
    let n_r = obj.retain_seqs.len();
    let mut initial: Option<f64> = None;
    let mut retain_cursor = 0usize;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(obj.forget_seqs.len(), cfg.seed, epoch);
        let r_order = epoch_order(n_r, cfg.seed ^ 0x005e_ed0f_4e7a, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let (fl, fc, fg) = batch_term(&obj.forget, &model, &obj.forget_seqs, chunk)?;
            let f_norm = if fc > 0 { 1.0 / fc as f64 } else { 0.0 };
            let mut grad: Vec<f32> = fg.iter().map(|g| g * (obj.forget_sign * f_norm) as f32).collect();
            let mut total = obj.forget_sign * fl * f_norm;
            let mut retain_loss = 0.0;
            if cfg.alpha > 0.0 && n_r > 0 {
                let r_idx: Vec<usize> = (0..cfg.batch_size.min(n_r))
                    .map(|k| r_order[(retain_cursor + k) % n_r])
                    .collect();
                retain_cursor = (retain_cursor + r_idx.len()) % n_r;
                let (rl, rc, rg) = batch_term(&obj.retain, &model, &obj.retain_seqs, &r_idx)?;
                if rc > 0 {
                    let w = cfg.alpha / rc as f64;
                    grad.iter_mut().zip(&rg).for_each(|(a, b)| *a += b * w as f32);
                    retain_loss = rl / rc as f64;
                    total += cfg.alpha * retain_loss;
                }
            }
            let step = trace.step_loss.len();
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerics {
                    step,
                    what: format!("unlearning loss {total}"),
                });
            }
            let watched = if obj.monitor_retain { retain_loss } else { total };
            let reference = *initial.get_or_insert(watched.abs().max(DIVERGENCE_FLOOR));
            if watched > DIVERGENCE_FACTOR * reference {
                return Err(Error::Divergence {
                    step,
                    loss: watched,
                    initial: reference,
                });
            }
            opt.step(model.params_mut(), &grad, &obj.mask);
            trace.step_loss.push(total);
            trace.monitored.push(watched);
        }
    }
    Ok((model, trace))
}

fn entity_seqs(examples: &[FactExample]) -> Vec<TrainSequence> {
    examples.iter().map(|e| e.train_sequence(LossSpan::Entity)).collect()
}

/// Gradient ascent on forget entities plus `alpha`-weighted descent on retain.
pub fn grad_diff(
    full: &ToyTransformer,
    forget: &[FactExample],
    retain: &[FactExample],
    cfg: &UnlearnConfig,
) -> Result<(ToyTransformer, UnlearnTrace)> {
    cfg.expect(Method::GradDiff)?;
    let obj = Objective {
        forget: Term::Nll,
        forget_seqs: entity_seqs(forget),
        forget_sign: -1.0,
        retain: Term::Nll,
        retain_seqs: entity_seqs(retain),
        monitor_retain: true,
        mask: StepMask::All,
    };
    run(full, obj, cfg)
}

/// Fine-tunes on refusals placed where the forget entities were.
pub fn idk_nll(
    full: &ToyTransformer,
    forget: &[FactExample],
    idk: &IdkVariant,
    retain: &[FactExample],
    cfg: &UnlearnConfig,
) -> Result<(ToyTransformer, UnlearnTrace)> {
    cfg.expect(Method::IdkNll)?;
    let forget_seqs = forget
        .iter()
        .map(|e| {
            let refusal = idk
                .refusal(&e.id)
                .ok_or_else(|| Error::input(format!("no refusal for `{}`", e.id)))?;
            if refusal == e.entity_tokens.as_slice() {
                return Err(Error::input(format!(
                    "refusal for `{}` equals its entity",
                    e.id
                )));
            }
            Ok(e.train_sequence_with_entity(refusal, LossSpan::Entity))
        })
        .collect::<Result<Vec<_>>>()?;
    let obj = Objective {
        forget: Term::Nll,
        forget_seqs,
        forget_sign: 1.0,
        retain: Term::Nll,
        retain_seqs: entity_seqs(retain),
        monitor_retain: false,
        mask: StepMask::All,
    };
    run(full, obj, cfg)
}

/// Summed entity NLL of each sequence under `model`.
fn summed_nll(model: &ToyTransformer, seqs: &[TrainSequence]) -> Result<Vec<f64>> {
    seqs.par_iter()
        .map(|s| {
            let lp = model.forward(&s.tokens)?;
            Ok((1..s.tokens.len())
                .filter(|&i| s.target_mask[i])
                .map(|i| -lp.get(i - 1, s.tokens[i]))
                .sum())
        })
        .collect()
}

/// Per-example forget loss `(2/β)·softplus(β·s)` with `s` the entity log-ratio
/// against `reference`, and its gradient.
pub fn npo_forget_loss_grad(
    model: &ToyTransformer,
    reference: &ToyTransformer,
    example: &FactExample,
    beta: f64,
) -> Result<(f64, Vec<f32>)> {
    let seq = example.train_sequence(LossSpan::Entity);
    let ref_nll = summed_nll(reference, std::slice::from_ref(&seq))?;
    let term = Term::Npo {
        beta,
        ref_nll: &ref_nll,
    };
    let (loss, _, g) = term.eval(model, &seq, 0)?;
    Ok((loss, g))
}

/// Pushes the forget entities below a frozen reference copy of `full`.
pub fn npo(
    full: &ToyTransformer,
    forget: &[FactExample],
    retain: &[FactExample],
    cfg: &UnlearnConfig,
) -> Result<(ToyTransformer, UnlearnTrace)> {
    cfg.expect(Method::Npo)?;
    let forget_seqs = entity_seqs(forget);
    let ref_nll = summed_nll(full, &forget_seqs)?;
    let obj = Objective {
        forget: Term::Npo {
            beta: cfg.beta.unwrap(),
            ref_nll: &ref_nll,
        },
        forget_seqs,
        forget_sign: 1.0,
        retain: Term::Nll,
        retain_seqs: entity_seqs(retain),
        monitor_retain: false,
        mask: StepMask::All,
    };
    run(full, obj, cfg)
}

/// Fixed random unit direction for the steering target.
pub fn rmu_direction(d_model: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0072_6d75);
    let v: Vec<f64> = (0..d_model).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Parameter ranges of blocks `max(0, l−2)..=l`.
pub fn rmu_update_ranges(model: &ToyTransformer, layer: usize) -> Vec<Range<usize>> {
    (layer.saturating_sub(2)..=layer)
        .map(|l| model.layout().block_range(l))
        .collect()
}

/// States of `model` at entity positions of each sequence, at block `layer`.
fn entity_states(
    model: &ToyTransformer,
    seqs: &[TrainSequence],
    layer: usize,
) -> Result<Vec<Vec<Vec<f32>>>> {
    let d = model.config().d_model;
    seqs.par_iter()
        .map(|s| {
            let tr = model.forward_trace(&s.tokens, Some(layer))?;
            let h = tr.layer_output(layer);
            Ok(target_rows(s).into_iter().map(|r| h[r * d..(r + 1) * d].to_vec()).collect())
        })
        .collect()
}

/// Mean distance `‖h^l − c·u‖` over forget entity positions.
pub fn rmu_target_distance(
    model: &ToyTransformer,
    forget: &[FactExample],
    cfg: &UnlearnConfig,
) -> Result<f64> {
    let layer = cfg.rmu_layer.ok_or_else(|| Error::input("rmu_layer missing"))?;
    let c = cfg.rmu_scale.ok_or_else(|| Error::input("rmu_scale missing"))?;
    let u = rmu_direction(model.config().d_model, cfg.seed);
    let states = entity_states(model, &entity_seqs(forget), layer)?;
    let dists: Vec<f64> = states
        .iter()
        .flatten()
        .map(|h| {
            h.iter()
                .zip(&u)
                .map(|(&x, &ui)| (x as f64 - c * ui as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(crate::stats::mean(&dists))
}

/// Steers forget-entity states at one layer toward `c·u` while anchoring
/// retain-entity states to their original values. Only blocks
/// `max(0, l−2)..=l` are updated.
pub fn rmu(
    full: &ToyTransformer,
    forget: &[FactExample],
    retain: &[FactExample],
    cfg: &UnlearnConfig,
) -> Result<(ToyTransformer, UnlearnTrace)> {
    cfg.expect(Method::Rmu)?;
    let layer = cfg.rmu_layer.unwrap();
    if layer >= full.n_layers() {
        return Err(Error::input(format!(
            "rmu_layer {layer} out of range for {} layers",
            full.n_layers()
        )));
    }
    let c = cfg.rmu_scale.unwrap();
    let u: Vec<f32> = rmu_direction(full.config().d_model, cfg.seed)
        .into_iter()
        .map(|x| x * c as f32)
        .collect();
    let forget_seqs = entity_seqs(forget);
    let retain_seqs = entity_seqs(retain);
    let forget_targets: Vec<Vec<Vec<f32>>> = forget_seqs
        .iter()
        .map(|s| vec![u.clone(); target_rows(s).len()])
        .collect();
    let anchors = entity_states(full, &retain_seqs, layer)?;
    let obj = Objective {
        forget: Term::Steer {
            layer,
            targets: &forget_targets,
        },
        forget_seqs,
        forget_sign: 1.0,
        retain: Term::Steer {
            layer,
            targets: &anchors,
        },
        retain_seqs,
        monitor_retain: false,
        mask: StepMask::Ranges(rmu_update_ranges(full, layer)),
    };
    run(full, obj, cfg)
}

/// Dispatches on `cfg.method`.
pub fn unlearn(
    full: &ToyTransformer,
    forget: &[FactExample],
    retain: &[FactExample],
    idk: &IdkVariant,
    cfg: &UnlearnConfig,
) -> Result<(ToyTransformer, UnlearnTrace)> {
    match cfg.method {
        Method::GradDiff => grad_diff(full, forget, retain, cfg),
        Method::IdkNll => idk_nll(full, forget, idk, retain, cfg),
        Method::Npo => npo(full, forget, retain, cfg),
        Method::Rmu => rmu(full, forget, retain, cfg),
    }
}
