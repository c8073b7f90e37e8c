use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Real, TokenId, ToyTransformer, Transformer};
use crate::error::{Error, Result};

/// One training sequence. `target_mask[i]` marks token `i` as a loss target
/// (predicted from row `i - 1`); index 0 is never a target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub tokens: Vec<TokenId>,
    pub target_mask: Vec<bool>,
}

impl TrainSequence {
    pub fn n_targets(&self) -> usize {
        self.target_mask.iter().skip(1).filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub weight_decay: f64,
    /// Global-norm gradient clip applied before each optimizer step.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 30,
            batch_size: 8,
            grad_accum: 4,
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::input("lr must be positive"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::input("batch_size and grad_accum must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    /// Mean per-token loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Which parameters an optimizer step may touch.
#[derive(Clone, Debug, Default)]
pub enum StepMask {
    #[default]
    All,
    Ranges(Vec<Range<usize>>),
}

impl StepMask {
    fn ranges(&self, total: usize) -> Vec<Range<usize>> {
        match self {
            StepMask::All => std::iter::once(0..total).collect(),
            StepMask::Ranges(r) => r.clone(),
        }
    }
}

/// AdamW with decoupled weight decay and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(n_params: usize, lr: f64, weight_decay: f64, max_grad_norm: Option<f64>) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            max_grad_norm,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with the already-averaged gradient `grad`.
    pub fn step<F: Real>(&mut self, params: &mut [F], grad: &[F], mask: &StepMask) {
        let ranges = mask.ranges(params.len());
        let mut clip = 1.0;
        if let Some(max) = self.max_grad_norm {
            let sq: f64 = ranges
                .iter()
                .flat_map(|r| grad[r.clone()].iter())
                .map(|g| {
                    let g = g.to_f64().unwrap();
                    g * g
                })
                .sum();
            let norm = sq.sqrt();
            if norm > max {
                clip = max / norm;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for r in ranges {
            for i in r {
                let g = grad[i].to_f64().unwrap() * clip;
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                let mut p = params[i].to_f64().unwrap();
                p -= self.lr * self.weight_decay * p;
                p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                params[i] = F::from(p).unwrap();
            }
        }
    }
}

/// Summed next-token NLL over the masked targets of one sequence and its
/// gradient (not normalised).
pub fn masked_nll_grad<F: Real>(
    model: &Transformer<F>,
    seq: &TrainSequence,
) -> Result<(f64, usize, Vec<F>)> {
    if seq.target_mask.len() != seq.tokens.len() {
        return Err(Error::input("target mask length differs from token count"));
    }
    let trace = model.forward_trace(&seq.tokens, None)?;
    let lp = trace.log_probs.as_ref().unwrap();
    let v = lp.vocab;
    let t = seq.tokens.len();
    let mut dlogits = vec![F::zero(); t * v];
    let mut loss = 0.0;
    let mut count = 0;
    for i in 1..t {
        if !seq.target_mask[i] {
            continue;
        }
        let row = i - 1;
        let target = seq.tokens[i] as usize;
        loss -= lp.get(row, seq.tokens[i]);
        count += 1;
        let out = &mut dlogits[row * v..(row + 1) * v];
        for (j, o) in out.iter_mut().enumerate() {
            let p = lp.data[row * v + j].exp();
            *o += F::from(p - if j == target { 1.0 } else { 0.0 }).unwrap();
        }
    }
    let grad = if count > 0 {
        model.backward(&trace, Some(&dlogits), &[])
    } else {
        vec![F::zero(); model.params().len()]
    };
    Ok((loss, count, grad))
}

/// Summed loss, target count and gradient over a batch, reduced in index order.
pub(crate) fn batch_nll_grad(
    model: &ToyTransformer,
    batch: &[&TrainSequence],
) -> Result<(f64, usize, Vec<f32>)> {
    let parts: Vec<(f64, usize, Vec<f32>)> = batch
        .par_iter()
        .map(|s| masked_nll_grad(model, s))
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0f32; model.params().len()];
    let (mut loss, mut count) = (0.0, 0);
    for (l, c, g) in parts {
        loss += l;
        count += c;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    Ok((loss, count, grad))
}

pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx
}

/// Masked next-token cross-entropy training with AdamW.
///
/// Each optimizer step averages the loss over all target tokens of
/// `batch_size × grad_accum` sequences; a trailing partial group at the end
/// of an epoch still steps.
pub fn train(
    model: &ToyTransformer,
    data: &[TrainSequence],
    cfg: &TrainConfig,
) -> Result<(ToyTransformer, LossTrace)> {
    cfg.validate()?;
    let mut out = model.clone();
    let mut trace = LossTrace::default();
    if cfg.epochs == 0 || data.is_empty() {
        return Ok((out, trace));
    }
    let mut opt = AdamW::new(out.params().len(), cfg.lr, cfg.weight_decay, cfg.max_grad_norm);
    let group = cfg.batch_size * cfg.grad_accum;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let (mut ep_loss, mut ep_count) = (0.0, 0usize);
        for chunk in order.chunks(group) {
            let mut grad = vec![0.0f32; out.params().len()];
            let (mut loss, mut count) = (0.0, 0usize);
            for micro in chunk.chunks(cfg.batch_size) {
                let batch: Vec<&TrainSequence> = micro.iter().map(|&i| &data[i]).collect();
                let (l, c, g) = batch_nll_grad(&out, &batch)?;
                loss += l;
                count += c;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            if !loss.is_finite() {
                return Err(Error::Numerics {
                    step: trace.steps,
                    what: format!("loss {loss}"),
                });
            }
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            opt.step(out.params_mut(), &grad, &StepMask::All);
            trace.steps += 1;
            ep_loss += loss;
            ep_count += count;
        }
        trace.epoch_loss.push(if ep_count > 0 {
            ep_loss / ep_count as f64
        } else {
            0.0
        });
    }
    Ok((out, trace))
}
