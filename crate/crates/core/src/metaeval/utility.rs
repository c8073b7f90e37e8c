//! Model utility: answer quality on the non-forget splits plus a fluency rate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplits, Split, EOS};
use crate::error::Result;
use crate::outmetrics::{
    evaluate_examples, generate, metric_mean, teacher_forced_trace, OutputMetric,
};
use crate::stats::harmonic_mean;
use crate::tinylm::ToyTransformer;

/// Generations whose per-token perplexity under the full model stays below
/// this count as fluent.
pub const FLUENCY_PPL_THRESHOLD: f64 = 20.0;

pub const UTILITY_SPLITS: [Split; 3] = [Split::Retain, Split::HoldoutReal, Split::HoldoutWorld];
pub const UTILITY_METRICS: [OutputMetric; 3] =
    [OutputMetric::Prob, OutputMetric::Rouge, OutputMetric::TruthRatio];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityComponent {
    pub split: Split,
    pub metric: OutputMetric,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub components: Vec<UtilityComponent>,
    /// Harmonic mean of the nine components.
    pub mu: f64,
    pub fluency: f64,
    pub utility: f64,
}

impl Utility {
    pub fn from_parts(components: Vec<UtilityComponent>, fluency: f64) -> Self {
        let mu = harmonic_mean(&components.iter().map(|c| c.value).collect::<Vec<_>>());
        Self {
            utility: harmonic_mean(&[mu, fluency]),
            components,
            mu,
            fluency,
        }
    }

    /// Not clamped: a model may exceed the full model's utility.
    pub fn relative_to(&self, full: &Utility) -> f64 {
        if full.utility > 0.0 {
            self.utility / full.utility
        } else {
            0.0
        }
    }
}

/// Fraction of forget-prompt generations the full model finds fluent.
/// Generations that stop on the end token are scored including it.
pub fn fluency(
    model: &ToyTransformer,
    full: &ToyTransformer,
    splits: &CorpusSplits,
    max_new: usize,
) -> Result<f64> {
    let forget = splits.split(Split::Forget);
    if forget.is_empty() {
        return Ok(0.0);
    }
    let fluent = forget
        .par_iter()
        .map(|e| {
            let g = generate(model, &e.prompt_tokens, max_new, None)?;
            let mut scored = g.tokens;
            if g.ended {
                scored.push(EOS);
            }
            if scored.is_empty() {
                return Ok(false);
            }
            let t = teacher_forced_trace(full, &e.prompt_tokens, &scored)?;
            Ok((-t.mean_logprob()).exp() < FLUENCY_PPL_THRESHOLD)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(fluent.iter().filter(|&&f| f).count() as f64 / fluent.len() as f64)
}

pub fn utility(
    model: &ToyTransformer,
    full: &ToyTransformer,
    splits: &CorpusSplits,
    max_new: usize,
) -> Result<Utility> {
    let mut components = Vec::with_capacity(9);
    for split in UTILITY_SPLITS {
        let rows = evaluate_examples(model, splits.split(split), &UTILITY_METRICS, max_new)?;
        for metric in UTILITY_METRICS {
            components.push(UtilityComponent {
                split,
                metric,
                value: metric_mean(&rows, metric).unwrap_or(0.0),
            });
        }
    }
    Ok(Utility::from_parts(components, fluency(model, full, splits, max_new)?))
}
