//! Reference models and the model pools consumed by the meta-evaluation.

use serde::{Deserialize, Serialize};

use super::{unlearn, Method, UnlearnConfig};
use crate::corpus::{CorpusSplits, FactExample, IdkVariant, LossSpan};
use crate::error::Result;
use crate::hash::hex64;
use crate::tinylm::{train, ModelConfig, ToyTransformer, TrainConfig, TrainSequence};

/// Training sets shared by every reference run.
#[derive(Clone, Debug)]
pub struct ReferenceData {
    /// Retain facts plus both utility holdouts.
    pub retain: Vec<TrainSequence>,
    /// `retain` followed by the forget facts.
    pub full: Vec<TrainSequence>,
}

impl ReferenceData {
    pub fn new(splits: &CorpusSplits) -> Self {
        let seqs = |ex: &[FactExample]| {
            ex.iter()
                .map(|e| e.train_sequence(LossSpan::Answer))
                .collect::<Vec<_>>()
        };
        let mut retain = seqs(&splits.retain);
        retain.extend(seqs(&splits.holdout_real));
        retain.extend(seqs(&splits.holdout_world));
        let mut full = retain.clone();
        full.extend(seqs(&splits.forget));
        Self { retain, full }
    }

    /// Retain data plus all forget facts except the first `n_excluded`.
    pub fn with_forget_excluded(&self, splits: &CorpusSplits, n_excluded: usize) -> Vec<TrainSequence> {
        let mut data = self.retain.clone();
        data.extend(
            splits
                .forget
                .iter()
                .skip(n_excluded)
                .map(|e| e.train_sequence(LossSpan::Answer)),
        );
        data
    }
}

/// Recipe used for the base, full, retain and pool models.
pub fn reference_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        grad_accum: 1,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct References {
    /// Pretrained on non-forget data only; the starting point of every run.
    pub base: ToyTransformer,
    pub full: ToyTransformer,
    pub retain: ToyTransformer,
}

pub fn train_references(
    splits: &CorpusSplits,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<References> {
    let data = ReferenceData::new(splits);
    let init = ToyTransformer::new(model.clone())?;
    let (base, _) = train(&init, &data.retain, cfg)?;
    let (full, _) = train(&base, &data.full, cfg)?;
    let (retain, _) = train(&base, &data.retain, cfg)?;
    Ok(References { base, full, retain })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolTag {
    Unlearned,
    /// Trained with the forget facts.
    Positive,
    /// Trained without them.
    Negative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub grid: Vec<UnlearnConfig>,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Fine-tuning recipe for the positive/negative pools (seed is varied).
    pub pool_train: TrainConfig,
}

impl PoolConfig {
    /// Three configurations per method, from gentle to aggressive.
    pub fn default_for(model: &ModelConfig, seed: u64) -> Self {
        let mid = model.n_layers / 2;
        let mut grid = Vec::new();
        for (lr, epochs, alpha) in [(5e-4, 5, 3.0), (1e-3, 4, 3.0), (1.5e-3, 4, 5.0)] {
            grid.push(UnlearnConfig::new(Method::GradDiff, lr, epochs, alpha, seed));
        }
        for (lr, epochs) in [(1e-3, 2), (2e-3, 3), (3e-3, 6)] {
            grid.push(UnlearnConfig::new(Method::IdkNll, lr, epochs, 3.0, seed));
        }
        for (lr, epochs) in [(1e-3, 4), (1.5e-3, 4), (1.5e-3, 5)] {
            grid.push(UnlearnConfig {
                beta: Some(0.5),
                ..UnlearnConfig::new(Method::Npo, lr, epochs, 3.0, seed)
            });
        }
        for (lr, epochs, alpha, scale) in [(5e-3, 10, 3.0, 8.0), (4e-3, 10, 2.0, 8.0), (3e-3, 10, 1.0, 16.0)] {
            grid.push(UnlearnConfig {
                rmu_layer: Some(mid),
                rmu_scale: Some(scale),
                ..UnlearnConfig::new(Method::Rmu, lr, epochs, alpha, seed)
            });
        }
        Self {
            grid,
            n_positive: 8,
            n_negative: 8,
            pool_train: TrainConfig {
                epochs: 12,
                ..reference_train_config(seed)
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct PoolModel {
    pub tag: PoolTag,
    /// Config id for unlearned models, `positive-<seed>`/`negative-<seed>` otherwise.
    pub id: String,
    pub config: Option<UnlearnConfig>,
    pub model: ToyTransformer,
}

#[derive(Clone, Debug, Default)]
pub struct Pool {
    pub models: Vec<PoolModel>,
}

impl Pool {
    pub fn tagged(&self, tag: PoolTag) -> impl Iterator<Item = &PoolModel> {
        self.models.iter().filter(move |m| m.tag == tag)
    }
}

/// Unlearns `full` once per grid entry and fine-tunes `base` into the
/// positive and negative pools.
pub fn generate_pool(
    refs: &References,
    splits: &CorpusSplits,
    idk: &IdkVariant,
    cfg: &PoolConfig,
) -> Result<Pool> {
    let mut models = Vec::new();
    for u in &cfg.grid {
        let (model, _) = unlearn(&refs.full, &splits.forget, &splits.retain, idk, u)?;
        models.push(PoolModel {
            tag: PoolTag::Unlearned,
            id: u.id(),
            config: Some(u.clone()),
            model,
        });
    }
    let data = ReferenceData::new(splits);
    for (tag, n, set) in [
        (PoolTag::Positive, cfg.n_positive, &data.full),
        (PoolTag::Negative, cfg.n_negative, &data.retain),
    ] {
        for k in 0..n {
            let seed = cfg.pool_train.seed.wrapping_add(1 + k as u64);
            let tc = TrainConfig {
                seed,
                ..cfg.pool_train.clone()
            };
            let (model, _) = train(&refs.base, set, &tc)?;
            let name = if tag == PoolTag::Positive { "positive" } else { "negative" };
            models.push(PoolModel {
                tag,
                id: format!("{name}-{seed}"),
                config: None,
                model,
            });
        }
    }
    Ok(Pool { models })
}

/// One line of the fixture manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub id: String,
    pub method: Option<Method>,
    pub cfg: Option<UnlearnConfig>,
    pub checkpoint: Option<String>,
    pub param_hash: String,
    pub utility: Option<f64>,
    pub pool: PoolTag,
}

impl FixtureEntry {
    pub fn new(m: &PoolModel, checkpoint: Option<String>, utility: Option<f64>) -> Self {
        Self {
            id: m.id.clone(),
            method: m.config.as_ref().map(|c| c.method),
            cfg: m.config.clone(),
            checkpoint,
            param_hash: hex64(m.model.param_hash()),
            utility,
            pool: m.tag,
        }
    }
}
