//! Meta-evaluation of forgetting metrics: how well each separates models that
//! know the forget facts from models that never saw them (faithfulness), and
//! how stable it is under weight quantization and brief relearning
//! (robustness). Also the ranking formulas used to compare methods.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplits, LossSpan, Split};
use crate::error::{Error, Result};
use crate::hash::hex64;
use crate::outmetrics::{
    evaluate_examples, metric_mean, mia_scores, normalized_mia, MiaVariant, OutputMetric,
    DEFAULT_MAX_NEW,
};
use crate::stats::{auc_roc, harmonic_mean, mean, spearman};
use crate::tinylm::{quantize_weights, train, PatchLocation, ToyTransformer, TrainConfig};
use crate::udscore::{stage2_eval, StageOneCache};
use crate::unlearners::{Pool, PoolModel, PoolTag};
use crate::whitebox::{
    cka_erasure, fisher_masked_erasure_with, forget_fisher, lens_logprobs,
    logit_lens_erasure_from, DEFAULT_MASK_FRACTION,
};

pub mod ranking;
pub mod utility;

pub use ranking::{aggregate_and_rank, memorization, ModelComponents, Ranking, RankingRow};
pub use utility::{utility, Utility};

pub const META_FORMAT_VERSION: u32 = 1;
/// Denominator guard of Q and R.
pub const QR_EPSILON: f64 = 1e-8;
/// Minimum utility relative to the full model for the robustness pool.
pub const UTILITY_FILTER: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Higher means more knowledge retained.
    KnowledgeUp,
    /// Higher means more knowledge erased.
    ErasureUp,
}

/// A metric under meta-evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum MetricId {
    Output(OutputMetric),
    /// Retain-normalized membership AUC.
    Mia(MiaVariant),
    Uds,
    Cka,
    LogitLens,
    FisherMasked,
}

impl MetricId {
    pub fn all() -> Vec<MetricId> {
        OutputMetric::ALL
            .into_iter()
            .map(MetricId::Output)
            .chain(MiaVariant::ALL.into_iter().map(MetricId::Mia))
            .chain([
                MetricId::Uds,
                MetricId::Cka,
                MetricId::LogitLens,
                MetricId::FisherMasked,
            ])
            .collect()
    }

    pub fn name(&self) -> String {
        match self {
            MetricId::Output(m) => m.as_str().to_string(),
            MetricId::Mia(v) => format!("mia_{}", v.as_str()),
            MetricId::Uds => "uds".into(),
            MetricId::Cka => "cka".into(),
            MetricId::LogitLens => "logit_lens".into(),
            MetricId::FisherMasked => "fisher_masked".into(),
        }
    }

    pub fn orientation(&self) -> Orientation {
        match self {
            MetricId::Output(_) => Orientation::KnowledgeUp,
            _ => Orientation::ErasureUp,
        }
    }

    /// Value on the knowledge-up scale.
    pub fn oriented(&self, raw: f64) -> f64 {
        match self.orientation() {
            Orientation::KnowledgeUp => raw,
            Orientation::ErasureUp => 1.0 - raw,
        }
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricId::all()
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::input(format!("unknown metric `{s}`")))
    }
}

impl From<MetricId> for String {
    fn from(m: MetricId) -> String {
        m.name()
    }
}

impl TryFrom<String> for MetricId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

pub type MetricValues = BTreeMap<MetricId, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub location: PatchLocation,
    pub max_new: usize,
    pub lens_tau: f64,
    pub fisher_fraction: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            location: PatchLocation::LayerOutput,
            max_new: DEFAULT_MAX_NEW,
            lens_tau: crate::udscore::DEFAULT_TAU,
            fisher_fraction: DEFAULT_MASK_FRACTION,
        }
    }
}

/// Everything a metric needs besides the model under test, with the
/// reference-side quantities computed once.
pub struct EvalContext<'a> {
    pub splits: &'a CorpusSplits,
    pub full: &'a ToyTransformer,
    pub retain: &'a ToyTransformer,
    pub cache: &'a StageOneCache,
    pub options: EvalOptions,
    retain_auc: BTreeMap<MiaVariant, f64>,
    lens_full: Vec<f64>,
    lens_retain: Vec<f64>,
    fisher_full: Vec<f64>,
    fisher_retain: Vec<f64>,
}

impl<'a> EvalContext<'a> {
    pub fn new(
        splits: &'a CorpusSplits,
        full: &'a ToyTransformer,
        retain: &'a ToyTransformer,
        cache: &'a StageOneCache,
        options: EvalOptions,
    ) -> Result<Self> {
        let forget = splits.split(Split::Forget);
        let retain_auc = mia_scores(retain, splits)?
            .into_iter()
            .map(|s| (s.variant, s.auc))
            .collect();
        Ok(Self {
            retain_auc,
            lens_full: lens_logprobs(full, full, forget)?,
            lens_retain: lens_logprobs(full, retain, forget)?,
            fisher_full: forget_fisher(full, forget)?,
            fisher_retain: forget_fisher(retain, forget)?,
            splits,
            full,
            retain,
            cache,
            options,
        })
    }

    pub fn retain_auc(&self, v: MiaVariant) -> f64 {
        self.retain_auc[&v]
    }

    /// Raw (un-oriented) values of `metrics` for `model`.
    pub fn evaluate(&self, model: &ToyTransformer, metrics: &[MetricId]) -> Result<MetricValues> {
        let forget = self.splits.split(Split::Forget);
        let mut out = MetricValues::new();
        let outputs: Vec<OutputMetric> = metrics
            .iter()
            .filter_map(|m| match m {
                MetricId::Output(o) => Some(*o),
                _ => None,
            })
            .collect();
        if !outputs.is_empty() {
            let rows = evaluate_examples(model, forget, &outputs, self.options.max_new)?;
            for o in outputs {
                out.insert(MetricId::Output(o), metric_mean(&rows, o).unwrap_or(0.0));
            }
        }
        if metrics.iter().any(|m| matches!(m, MetricId::Mia(_))) {
            for s in mia_scores(model, self.splits)? {
                if metrics.contains(&MetricId::Mia(s.variant)) {
                    let v = normalized_mia(s.auc, self.retain_auc(s.variant))?;
                    out.insert(MetricId::Mia(s.variant), v);
                }
            }
        }
        for &m in metrics {
            let v = match m {
                MetricId::Uds => stage2_eval(self.full, model, self.cache, forget)?.model_uds,
                MetricId::Cka => {
                    cka_erasure(self.full, self.retain, model, forget, self.options.location)?
                        .aggregate
                }
                MetricId::LogitLens => {
                    let k = lens_logprobs(self.full, model, forget)?;
                    logit_lens_erasure_from(&self.lens_full, &self.lens_retain, &k, self.options.lens_tau)?
                        .aggregate
                }
                MetricId::FisherMasked => {
                    let f = forget_fisher(model, forget)?;
                    fisher_masked_erasure_with(
                        self.full,
                        &self.fisher_full,
                        &self.fisher_retain,
                        &f,
                        self.options.fisher_fraction,
                    )?
                    .aggregate
                }
                MetricId::Output(_) | MetricId::Mia(_) => continue,
            };
            out.insert(m, v);
        }
        Ok(out)
    }
}

/// `1 − |m′ − m| / (|m′| + |m| + ε)`.
pub fn robustness_q(m: f64, m_prime: f64) -> f64 {
    1.0 - (m_prime - m).abs() / (m_prime.abs() + m.abs() + QR_EPSILON)
}

/// `1 − |Δ_unl − Δ_ret| / (|Δ_unl| + |Δ_ret| + ε)`.
pub fn robustness_r(delta_unl: f64, delta_ret: f64) -> f64 {
    1.0 - (delta_unl - delta_ret).abs() / (delta_unl.abs() + delta_ret.abs() + QR_EPSILON)
}

/// AUC of knowledge-oriented values, positives against negatives.
pub fn faithfulness_auc(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::input("faithfulness needs non-empty positive and negative pools"));
    }
    auc_roc(positive, negative)
}

/// Cut on knowledge-oriented values that best separates the pools; values
/// above it are classified as knowing. Candidates sit between adjacent
/// distinct values (plus one below the minimum and the maximum itself);
/// among equally accurate cuts the middle one is taken.
pub fn max_accuracy_threshold(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::input("threshold needs non-empty positive and negative pools"));
    }
    let mut vals: Vec<f64> = positive.iter().chain(negative).copied().collect();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let mut cuts = vec![vals[0] - 1.0];
    cuts.extend(vals.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cuts.push(*vals.last().unwrap());
    let correct = |c: f64| {
        positive.iter().filter(|&&p| p > c).count() + negative.iter().filter(|&&n| n <= c).count()
    };
    let scores: Vec<usize> = cuts.iter().map(|&c| correct(c)).collect();
    let best = *scores.iter().max().unwrap();
    let optimal: Vec<f64> = cuts
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| s == best)
        .map(|(&c, _)| c)
        .collect();
    Ok(optimal[(optimal.len() - 1) / 2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbations {
    pub bits: u32,
    /// Fine-tuning on the forget facts; see [`apply_relearn`].
    pub relearn: TrainConfig,
}

impl Perturbations {
    pub fn new(bits: u32, seed: u64) -> Self {
        Self {
            bits,
            relearn: relearn_config(seed),
        }
    }
}

/// One epoch over the forget facts.
pub fn relearn_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        grad_accum: 1,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

pub fn apply_relearn(
    model: &ToyTransformer,
    splits: &CorpusSplits,
    cfg: &TrainConfig,
) -> Result<ToyTransformer> {
    let data: Vec<_> = splits
        .split(Split::Forget)
        .iter()
        .map(|e| e.train_sequence(LossSpan::Answer))
        .collect();
    Ok(train(model, &data, cfg)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub tag: PoolTag,
    pub param_hash: String,
    pub values: MetricValues,
    pub utility: Option<Utility>,
    pub utility_rel: Option<f64>,
    pub quantized: Option<MetricValues>,
    pub relearned: Option<MetricValues>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub model_id: String,
    pub model_hash: String,
    pub m: f64,
    pub m_quant: f64,
    pub m_relearn: f64,
    pub delta_unl: f64,
    pub delta_ret: f64,
    pub q: f64,
    pub r: f64,
    pub hm_qr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricId,
    pub orientation: Orientation,
    pub faithfulness_auc: f64,
    pub threshold: f64,
    pub n_utility_pass: usize,
    pub n_faith_pass: usize,
    pub survivors: Vec<RobustnessRow>,
    pub robustness: Option<f64>,
    pub overall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaEvalReport {
    pub format_version: u32,
    /// How robustness is averaged over the surviving models.
    pub robustness_averaging: String,
    pub fluency_rule: String,
    pub perturbations: Perturbations,
    pub full_utility: Utility,
    /// Retain model values before and after relearning.
    pub retain_values: MetricValues,
    pub retain_relearned: MetricValues,
    pub models: Vec<ModelRecord>,
    pub metrics: Vec<MetricReport>,
}

impl MetaEvalReport {
    pub fn metric(&self, m: MetricId) -> Option<&MetricReport> {
        self.metrics.iter().find(|r| r.metric == m)
    }

    pub fn unlearned(&self) -> impl Iterator<Item = &ModelRecord> {
        self.models.iter().filter(|r| r.tag == PoolTag::Unlearned)
    }
}

fn record(ctx: &EvalContext, m: &PoolModel, metrics: &[MetricId]) -> Result<ModelRecord> {
    Ok(ModelRecord {
        id: m.id.clone(),
        tag: m.tag,
        param_hash: hex64(m.model.param_hash()),
        values: ctx.evaluate(&m.model, metrics)?,
        utility: None,
        utility_rel: None,
        quantized: None,
        relearned: None,
    })
}

/// Evaluates every pool model, perturbs the unlearned ones, and scores each
/// metric's faithfulness and robustness.
pub fn run_meta_eval(
    ctx: &EvalContext,
    metrics: &[MetricId],
    pool: &Pool,
    perturb: &Perturbations,
) -> Result<MetaEvalReport> {
    let max_new = ctx.options.max_new;
    let full_utility = utility(ctx.full, ctx.full, ctx.splits, max_new)?;
    let mut models = Vec::with_capacity(pool.models.len());
    for m in &pool.models {
        let mut rec = record(ctx, m, metrics)?;
        if m.tag == PoolTag::Unlearned {
            let u = utility(&m.model, ctx.full, ctx.splits, max_new)?;
            rec.utility_rel = Some(u.relative_to(&full_utility));
            rec.utility = Some(u);
            let q = quantize_weights(&m.model, perturb.bits)?;
            rec.quantized = Some(ctx.evaluate(&q, metrics)?);
            let r = apply_relearn(&m.model, ctx.splits, &perturb.relearn)?;
            rec.relearned = Some(ctx.evaluate(&r, metrics)?);
        }
        log::info!("evaluated {}", rec.id);
        models.push(rec);
    }
    let retain_values = ctx.evaluate(ctx.retain, metrics)?;
    let retain_relearned =
        ctx.evaluate(&apply_relearn(ctx.retain, ctx.splits, &perturb.relearn)?, metrics)?;

    let reports = metrics
        .iter()
        .map(|&metric| {
            score_metric(metric, &models, &retain_values, &retain_relearned)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetaEvalReport {
        format_version: META_FORMAT_VERSION,
        robustness_averaging: "mean over surviving models of HM(Q, R)".into(),
        fluency_rule: format!(
            "forget-prompt generations with per-token perplexity under the full model below {}",
            utility::FLUENCY_PPL_THRESHOLD
        ),
        perturbations: perturb.clone(),
        full_utility,
        retain_values,
        retain_relearned,
        models,
        metrics: reports,
    })
}

fn oriented_of(rec: &ModelRecord, metric: MetricId) -> Result<f64> {
    rec.values
        .get(&metric)
        .map(|&v| metric.oriented(v))
        .ok_or_else(|| Error::input(format!("`{}` has no value for {metric}", rec.id)))
}

/// Faithfulness, filters and robustness of one metric from evaluated records.
pub fn score_metric(
    metric: MetricId,
    models: &[ModelRecord],
    retain_values: &MetricValues,
    retain_relearned: &MetricValues,
) -> Result<MetricReport> {
    let pool_values = |tag: PoolTag| -> Result<Vec<f64>> {
        models
            .iter()
            .filter(|r| r.tag == tag)
            .map(|r| oriented_of(r, metric))
            .collect()
    };
    let pos = pool_values(PoolTag::Positive)?;
    let neg = pool_values(PoolTag::Negative)?;
    let faithfulness_auc = faithfulness_auc(&pos, &neg)?;
    let threshold = max_accuracy_threshold(&pos, &neg)?;
    let lookup = |vals: &MetricValues, what: &str| {
        vals.get(&metric)
            .map(|&v| metric.oriented(v))
            .ok_or_else(|| Error::input(format!("{what} has no value for {metric}")))
    };
    let delta_ret = lookup(retain_relearned, "relearned retain model")?
        - lookup(retain_values, "retain model")?;

    let mut n_utility_pass = 0;
    let mut n_faith_pass = 0;
    let mut survivors = Vec::new();
    for rec in models.iter().filter(|r| r.tag == PoolTag::Unlearned) {
        let m = oriented_of(rec, metric)?;
        let util_ok = rec.utility_rel.is_some_and(|u| u >= UTILITY_FILTER);
        let faith_ok = m <= threshold;
        n_utility_pass += util_ok as usize;
        n_faith_pass += faith_ok as usize;
        if !(util_ok && faith_ok) {
            continue;
        }
        let (Some(qv), Some(rv)) = (&rec.quantized, &rec.relearned) else {
            return Err(Error::input(format!("`{}` lacks perturbed values", rec.id)));
        };
        let m_quant = lookup(qv, &rec.id)?;
        let m_relearn = lookup(rv, &rec.id)?;
        let q = robustness_q(m, m_quant);
        let r = robustness_r(m_relearn - m, delta_ret);
        survivors.push(RobustnessRow {
            model_id: rec.id.clone(),
            model_hash: rec.param_hash.clone(),
            m,
            m_quant,
            m_relearn,
            delta_unl: m_relearn - m,
            delta_ret,
            q,
            r,
            hm_qr: harmonic_mean(&[q, r]),
        });
    }
    let (robustness, overall, diagnostic) = if survivors.is_empty() {
        (
            None,
            None,
            Some(format!(
                "no unlearned model passes both filters ({n_utility_pass} pass utility, {n_faith_pass} classified unlearned)"
            )),
        )
    } else {
        let rob = mean(&survivors.iter().map(|s| s.hm_qr).collect::<Vec<_>>());
        (Some(rob), Some(harmonic_mean(&[faithfulness_auc, rob])), None)
    };
    Ok(MetricReport {
        metric,
        orientation: metric.orientation(),
        faithfulness_auc,
        threshold,
        n_utility_pass,
        n_faith_pass,
        survivors,
        robustness,
        overall,
        diagnostic,
    })
}

#[derive(Serialize)]
struct PerturbationRow {
    model_hash: String,
    metric: String,
    m: f64,
    m_quant: f64,
    m_relearn: f64,
    delta_ret: f64,
}

/// Knowledge-oriented values of every unlearned model before and after each
/// perturbation.
pub fn perturbation_csv(report: &MetaEvalReport) -> Result<String> {
    let mut rows = Vec::new();
    for mr in &report.metrics {
        let metric = mr.metric;
        let oriented = |v: &MetricValues| v.get(&metric).map(|&x| metric.oriented(x));
        let (Some(r0), Some(r1)) = (oriented(&report.retain_values), oriented(&report.retain_relearned))
        else {
            continue;
        };
        for rec in report.unlearned() {
            let (Some(m), Some(mq), Some(mr)) = (
                oriented(&rec.values),
                rec.quantized.as_ref().and_then(oriented),
                rec.relearned.as_ref().and_then(oriented),
            ) else {
                continue;
            };
            rows.push(PerturbationRow {
                model_hash: rec.param_hash.clone(),
                metric: metric.name(),
                m,
                m_quant: mq,
                m_relearn: mr,
                delta_ret: r1 - r0,
            });
        }
    }
    crate::report::csv_string(&rows)
}

/// Spearman correlation of each metric with UDS across the unlearned models
/// (raw values); `None` where undefined.
pub fn correlations_with_uds(report: &MetaEvalReport) -> BTreeMap<String, Option<f64>> {
    let recs: Vec<&ModelRecord> = report.unlearned().collect();
    let Some(uds): Option<Vec<f64>> = recs.iter().map(|r| r.values.get(&MetricId::Uds).copied()).collect()
    else {
        return BTreeMap::new();
    };
    report
        .metrics
        .iter()
        .filter(|m| m.metric != MetricId::Uds)
        .map(|m| {
            let v: Option<Vec<f64>> = recs.iter().map(|r| r.values.get(&m.metric).copied()).collect();
            let rho = v.and_then(|v| spearman(&v, &uds).ok()).map(|s| s.rho);
            (m.metric.name(), rho)
        })
        .collect()
}

/// Ranking inputs for each unlearned model of a report.
pub fn ranking_components(report: &MetaEvalReport, methods: &BTreeMap<String, String>) -> Vec<ModelComponents> {
    report
        .unlearned()
        .map(|rec| {
            let v = |m: MetricId| rec.values.get(&m).copied();
            let mem = match (
                v(MetricId::Output(OutputMetric::Es)),
                v(MetricId::Output(OutputMetric::Em)),
                v(MetricId::Output(OutputMetric::ParaProb)),
                v(MetricId::Output(OutputMetric::TruthRatio)),
            ) {
                (Some(a), Some(b), Some(c), Some(d)) => Some(memorization(a, b, c, d)),
                _ => None,
            };
            let mia: Option<Vec<f64>> = MiaVariant::ALL.iter().map(|&x| v(MetricId::Mia(x))).collect();
            ModelComponents {
                method: methods.get(&rec.id).cloned().unwrap_or_else(|| rec.id.clone()),
                config_id: rec.id.clone(),
                memorization: mem,
                mia_agg: mia.map(|m| harmonic_mean(&m)),
                uds: v(MetricId::Uds),
                utility_rel: rec.utility_rel,
            }
        })
        .collect()
}
