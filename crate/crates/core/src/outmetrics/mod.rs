//! Output-level forgetting metrics: teacher-forced scores, greedy-generation
//! ROUGE and membership inference.
//!
//! Teacher-forced metrics score the entity span after `prompt ‖ prefix`, the
//! same positions the patching audit reads. Generation metrics decode from the
//! prompt and compare against the whole answer.

use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FactExample, CorpusSplits, Split, EOS, JAILBREAK};
use crate::error::{Error, Result};
use crate::stats;
use crate::tinylm::{LogProbTable, TokenId, ToyTransformer};

pub mod report;

pub use report::{metrics_csv, ModelSummary};

/// Fraction of lowest-scoring tokens kept by the Min-K scorers.
pub const MIN_K_FRACTION: f64 = 0.4;
pub const MIN_K_PP_EPS: f64 = 1e-8;
/// Generation budget for the ROUGE metrics. Toy answers are at most eight
/// tokens, so this leaves room for rambling without paying for a full context.
pub const DEFAULT_MAX_NEW: usize = 16;

/// Per-token log-probabilities of an answer under teacher forcing.
#[derive(Clone, Debug)]
pub struct TeacherForcedTrace {
    pub answer: Vec<TokenId>,
    /// `ℓ_t = log p(y_t | x, y_<t)` in nats.
    pub logprobs: Vec<f64>,
    /// Full-vocabulary log-prob rows at the predicting positions.
    pub rows: LogProbTable,
}

impl TeacherForcedTrace {
    pub fn len(&self) -> usize {
        self.logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logprobs.is_empty()
    }

    /// Whether the argmax at each position equals the true token.
    pub fn argmax_matches(&self) -> Vec<bool> {
        self.answer
            .iter()
            .enumerate()
            .map(|(t, &y)| self.rows.argmax(t) == y)
            .collect()
    }

    pub fn mean_logprob(&self) -> f64 {
        stats::mean(&self.logprobs)
    }
}

/// Scores `answer` after `context` in one forward pass.
pub fn teacher_forced_trace(
    model: &ToyTransformer,
    context: &[TokenId],
    answer: &[TokenId],
) -> Result<TeacherForcedTrace> {
    if context.is_empty() || answer.is_empty() {
        return Err(Error::input("context and answer must be non-empty"));
    }
    let mut seq = context.to_vec();
    seq.extend_from_slice(answer);
    if seq.len() > model.config().max_seq_len {
        return Err(Error::input(format!(
            "sequence of {} tokens exceeds context {}",
            seq.len(),
            model.config().max_seq_len
        )));
    }
    let lp = model.forward(&seq)?;
    let first = context.len() - 1;
    let v = lp.vocab;
    let rows = LogProbTable {
        rows: answer.len(),
        vocab: v,
        data: lp.data[first * v..(first + answer.len()) * v].to_vec(),
    };
    let logprobs = answer
        .iter()
        .enumerate()
        .map(|(t, &y)| rows.get(t, y))
        .collect();
    Ok(TeacherForcedTrace {
        answer: answer.to_vec(),
        logprobs,
        rows,
    })
}

/// Trace of the entity after `prompt ‖ prefix`.
pub fn entity_trace(model: &ToyTransformer, example: &FactExample) -> Result<TeacherForcedTrace> {
    teacher_forced_trace(model, &example.context(), &example.entity_tokens)
}

/// `1 − k/T` where `k` is the shortest given prefix after which every
/// remaining argmax is correct.
pub fn extraction_strength_from(matches: &[bool]) -> f64 {
    let t = matches.len();
    if t == 0 {
        return 0.0;
    }
    let k = matches.iter().rposition(|&m| !m).map_or(0, |i| i + 1);
    1.0 - k as f64 / t as f64
}

/// Greedy decoding continues the true suffix exactly when each teacher-forced
/// argmax matches, so one forward pass suffices.
pub fn extraction_strength(model: &ToyTransformer, example: &FactExample) -> Result<f64> {
    Ok(extraction_strength_from(&entity_trace(model, example)?.argmax_matches()))
}

pub fn exact_memorization_from(matches: &[bool]) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    matches.iter().filter(|&&m| m).count() as f64 / matches.len() as f64
}

pub fn exact_memorization(model: &ToyTransformer, example: &FactExample) -> Result<f64> {
    Ok(exact_memorization_from(&entity_trace(model, example)?.argmax_matches()))
}

/// Geometric mean of per-token probabilities.
pub fn probability(trace: &TeacherForcedTrace) -> f64 {
    trace.mean_logprob().exp()
}

pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

/// Geometric mean of the probabilities of each paraphrased answer after the prompt.
pub fn para_probability(model: &ToyTransformer, example: &FactExample) -> Result<f64> {
    if example.paraphrase_entities.is_empty() {
        return Err(Error::input(format!("`{}` has no paraphrases", example.id)));
    }
    let probs = example
        .paraphrase_entities
        .iter()
        .map(|p| teacher_forced_trace(model, &example.prompt_tokens, p).map(|t| probability(&t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(geometric_mean(&probs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRatio {
    pub value: f64,
    /// Both probabilities underflowed to zero; `value` is 0.5.
    pub degenerate: bool,
}

/// `p_c / (p_c + p_w)` with `p_w` the arithmetic mean over wrong answers.
pub fn truth_ratio_from(p_correct: f64, p_wrong: &[f64]) -> Result<TruthRatio> {
    if p_wrong.is_empty() {
        return Err(Error::input("truth ratio needs at least one perturbed answer"));
    }
    let pw = stats::mean(p_wrong);
    let denom = p_correct + pw;
    if denom <= 0.0 {
        return Ok(TruthRatio {
            value: 0.5,
            degenerate: true,
        });
    }
    Ok(TruthRatio {
        value: p_correct / denom,
        degenerate: false,
    })
}

pub fn truth_ratio(model: &ToyTransformer, example: &FactExample) -> Result<TruthRatio> {
    let ctx = example.context();
    let pc = probability(&teacher_forced_trace(model, &ctx, &example.entity_tokens)?);
    let pw = example
        .perturbed_entities
        .iter()
        .map(|p| teacher_forced_trace(model, &ctx, p).map(|t| probability(&t)))
        .collect::<Result<Vec<_>>>()?;
    truth_ratio_from(pc, &pw)
}

/// Result of greedy decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Free continuation, without the forced prefix and the end token.
    pub tokens: Vec<TokenId>,
    /// Decoding stopped because the model produced the end token.
    pub ended: bool,
}

/// Argmax decoding after `prompt`. `forced_prefix` is appended verbatim
/// before free decoding; decoding stops at the end token, after `max_new`
/// tokens, or when the context is full.
pub fn generate(
    model: &ToyTransformer,
    prompt: &[TokenId],
    max_new: usize,
    forced_prefix: Option<&[TokenId]>,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::input("empty prompt"));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(forced_prefix.unwrap_or(&[]));
    let limit = model.config().max_seq_len;
    if seq.len() > limit {
        return Err(Error::input("prompt does not fit the context"));
    }
    let mut tokens = Vec::new();
    while tokens.len() < max_new && seq.len() < limit {
        let lp = model.forward(&seq)?;
        let next = lp.argmax(seq.len() - 1);
        if next == EOS {
            return Ok(Generation {
                tokens,
                ended: true,
            });
        }
        seq.push(next);
        tokens.push(next);
    }
    Ok(Generation {
        tokens,
        ended: false,
    })
}

/// The free continuation of [`generate`].
pub fn generate_greedy(
    model: &ToyTransformer,
    prompt: &[TokenId],
    max_new: usize,
    forced_prefix: Option<&[TokenId]>,
) -> Result<Vec<TokenId>> {
    Ok(generate(model, prompt, max_new, forced_prefix)?.tokens)
}

/// Length of the longest common subsequence.
pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_recall(candidate: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::input("empty ROUGE reference"));
    }
    Ok(lcs_len(candidate, reference) as f64 / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiaVariant {
    Loss,
    Compression,
    MinK,
    MinKPp,
}

impl MiaVariant {
    pub const ALL: [MiaVariant; 4] = [
        MiaVariant::Loss,
        MiaVariant::Compression,
        MiaVariant::MinK,
        MiaVariant::MinKPp,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MiaVariant::Loss => "loss",
            MiaVariant::Compression => "compression",
            MiaVariant::MinK => "min_k",
            MiaVariant::MinKPp => "min_k_pp",
        }
    }
}

/// Raw DEFLATE size of the token ids written as 4-byte little-endian words.
pub fn deflate_len(tokens: &[TokenId]) -> usize {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(&bytes).expect("in-memory write");
    enc.finish().expect("in-memory write").len()
}

/// Mean of the lowest `⌈k·T⌉` values.
pub fn bottom_k_mean(values: &[f64], k: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = ((k * v.len() as f64).ceil() as usize).clamp(1, v.len().max(1));
    stats::mean(&v[..n.min(v.len())])
}

/// Per-position z-scores of the true token against its log-prob row.
pub fn position_z_scores(trace: &TeacherForcedTrace) -> Vec<f64> {
    (0..trace.len())
        .map(|t| {
            let row = trace.rows.row(t);
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            (trace.logprobs[t] - mu) / (var.sqrt() + MIN_K_PP_EPS)
        })
        .collect()
}

/// Membership score, oriented so that higher means more member-like.
pub fn mia_score(trace: &TeacherForcedTrace, variant: MiaVariant) -> f64 {
    match variant {
        MiaVariant::Loss => trace.mean_logprob(),
        MiaVariant::Compression => trace.mean_logprob() / deflate_len(&trace.answer) as f64,
        MiaVariant::MinK => bottom_k_mean(&trace.logprobs, MIN_K_FRACTION),
        MiaVariant::MinKPp => bottom_k_mean(&position_z_scores(trace), MIN_K_FRACTION),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaScore {
    pub variant: MiaVariant,
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub auc: f64,
}

pub fn auc_roc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    stats::auc_roc(members, nonmembers)
}

/// Forget examples are members, `holdout_nonmember` the non-members.
pub fn mia_scores(model: &ToyTransformer, splits: &CorpusSplits) -> Result<Vec<MiaScore>> {
    let traces = |s: Split| -> Result<Vec<TeacherForcedTrace>> {
        splits.split(s).par_iter().map(|e| entity_trace(model, e)).collect()
    };
    let members = traces(Split::Forget)?;
    let nonmembers = traces(Split::HoldoutNonmember)?;
    MiaVariant::ALL
        .into_iter()
        .map(|variant| {
            let m: Vec<f64> = members.iter().map(|t| mia_score(t, variant)).collect();
            let n: Vec<f64> = nonmembers.iter().map(|t| mia_score(t, variant)).collect();
            let auc = auc_roc(&m, &n)?;
            Ok(MiaScore {
                variant,
                member_scores: m,
                nonmember_scores: n,
                auc,
            })
        })
        .collect()
}

/// Retain-normalized closeness of a membership AUC to the retain model's.
pub fn normalized_mia(auc_model: f64, auc_retain: f64) -> Result<f64> {
    if auc_retain.is_nan() || auc_retain <= 0.0 {
        return Err(Error::input("retain AUC must be positive"));
    }
    Ok(1.0 - ((auc_model - auc_retain).abs() / auc_retain).min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMetric {
    Es,
    Em,
    Prob,
    ParaProb,
    TruthRatio,
    Rouge,
    ParaRouge,
    JailbreakRouge,
}

impl OutputMetric {
    pub const ALL: [OutputMetric; 8] = [
        OutputMetric::Es,
        OutputMetric::Em,
        OutputMetric::Prob,
        OutputMetric::ParaProb,
        OutputMetric::TruthRatio,
        OutputMetric::Rouge,
        OutputMetric::ParaRouge,
        OutputMetric::JailbreakRouge,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            OutputMetric::Es => "es",
            OutputMetric::Em => "em",
            OutputMetric::Prob => "prob",
            OutputMetric::ParaProb => "para_prob",
            OutputMetric::TruthRatio => "truth_ratio",
            OutputMetric::Rouge => "rouge",
            OutputMetric::ParaRouge => "para_rouge",
            OutputMetric::JailbreakRouge => "jailbreak_rouge",
        }
    }

    /// Whether the metric needs greedy generation.
    pub fn is_generative(&self) -> bool {
        matches!(
            self,
            OutputMetric::Rouge | OutputMetric::ParaRouge | OutputMetric::JailbreakRouge
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    pub values: Vec<(OutputMetric, f64)>,
    pub truth_ratio_degenerate: bool,
}

impl ExampleMetrics {
    pub fn get(&self, metric: OutputMetric) -> Option<f64> {
        self.values.iter().find(|(m, _)| *m == metric).map(|&(_, v)| v)
    }
}

/// Computes the requested metrics for one example.
pub fn example_metrics(
    model: &ToyTransformer,
    example: &FactExample,
    metrics: &[OutputMetric],
    max_new: usize,
) -> Result<ExampleMetrics> {
    let trace = entity_trace(model, example)?;
    let matches = trace.argmax_matches();
    let answer = example.answer();
    let mut plain: Option<Vec<TokenId>> = None;
    let mut degenerate = false;
    let mut values = Vec::with_capacity(metrics.len());
    for &m in metrics {
        let v = match m {
            OutputMetric::Es => extraction_strength_from(&matches),
            OutputMetric::Em => exact_memorization_from(&matches),
            OutputMetric::Prob => probability(&trace),
            OutputMetric::ParaProb => para_probability(model, example)?,
            OutputMetric::TruthRatio => {
                let tr = truth_ratio(model, example)?;
                degenerate = tr.degenerate;
                tr.value
            }
            OutputMetric::Rouge | OutputMetric::ParaRouge => {
                if plain.is_none() {
                    plain = Some(generate_greedy(model, &example.prompt_tokens, max_new, None)?);
                }
                let cand = plain.as_deref().unwrap();
                if m == OutputMetric::Rouge {
                    rouge_l_recall(cand, &answer)?
                } else if example.paraphrase_entities.is_empty() {
                    return Err(Error::input(format!("`{}` has no paraphrases", example.id)));
                } else {
                    let r = example
                        .paraphrase_entities
                        .iter()
                        .map(|p| rouge_l_recall(cand, p))
                        .collect::<Result<Vec<_>>>()?;
                    stats::mean(&r)
                }
            }
            OutputMetric::JailbreakRouge => {
                let cand =
                    generate_greedy(model, &example.prompt_tokens, max_new, Some(&JAILBREAK))?;
                rouge_l_recall(&cand, &answer)?
            }
        };
        values.push((m, v));
    }
    Ok(ExampleMetrics {
        id: example.id.clone(),
        values,
        truth_ratio_degenerate: degenerate,
    })
}

/// [`example_metrics`] over a set of examples, in input order.
pub fn evaluate_examples(
    model: &ToyTransformer,
    examples: &[FactExample],
    metrics: &[OutputMetric],
    max_new: usize,
) -> Result<Vec<ExampleMetrics>> {
    examples
        .par_iter()
        .map(|e| example_metrics(model, e, metrics, max_new))
        .collect()
}

/// Mean of one metric over evaluated examples.
pub fn metric_mean(rows: &[ExampleMetrics], metric: OutputMetric) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(|r| r.get(metric)).collect();
    (!v.is_empty()).then(|| stats::mean(&v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_of(logprobs: Vec<f64>) -> TeacherForcedTrace {
        let n = logprobs.len();
        TeacherForcedTrace {
            answer: vec![1; n],
            rows: LogProbTable {
                rows: n,
                vocab: 1,
                data: logprobs.clone(),
            },
            logprobs,
        }
    }

    #[test]
    fn es_cases() {
        assert_eq!(extraction_strength_from(&[true; 4]), 1.0);
        assert_eq!(extraction_strength_from(&[false; 4]), 0.0);
        assert_eq!(extraction_strength_from(&[true, false, true, true]), 0.5);
    }

    #[test]
    fn em_cases() {
        assert_eq!(exact_memorization_from(&[true; 4]), 1.0);
        assert_eq!(exact_memorization_from(&[false; 4]), 0.0);
        assert_eq!(exact_memorization_from(&[true, true, false, true]), 0.75);
    }

    #[test]
    fn prob_and_para_prob() {
        assert!((probability(&trace_of(vec![-1.0, -1.0])) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((geometric_mean(&[0.25, 0.04]) - 0.1).abs() < 1e-15);
        assert_eq!(geometric_mean(&[0.3]), 0.3);
    }

    #[test]
    fn truth_ratio_cases() {
        assert_eq!(truth_ratio_from(0.2, &[0.2]).unwrap().value, 0.5);
        assert!((truth_ratio_from(0.8, &[0.2]).unwrap().value - 0.8).abs() < 1e-15);
        assert_eq!(truth_ratio_from(0.0, &[0.3, 0.1]).unwrap().value, 0.0);
        let d = truth_ratio_from(0.0, &[0.0]).unwrap();
        assert!(d.degenerate && d.value == 0.5);
        assert!(truth_ratio_from(0.5, &[]).is_err());
    }

    #[test]
    fn min_k_bottom_forty_percent() {
        let t = trace_of(vec![-1.0, -2.0, -3.0, -4.0, -5.0]);
        assert_eq!(mia_score(&t, MiaVariant::MinK), -4.5);
        assert_eq!(bottom_k_mean(&t.logprobs, 1.0), mia_score(&t, MiaVariant::Loss));
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l_recall(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(rouge_l_recall(&[4, 5], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(rouge_l_recall(&[1, 9, 3], &[1, 2, 3, 4]).unwrap(), 0.5);
        assert!(rouge_l_recall(&[1], &[]).is_err());
    }

    #[test]
    fn normalized_mia_cases() {
        assert_eq!(normalized_mia(0.7, 0.7).unwrap(), 1.0);
        assert!((normalized_mia(0.6, 0.5).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(normalized_mia(1.0, 0.5).unwrap(), 0.0);
        assert!(normalized_mia(0.5, 0.0).is_err());
    }

    #[test]
    fn deflate_lengths_match_zlib_raw_streams() {
        // Lengths from zlib.compressobj(6, DEFLATED, -15).
        assert_eq!(deflate_len(&[7]), 6);
        assert_eq!(deflate_len(&[300, 12, 12, 12]), 9);
        assert_eq!(deflate_len(&[1, 2, 3, 4, 5, 6, 7, 8]), 23);
    }
}
