//! One function per pipeline stage. Each reads its inputs from disk, checks
//! their digests, and writes only its own outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use udsaudit::corpus::{generate_synthetic_corpus, load_corpus, save_corpus, CorpusSplits, IdkVariant, Split};
use udsaudit::hash::hex64;
use udsaudit::io::write_atomic;
use udsaudit::metaeval::{
    aggregate_and_rank, correlations_with_uds, perturbation_csv, ranking::ranking_csv,
    ranking_components, run_meta_eval, utility, EvalContext, MetaEvalReport, Perturbations,
    Ranking, UTILITY_FILTER,
};
use udsaudit::outmetrics::{evaluate_examples, metrics_csv, mia_scores, ModelSummary, OutputMetric};
use udsaudit::tinylm::{load_checkpoint, save_checkpoint, ToyTransformer};
use udsaudit::udscore::{
    ke_tau_sweep, ler_csv, original_target_scores, stage1_baseline, stage2_eval,
    StageOneCache, TauSweepRow,
};
use udsaudit::unlearners::{
    generate_pool, train_references, FixtureEntry, Method, Pool, PoolModel, PoolTag, References,
};
use udsaudit::whitebox::{cka_erasure, erasure_csv, fisher_masked_erasure, logit_lens_erasure, LayerErasureTable};
use udsaudit::{Error, Result};

use crate::config::Settings;
use crate::stamp::{check_inputs, file_hash, read_stamped, write_stamped, Inputs};

/// Thresholds reported by `sweep-tau`.
pub const SWEEP_TAUS: [f64; 8] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Target {
    Full,
    Original,
}

fn inputs<const N: usize>(pairs: [(&str, String); N]) -> Inputs {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn model_hash(m: &ToyTransformer) -> String {
    hex64(m.param_hash())
}

fn corpus(s: &Settings, path: &Path) -> Result<(CorpusSplits, String)> {
    let splits = load_corpus(path)?;
    splits.check_model(&s.pipeline.model)?;
    Ok((splits, file_hash(path)?))
}

/// A checkpoint file, or every `*.ckpt` directly inside a directory, sorted.
pub fn checkpoint_list(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::MissingArtifact(path.join("*.ckpt")));
    }
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn gen(s: &Settings, corpus_out: &Path) -> Result<()> {
    let p = &s.pipeline;
    let splits = generate_synthetic_corpus(p.seed, &p.counts, p.model.vocab_size)?;
    splits.check_model(&p.model)?;
    save_corpus(&splits, corpus_out)?;
    log::info!("wrote {} examples to {}", splits.iter().count(), corpus_out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    base: String,
    full: String,
    retain: String,
}

pub fn train(s: &Settings, corpus_path: &Path) -> Result<()> {
    let (splits, ch) = corpus(s, corpus_path)?;
    let refs = train_references(&splits, &s.pipeline.model, &s.pipeline.train)?;
    let dir = s.checkpoint_dir();
    for (name, m) in [("base", &refs.base), ("full", &refs.full), ("retain", &refs.retain)] {
        save_checkpoint(m, &dir.join(format!("{name}.ckpt")))?;
    }
    let summary = TrainSummary {
        base: model_hash(&refs.base),
        full: model_hash(&refs.full),
        retain: model_hash(&refs.retain),
    };
    write_stamped(&s.out.join("train.json"), &s.digest()?, &inputs([("corpus", ch)]), summary)
}

fn manifest_path(s: &Settings) -> PathBuf {
    s.out.join("manifest.json")
}

/// Stored relative to the output directory when possible.
fn manifest_ref(s: &Settings, ckpt: &Path) -> String {
    ckpt.strip_prefix(&s.out).unwrap_or(ckpt).to_string_lossy().into_owned()
}

pub fn unlearn(s: &Settings, corpus_path: &Path, full_path: &Path, retain_path: &Path) -> Result<()> {
    let (splits, ch) = corpus(s, corpus_path)?;
    let refs = References {
        base: load_checkpoint(&s.checkpoint(None, "base"))?,
        full: load_checkpoint(full_path)?,
        retain: load_checkpoint(retain_path)?,
    };
    let idk = IdkVariant::for_forget(&splits.forget, s.pipeline.seed);
    let pool = generate_pool(&refs, &splits, &idk, &s.pipeline.pool)?;
    let max_new = s.pipeline.eval.max_new;
    let full_u = utility(&refs.full, &refs.full, &splits, max_new)?;
    let pool_dir = s.checkpoint_dir().join("pool");
    let mut entries = Vec::new();
    let mut usable: BTreeMap<Method, bool> = BTreeMap::new();
    for m in &pool.models {
        let path = pool_dir.join(format!("{}.ckpt", m.id));
        save_checkpoint(&m.model, &path)?;
        let u = match (&m.config, m.tag) {
            (Some(c), PoolTag::Unlearned) => {
                let u = utility(&m.model, &refs.full, &splits, max_new)?;
                let ok = u.relative_to(&full_u) >= UTILITY_FILTER;
                *usable.entry(c.method).or_default() |= ok;
                Some(u.utility)
            }
            _ => None,
        };
        entries.push(FixtureEntry::new(m, Some(manifest_ref(s, &path)), u));
    }
    for (method, ok) in usable {
        if !ok {
            log::warn!(
                "no {} config keeps utility >= {UTILITY_FILTER} x full; widen the grid",
                method.as_str()
            );
        }
    }
    let ins = inputs([
        ("corpus", ch),
        ("base", model_hash(&refs.base)),
        ("full", model_hash(&refs.full)),
    ]);
    write_stamped(&manifest_path(s), &s.digest()?, &ins, entries)
}

fn ref_inputs(corpus_hash: &str, full: &ToyTransformer, retain: &ToyTransformer) -> Inputs {
    inputs([
        ("corpus", corpus_hash.to_string()),
        ("full", model_hash(full)),
        ("retain", model_hash(retain)),
    ])
}

/// Returns true when an existing cache was reused.
pub fn baseline(
    s: &Settings,
    corpus_path: &Path,
    full_path: &Path,
    retain_path: &Path,
    cache_path: &Path,
) -> Result<bool> {
    let (splits, ch) = corpus(s, corpus_path)?;
    let full = load_checkpoint(full_path)?;
    let retain = load_checkpoint(retain_path)?;
    let ins = ref_inputs(&ch, &full, &retain);
    if cache_path.exists() {
        let old = read_stamped::<StageOneCache>(cache_path)?;
        if old.inputs == ins
            && old.report.tau == s.pipeline.tau
            && old.report.location == s.pipeline.location
        {
            log::info!("cache hit: {}", cache_path.display());
            return Ok(true);
        }
        log::info!("cache at {} does not match the inputs; recomputing", cache_path.display());
    }
    let cache = stage1_baseline(&full, &retain, &splits.forget, s.pipeline.tau, s.pipeline.location)?;
    log::info!(
        "stage 1: {} examples, {} skipped at tau = {}",
        cache.records.len(),
        cache.n_skipped(),
        cache.tau
    );
    write_stamped(cache_path, &s.digest()?, &ins, cache)?;
    Ok(false)
}

fn load_cache(cache_path: &Path, corpus_hash: &str, full: &ToyTransformer) -> Result<(StageOneCache, Inputs)> {
    let c = read_stamped::<StageOneCache>(cache_path)?;
    let now = inputs([("corpus", corpus_hash.to_string()), ("full", model_hash(full))]);
    check_inputs(cache_path, &c.inputs, &now)?;
    let mut ins = c.inputs.clone();
    ins.insert("cache".into(), file_hash(cache_path)?);
    Ok((c.report, ins))
}

#[derive(Serialize)]
struct OriginalTargetReport {
    location: udsaudit::tinylm::PatchLocation,
    mean_drop: f64,
    examples: Vec<(String, f64)>,
}

pub fn uds(
    s: &Settings,
    corpus_path: &Path,
    full_path: &Path,
    cache_path: &Path,
    unlearned: &Path,
    target: Target,
) -> Result<()> {
    let (splits, ch) = corpus(s, corpus_path)?;
    let full = load_checkpoint(full_path)?;
    let digest = s.digest()?;
    let dir = s.out.join("uds");
    let cached = match target {
        Target::Full => Some(load_cache(cache_path, &ch, &full)?),
        Target::Original => None,
    };
    for path in checkpoint_list(unlearned)? {
        let model = load_checkpoint(&path)?;
        let name = stem(&path);
        match &cached {
            Some((cache, ins)) => {
                let rep = stage2_eval(&full, &model, cache, &splits.forget)?;
                let mut ins = ins.clone();
                ins.insert("unlearned".into(), model_hash(&model));
                log::info!("{name}: UDS {:.4} ({} scored)", rep.model_uds, rep.n_scored);
                write_atomic(&dir.join(format!("{name}.ler.csv")), ler_csv(&rep)?.as_bytes())?;
                write_stamped(&dir.join(format!("{name}.json")), &digest, &ins, rep)?;
            }
            None => {
                let examples = original_target_scores(&full, &model, &splits.forget, s.pipeline.location)?;
                let mean_drop = udsaudit::stats::mean(&examples.iter().map(|e| e.1).collect::<Vec<_>>());
                log::info!("{name}: mean raw drop {mean_drop:.4}");
                let ins = inputs([
                    ("corpus", ch.clone()),
                    ("full", model_hash(&full)),
                    ("unlearned", model_hash(&model)),
                ]);
                let rep = OriginalTargetReport {
                    location: s.pipeline.location,
                    mean_drop,
                    examples,
                };
                write_stamped(&dir.join(format!("{name}.original.json")), &digest, &ins, rep)?;
            }
        }
    }
    Ok(())
}

pub fn metrics(s: &Settings, corpus_path: &Path, unlearned: &Path) -> Result<()> {
    let (splits, ch) = corpus(s, corpus_path)?;
    let digest = s.digest()?;
    let dir = s.out.join("metrics");
    for path in checkpoint_list(unlearned)? {
        let model = load_checkpoint(&path)?;
        let name = stem(&path);
        let rows = evaluate_examples(&model, splits.split(Split::Forget), &OutputMetric::ALL, s.pipeline.eval.max_new)?;
        let mia = mia_scores(&model, &splits)?;
        let hash = model.param_hash();
        write_atomic(&dir.join(format!("{name}.csv")), metrics_csv(hash, &rows)?.as_bytes())?;
        let ins = inputs([("corpus", ch.clone()), ("unlearned", hex64(hash))]);
        write_stamped(&dir.join(format!("{name}.json")), &digest, &ins, ModelSummary::new(hash, &rows, &mia))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct WhiteboxReport {
    cka: LayerErasureTable,
    logit_lens: LayerErasureTable,
    fisher_masked: LayerErasureTable,
}

pub fn whitebox(
    s: &Settings,
    corpus_path: &Path,
    full_path: &Path,
    retain_path: &Path,
    unlearned: &Path,
) -> Result<()> {
    let (splits, ch) = corpus(s, corpus_path)?;
    let full = load_checkpoint(full_path)?;
    let retain = load_checkpoint(retain_path)?;
    let (digest, e) = (s.digest()?, &s.pipeline.eval);
    let dir = s.out.join("whitebox");
    for path in checkpoint_list(unlearned)? {
        let model = load_checkpoint(&path)?;
        let name = stem(&path);
        let rep = WhiteboxReport {
            cka: cka_erasure(&full, &retain, &model, &splits.forget, s.pipeline.location)?,
            logit_lens: logit_lens_erasure(&full, &retain, &model, &splits.forget, e.lens_tau)?,
            fisher_masked: fisher_masked_erasure(&full, &retain, &model, &splits.forget, e.fisher_fraction)?,
        };
        let csv = erasure_csv(&[&rep.cka, &rep.logit_lens, &rep.fisher_masked])?;
        write_atomic(&dir.join(format!("{name}.csv")), csv.as_bytes())?;
        let mut ins = ref_inputs(&ch, &full, &retain);
        ins.insert("unlearned".into(), model_hash(&model));
        write_stamped(&dir.join(format!("{name}.json")), &digest, &ins, rep)?;
    }
    Ok(())
}

fn load_pool(s: &Settings, corpus_hash: &str, full: &ToyTransformer) -> Result<(Pool, Vec<FixtureEntry>, String)> {
    let path = manifest_path(s);
    let manifest = read_stamped::<Vec<FixtureEntry>>(&path)?;
    let now = inputs([("corpus", corpus_hash.to_string()), ("full", model_hash(full))]);
    check_inputs(&path, &manifest.inputs, &now)?;
    let mut models = Vec::with_capacity(manifest.report.len());
    for e in &manifest.report {
        let rel = e
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Input(format!("manifest entry `{}` has no checkpoint", e.id)))?;
        let ckpt = if Path::new(rel).is_absolute() { PathBuf::from(rel) } else { s.out.join(rel) };
        let model = load_checkpoint(&ckpt)?;
        if model_hash(&model) != e.param_hash {
            return Err(Error::StaleCache(format!(
                "{} has param hash {}, manifest expects {}",
                ckpt.display(),
                model_hash(&model),
                e.param_hash
            )));
        }
        models.push(PoolModel {
            tag: e.pool,
            id: e.id.clone(),
            config: e.cfg.clone(),
            model,
        });
    }
    Ok((Pool { models }, manifest.report, file_hash(&path)?))
}

pub fn metaeval(
    s: &Settings,
    corpus_path: &Path,
    full_path: &Path,
    retain_path: &Path,
    cache_path: &Path,
) -> Result<()> {
    let (splits, ch) = corpus(s, corpus_path)?;
    let full = load_checkpoint(full_path)?;
    let retain = load_checkpoint(retain_path)?;
    let (cache, mut ins) = load_cache(cache_path, &ch, &full)?;
    check_inputs(cache_path, &ins, &ref_inputs(&ch, &full, &retain))?;
    let (pool, _, manifest_hash) = load_pool(s, &ch, &full)?;
    ins.insert("manifest".into(), manifest_hash);
    let ctx = EvalContext::new(&splits, &full, &retain, &cache, s.pipeline.eval.clone())?;
    let perturb = Perturbations {
        bits: s.pipeline.bits,
        relearn: s.relearn.clone(),
    };
    let report = run_meta_eval(&ctx, &s.metrics, &pool, &perturb)?;
    for m in &report.metrics {
        match m.overall {
            Some(o) => log::info!(
                "{}: faithfulness {:.3}, robustness {:.3}, overall {o:.3}",
                m.metric,
                m.faithfulness_auc,
                m.robustness.unwrap_or(f64::NAN)
            ),
            None => log::info!("{}: faithfulness {:.3}, {}", m.metric, m.faithfulness_auc, m.diagnostic.as_deref().unwrap_or("")),
        }
    }
    write_atomic(&s.out.join("perturbation.csv"), perturbation_csv(&report)?.as_bytes())?;
    write_stamped(&s.out.join("metaeval.json"), &s.digest()?, &ins, report)
}

#[derive(Serialize)]
struct RankReport {
    ranking: Ranking,
    correlations_with_uds: BTreeMap<String, Option<f64>>,
}

pub fn rank(s: &Settings) -> Result<()> {
    let meta_path = s.out.join("metaeval.json");
    let meta = read_stamped::<MetaEvalReport>(&meta_path)?;
    let mpath = manifest_path(s);
    let manifest = read_stamped::<Vec<FixtureEntry>>(&mpath)?;
    check_inputs(&meta_path, &meta.inputs, &inputs([("manifest", file_hash(&mpath)?)]))?;
    let methods: BTreeMap<String, String> = manifest
        .report
        .iter()
        .filter_map(|e| e.method.map(|m| (e.id.clone(), m.as_str().to_string())))
        .collect();
    let ranking = aggregate_and_rank(&ranking_components(&meta.report, &methods))?;
    for r in &ranking.rows {
        log::info!(
            "{}: rank {} -> {} ({} / {})",
            r.method,
            r.rank_without,
            r.rank_with,
            r.config_without,
            r.config_with
        );
    }
    write_atomic(&s.out.join("ranking.csv"), ranking_csv(&ranking)?.as_bytes())?;
    let mut ins = meta.inputs.clone();
    ins.insert("metaeval".into(), file_hash(&meta_path)?);
    let rep = RankReport {
        correlations_with_uds: correlations_with_uds(&meta.report),
        ranking,
    };
    write_stamped(&s.out.join("ranking.json"), &s.digest()?, &ins, rep)
}

pub fn sweep_tau(s: &Settings, cache_path: &Path) -> Result<()> {
    let c = read_stamped::<StageOneCache>(cache_path)?;
    let rows: Vec<TauSweepRow> = ke_tau_sweep(&c.report, &SWEEP_TAUS)?;
    write_atomic(
        &s.out.join("tau_sweep.csv"),
        udsaudit::report::csv_string(&rows)?.as_bytes(),
    )?;
    let mut ins = c.inputs.clone();
    ins.insert("cache".into(), file_hash(cache_path)?);
    write_stamped(&s.out.join("tau_sweep.json"), &s.digest()?, &ins, rows)
}
