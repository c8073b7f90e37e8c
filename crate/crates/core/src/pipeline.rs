//! End-to-end run: corpus, reference models, unlearned pool, patching audit,
//! output metrics, meta-evaluation and ranking.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic_corpus, save_corpus, CorpusCounts, CorpusSplits, IdkVariant, Split};
use crate::error::Result;
use crate::io::{write_atomic, write_json};
use crate::metaeval::{
    aggregate_and_rank, perturbation_csv, ranking::ranking_csv, ranking_components,
    run_meta_eval, EvalContext, EvalOptions, MetaEvalReport, MetricId, Perturbations, Ranking,
};
use crate::outmetrics::{evaluate_examples, metrics_csv, mia_scores, ModelSummary, OutputMetric};
use crate::tinylm::{save_checkpoint, ModelConfig, PatchLocation, TrainConfig};
use crate::udscore::{ler_csv, stage1_baseline, stage2_eval, StageOneCache, UdsReport, DEFAULT_TAU};
use crate::unlearners::{
    generate_pool, reference_train_config, train_references, FixtureEntry, Pool, PoolConfig,
    PoolTag, References,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub counts: CorpusCounts,
    pub train: TrainConfig,
    pub pool: PoolConfig,
    pub tau: f64,
    pub location: PatchLocation,
    pub bits: u32,
    pub eval: EvalOptions,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        let model = ModelConfig {
            seed,
            ..ModelConfig::default()
        };
        Self {
            pool: PoolConfig::default_for(&model, seed),
            model,
            counts: CorpusCounts::default(),
            train: reference_train_config(seed),
            tau: DEFAULT_TAU,
            location: PatchLocation::LayerOutput,
            bits: 4,
            eval: EvalOptions::default(),
            seed,
        }
    }
}

pub struct PipelineOutput {
    pub splits: CorpusSplits,
    pub refs: References,
    pub cache: StageOneCache,
    pub pool: Pool,
    pub uds: Vec<UdsReport>,
    pub meta: MetaEvalReport,
    pub ranking: Ranking,
    pub manifest: Vec<FixtureEntry>,
}

fn stage(name: &str, t: Instant) {
    log::info!("{name} done in {:.1}s", t.elapsed().as_secs_f64());
}

/// Runs every stage; with `out` set, writes all artifacts below it.
pub fn run_pipeline(cfg: &PipelineConfig, out: Option<&Path>) -> Result<PipelineOutput> {
    let t = Instant::now();
    let splits = generate_synthetic_corpus(cfg.seed, &cfg.counts, cfg.model.vocab_size)?;
    splits.check_model(&cfg.model)?;
    let idk = IdkVariant::for_forget(&splits.forget, cfg.seed);
    stage("gen", t);

    let t = Instant::now();
    let refs = train_references(&splits, &cfg.model, &cfg.train)?;
    stage("train", t);

    let t = Instant::now();
    let pool = generate_pool(&refs, &splits, &idk, &cfg.pool)?;
    stage("unlearn", t);

    let t = Instant::now();
    let cache = stage1_baseline(&refs.full, &refs.retain, &splits.forget, cfg.tau, cfg.location)?;
    stage("baseline", t);

    let t = Instant::now();
    let uds = pool
        .tagged(PoolTag::Unlearned)
        .map(|m| stage2_eval(&refs.full, &m.model, &cache, &splits.forget))
        .collect::<Result<Vec<_>>>()?;
    stage("uds", t);

    let t = Instant::now();
    let ctx = EvalContext::new(&splits, &refs.full, &refs.retain, &cache, cfg.eval.clone())?;
    let meta = run_meta_eval(&ctx, &MetricId::all(), &pool, &Perturbations {
        bits: cfg.bits,
        relearn: crate::metaeval::relearn_config(cfg.seed),
    })?;
    stage("metaeval", t);

    let methods: BTreeMap<String, String> = pool
        .tagged(PoolTag::Unlearned)
        .filter_map(|m| m.config.as_ref().map(|c| (m.id.clone(), c.method.as_str().to_string())))
        .collect();
    let ranking = aggregate_and_rank(&ranking_components(&meta, &methods))?;

    let utilities: BTreeMap<&str, f64> = meta
        .unlearned()
        .filter_map(|r| r.utility.as_ref().map(|u| (r.id.as_str(), u.utility)))
        .collect();
    let manifest: Vec<FixtureEntry> = pool
        .models
        .iter()
        .map(|m| {
            FixtureEntry::new(
                m,
                out.map(|_| format!("checkpoints/pool/{}.ckpt", m.id)),
                utilities.get(m.id.as_str()).copied(),
            )
        })
        .collect();

    let output = PipelineOutput {
        splits,
        refs,
        cache,
        pool,
        uds,
        meta,
        ranking,
        manifest,
    };
    if let Some(dir) = out {
        let t = Instant::now();
        write_artifacts(&output, cfg, dir)?;
        stage("write", t);
    }
    Ok(output)
}

/// Per-example output metrics of a model over the forget split.
pub fn write_metric_dump(
    dir: &Path,
    name: &str,
    model: &crate::tinylm::ToyTransformer,
    splits: &CorpusSplits,
    max_new: usize,
) -> Result<ModelSummary> {
    let rows = evaluate_examples(model, splits.split(Split::Forget), &OutputMetric::ALL, max_new)?;
    let mia = mia_scores(model, splits)?;
    let hash = model.param_hash();
    write_atomic(&dir.join(format!("{name}.csv")), metrics_csv(hash, &rows)?.as_bytes())?;
    let summary = ModelSummary::new(hash, &rows, &mia);
    write_json(&dir.join(format!("{name}.json")), &summary)?;
    Ok(summary)
}

fn write_artifacts(o: &PipelineOutput, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    write_json(&dir.join("config.json"), cfg)?;
    save_corpus(&o.splits, &dir.join("corpus.jsonl"))?;
    let ck = dir.join("checkpoints");
    save_checkpoint(&o.refs.base, &ck.join("base.ckpt"))?;
    save_checkpoint(&o.refs.full, &ck.join("full.ckpt"))?;
    save_checkpoint(&o.refs.retain, &ck.join("retain.ckpt"))?;
    for m in &o.pool.models {
        save_checkpoint(&m.model, &ck.join("pool").join(format!("{}.ckpt", m.id)))?;
    }
    write_json(&dir.join("manifest.json"), &o.manifest)?;
    o.cache.save(&dir.join("stage1_cache.json"))?;
    for (m, rep) in o.pool.tagged(PoolTag::Unlearned).zip(&o.uds) {
        rep.save(&dir.join("uds").join(format!("{}.json", m.id)))?;
        write_atomic(
            &dir.join("uds").join(format!("{}.ler.csv", m.id)),
            ler_csv(rep)?.as_bytes(),
        )?;
    }
    let md = dir.join("metrics");
    for m in o.pool.tagged(PoolTag::Unlearned) {
        write_metric_dump(&md, &m.id, &m.model, &o.splits, cfg.eval.max_new)?;
    }
    write_json(&dir.join("metaeval.json"), &o.meta)?;
    write_atomic(&dir.join("perturbation.csv"), perturbation_csv(&o.meta)?.as_bytes())?;
    write_atomic(&dir.join("ranking.csv"), ranking_csv(&o.ranking)?.as_bytes())?;
    write_json(&dir.join("ranking.json"), &o.ranking)?;
    Ok(())
}
