//! JSON run configuration. Anything left out falls back to the seeded
//! defaults of the library pipeline; command-line flags win over both.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use udsaudit::corpus::CorpusCounts;
use udsaudit::hash::{fnv1a, hex64};
use udsaudit::io::read_json;
use udsaudit::metaeval::{relearn_config, EvalOptions, MetricId};
use udsaudit::pipeline::PipelineConfig;
use udsaudit::tinylm::{ModelConfig, PatchLocation, TrainConfig};
use udsaudit::unlearners::PoolConfig;
use udsaudit::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub reports: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub paths: Paths,
    pub seed: Option<u64>,
    pub model: Option<ModelConfig>,
    pub counts: Option<CorpusCounts>,
    pub train: Option<TrainConfig>,
    pub pool: Option<PoolConfig>,
    pub tau: Option<f64>,
    pub location: Option<PatchLocation>,
    pub bits: Option<u32>,
    pub relearn: Option<TrainConfig>,
    pub metrics: Option<Vec<MetricId>>,
    pub eval: Option<EvalOptions>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => read_json(p),
            None => Ok(Self::default()),
        }
    }
}

/// Values that can also come from flags.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub tau: Option<f64>,
    pub location: Option<PatchLocation>,
    pub bits: Option<u32>,
    pub out: Option<PathBuf>,
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub pipeline: PipelineConfig,
    pub relearn: TrainConfig,
    pub metrics: Vec<MetricId>,
    #[serde(skip)]
    pub paths: Paths,
    #[serde(skip)]
    pub out: PathBuf,
}

impl Settings {
    pub fn resolve(cfg: RunConfig, o: &Overrides) -> Result<Self> {
        let seed = o.seed.or(cfg.seed).unwrap_or(0);
        let mut p = PipelineConfig::new(seed);
        if let Some(m) = cfg.model {
            p.model = m;
            p.pool = PoolConfig::default_for(&p.model, seed);
        }
        if let Some(c) = cfg.counts {
            p.counts = c;
        }
        if let Some(t) = cfg.train {
            p.train = t;
        }
        if let Some(pool) = cfg.pool {
            p.pool = pool;
        }
        if let Some(e) = cfg.eval {
            p.eval = e;
        }
        p.tau = o.tau.or(cfg.tau).unwrap_or(p.tau);
        p.location = o.location.or(cfg.location).unwrap_or(p.location);
        p.eval.location = p.location;
        p.bits = o.bits.or(cfg.bits).unwrap_or(p.bits);
        let out = o
            .out
            .clone()
            .or_else(|| cfg.paths.reports.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        let s = Self {
            relearn: cfg.relearn.unwrap_or_else(|| relearn_config(seed)),
            metrics: cfg.metrics.unwrap_or_else(MetricId::all),
            paths: cfg.paths,
            out,
            pipeline: p,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        p.model.validate()?;
        p.train.validate()?;
        p.pool.pool_train.validate()?;
        self.relearn.validate()?;
        for u in &p.pool.grid {
            u.validate()?;
        }
        if p.tau.is_nan() {
            return Err(Error::Input("tau is NaN".into()));
        }
        if !(2..=16).contains(&p.bits) {
            return Err(Error::Input(format!("bits {} outside [2, 16]", p.bits)));
        }
        if self.metrics.is_empty() {
            return Err(Error::Input("metric selection is empty".into()));
        }
        Ok(())
    }

    /// Digest of the resolved settings, stamped into every report.
    pub fn digest(&self) -> Result<String> {
        Ok(hex64(fnv1a(&serde_json::to_vec(self)?)))
    }

    pub fn corpus_path(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.corpus.clone())
            .unwrap_or_else(|| self.out.join("corpus.jsonl"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoints
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoints"))
    }

    pub fn checkpoint(&self, flag: Option<&Path>, name: &str) -> PathBuf {
        flag.map(Path::to_path_buf)
            .unwrap_or_else(|| self.checkpoint_dir().join(format!("{name}.ckpt")))
    }

    pub fn cache_path(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.cache.clone())
            .unwrap_or_else(|| self.out.join("stage1_cache.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"tau": 0.1, "taux": 1}"#).unwrap_err();
        assert!(err.to_string().contains("taux"));
    }

    #[test]
    fn flags_win_over_file() {
        let cfg: RunConfig = serde_json::from_str(r#"{"tau": 0.1, "bits": 8, "seed": 3}"#).unwrap();
        let o = Overrides {
            tau: Some(0.2),
            ..Default::default()
        };
        let s = Settings::resolve(cfg, &o).unwrap();
        assert_eq!(s.pipeline.tau, 0.2);
        assert_eq!(s.pipeline.bits, 8);
        assert_eq!(s.pipeline.seed, 3);
        assert_eq!(s.pipeline.model.seed, 3);
    }

    #[test]
    fn invalid_bits_fail_validation() {
        let o = Overrides {
            bits: Some(1),
            ..Default::default()
        };
        assert!(Settings::resolve(RunConfig::default(), &o).is_err());
    }
}
