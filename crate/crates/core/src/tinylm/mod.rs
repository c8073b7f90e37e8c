//! Minimal decoder-only transformer used as the measurement substrate.
//!
//! Pre-norm blocks with RMS normalisation, causal multi-head attention, a
//! GELU MLP, learned positional embeddings and an untied unembedding with
//! bias. Every block exposes three hook sites that can be captured or
//! overwritten during a forward pass:
//!
//! ```text
//! a_l = Attn(RMSNorm(h_{l-1}))          -> PatchLocation::AttnOut
//! m_l = h_{l-1} + a_l                   -> PatchLocation::PostAttnResidual
//! h_l = m_l + MLP(RMSNorm(m_l))         -> PatchLocation::LayerOutput
//! ```
//!
//! The numeric core is generic over [`Real`] so the same code path can be
//! evaluated in `f64` for gradient checks; production models are `f32`.

mod backward;
mod checkpoint;
mod fisher;
mod forward;
pub mod ops;
mod quant;
pub(crate) mod train;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, Range, SubAssign};
use std::str::FromStr;
use std::sync::Arc;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use fisher::grad_fisher;
pub use forward::{CaptureRequest, CaptureResult, ForwardTrace, LogProbTable, PatchSpec};
pub use quant::{quantize_tensor, quantize_weights};
pub use train::{
    masked_nll_grad, train, AdamW, LossTrace, StepMask, TrainConfig, TrainSequence,
};

pub type TokenId = u32;

/// Scalar type of the numeric core.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Send + Sync + Debug + Default + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::input(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::input(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// True when two configs describe the same architecture (seed ignored).
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        ModelConfig { seed: 0, ..self.clone() } == ModelConfig { seed: 0, ..other.clone() }
    }
}

/// Intra-layer site at which hidden states are read or overwritten.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchLocation {
    /// Attention block output `a_l`.
    AttnOut,
    /// Residual after attention `m_l`.
    PostAttnResidual,
    /// Block output `h_l`.
    LayerOutput,
}

impl PatchLocation {
    pub const ALL: [PatchLocation; 3] = [
        PatchLocation::AttnOut,
        PatchLocation::PostAttnResidual,
        PatchLocation::LayerOutput,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PatchLocation::AttnOut => "attn_out",
            PatchLocation::PostAttnResidual => "post_attn_residual",
            PatchLocation::LayerOutput => "layer_output",
        }
    }
}

impl std::fmt::Display for PatchLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatchLocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn_out" => Ok(PatchLocation::AttnOut),
            "post_attn_residual" => Ok(PatchLocation::PostAttnResidual),
            "layer_output" => Ok(PatchLocation::LayerOutput),
            other => Err(Error::input(format!("unknown patch location `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements into the flat parameter vector.
    pub offset: usize,
}

impl TensorSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Element offsets of the tensors owned by one block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockOffsets {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: usize,
    pub w_in: usize,
    pub w_out: usize,
    pub end: usize,
}

/// Flat parameter layout shared by every model of one config.
#[derive(Clone, Debug)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub total: usize,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) blocks: Vec<BlockOffsets>,
    pub(crate) final_norm: usize,
    pub(crate) unembed: usize,
    pub(crate) unembed_bias: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f, s) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_seq_len);
        let mut tensors = Vec::new();
        let mut off = 0usize;
        let mut push = |name: String, shape: Vec<usize>| {
            let start = off;
            off += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                shape,
                offset: start,
            });
            start
        };
        let tok_emb = push("tok_emb".into(), vec![v, d]);
        let pos_emb = push("pos_emb".into(), vec![s, d]);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let attn_norm = push(format!("blocks.{l}.attn_norm"), vec![d]);
            let wq = push(format!("blocks.{l}.wq"), vec![d, d]);
            let wk = push(format!("blocks.{l}.wk"), vec![d, d]);
            let wv = push(format!("blocks.{l}.wv"), vec![d, d]);
            let wo = push(format!("blocks.{l}.wo"), vec![d, d]);
            let mlp_norm = push(format!("blocks.{l}.mlp_norm"), vec![d]);
            let w_in = push(format!("blocks.{l}.w_in"), vec![d, f]);
            let w_out = push(format!("blocks.{l}.w_out"), vec![f, d]);
            blocks.push(BlockOffsets {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                w_in,
                w_out,
                end: w_out + f * d,
            });
        }
        let final_norm = push("final_norm".into(), vec![d]);
        let unembed = push("unembed".into(), vec![d, v]);
        let unembed_bias = push("unembed_bias".into(), vec![v]);
        Layout {
            tensors,
            total: off,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            unembed,
            unembed_bias,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Element range of every parameter owned by block `layer` (norms included).
    pub fn block_range(&self, layer: usize) -> Range<usize> {
        self.blocks[layer].attn_norm..self.blocks[layer].end
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }
}

/// Decoder-only language model with a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Transformer<F: Real = f32> {
    config: ModelConfig,
    layout: Arc<Layout>,
    params: Vec<F>,
}

/// The production model type.
pub type ToyTransformer = Transformer<f32>;

impl<F: Real> PartialEq for Transformer<F> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<F: Real> Transformer<F> {
    /// Random initialisation drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        let mut params = vec![F::zero(); layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let proj = Normal::new(0.0, proj_std).unwrap();
        for spec in &layout.tensors {
            let slot = &mut params[spec.range()];
            let name = spec.name.as_str();
            if name.ends_with("norm") {
                slot.iter_mut().for_each(|p| *p = F::one());
            } else if name == "unembed_bias" {
                // zeros
            } else if name.ends_with(".wo") || name.ends_with(".w_out") {
                slot.iter_mut()
                    .for_each(|p| *p = F::from(proj.sample(&mut rng)).unwrap());
            } else {
                slot.iter_mut()
                    .for_each(|p| *p = F::from(normal.sample(&mut rng)).unwrap());
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// All-zero parameters (norm gains included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        let params = vec![F::zero(); layout.total];
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(Layout::new(&config));
        if params.len() != layout.total {
            return Err(Error::input(format!(
                "parameter count {} does not match layout {}",
                params.len(),
                layout.total
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerics {
                step: 0,
                what: "non-finite parameter".into(),
            });
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout.tensor(name).map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let range = self.layout.tensor(name)?.range();
        Some(&mut self.params[range])
    }

    /// Same parameters in another scalar type.
    pub fn cast<G: Real>(&self) -> Transformer<G> {
        Transformer {
            config: self.config.clone(),
            layout: Arc::clone(&self.layout),
            params: self
                .params
                .iter()
                .map(|p| G::from(*p).unwrap())
                .collect(),
        }
    }

    /// FNV-1a digest of the little-endian f32 serialisation of the parameters.
    pub fn param_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for p in &self.params {
            h.write(&p.to_f32().unwrap().to_le_bytes());
        }
        h.finish()
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq_len {
            return Err(Error::input(format!(
                "sequence length {} outside [1, {}]",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::input(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}

/// Anything that can hand out hidden states for a token sequence.
///
/// Implemented by [`Transformer`]; test fixtures wrap a model to transform
/// its states (e.g. rotate a band of layers) without touching the weights.
pub trait StateSource: Sync {
    fn model_config(&self) -> &ModelConfig;

    /// Digest identifying the source, recorded in reports.
    fn source_hash(&self) -> u64;

    fn capture(&self, tokens: &[TokenId], request: &CaptureRequest) -> Result<CaptureResult>;
}

impl StateSource for ToyTransformer {
    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn source_hash(&self) -> u64 {
        self.param_hash()
    }

    fn capture(&self, tokens: &[TokenId], request: &CaptureRequest) -> Result<CaptureResult> {
        self.forward_with_capture(tokens, request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.n_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Input(_))));
        cfg.n_heads = 4;
        cfg.d_ff = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let cfg = ModelConfig::default();
        let layout = Layout::new(&cfg);
        let mut next = 0;
        for t in &layout.tensors {
            assert_eq!(t.offset, next);
            next += t.numel();
        }
        assert_eq!(next, layout.total);
        let emb = layout.tensor("tok_emb").unwrap();
        let un = layout.tensor("unembed").unwrap();
        assert_eq!(emb.shape, vec![un.shape[1], un.shape[0]]);
        assert_eq!(layout.block_range(1).start, layout.block_range(0).end);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig {
            seed: 7,
            ..ModelConfig::default()
        };
        let a = ToyTransformer::new(cfg.clone()).unwrap();
        let b = ToyTransformer::new(cfg.clone()).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        let c = ToyTransformer::new(ModelConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn location_round_trips_through_str() {
        for loc in PatchLocation::ALL {
            assert_eq!(loc.as_str().parse::<PatchLocation>().unwrap(), loc);
        }
        assert!("resid".parse::<PatchLocation>().is_err());
    }
}
