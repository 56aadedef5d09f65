//! Decoder-only transformer with parallel attention/MLP blocks, grouped-query
//! attention, rotary position embeddings and optionally tied embeddings.

mod block;
pub mod checkpoint;
pub mod config;

pub use block::{
    attention_gqa, build_block, build_lm, layer_norm, lm_forward, lm_loss, parallel_block,
    rope_apply, sequential_block, AttentionWeights, BlockKind, BlockWeights, LayerNormWeights,
    LmGraph, LossParts, MlpWeights,
};
pub use checkpoint::{ArchiveError, TensorArchive};
pub use config::{presets, ModelConfig};
pub(crate) use block::param;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{AttentionMask, Feed, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("sequence of {len} tokens exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

pub const EMBED: &str = "embed";
pub const HEAD: &str = "head";
pub const FINAL_NORM: &str = "final_norm";

pub fn block_prefix(layer: usize) -> String {
    format!("blocks.{layer}")
}

/// Positions and attention window for one (possibly packed) sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub positions: Arc<[usize]>,
    pub mask: AttentionMask,
}

impl Layout {
    pub fn causal(len: usize) -> Self {
        Self {
            positions: (0..len).collect::<Vec<_>>().into(),
            mask: AttentionMask::causal(len),
        }
    }

    /// Block-diagonal layout for packed documents; positions restart at zero
    /// at every segment boundary.
    pub fn from_segments(segments: &[u32]) -> Result<Self> {
        let mask = AttentionMask::from_segments(segments)?;
        let positions: Vec<usize> = mask
            .window_start()
            .iter()
            .enumerate()
            .map(|(i, &s)| i - s)
            .collect();
        Ok(Self {
            positions: positions.into(),
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T> Feed<T> for Model<T> {
    fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }
}

/// Expected `(name, shape)` of every parameter, in a stable order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut out = vec![(EMBED.to_string(), vec![config.vocab_size, d])];
    for layer in 0..config.n_layers {
        let p = block_prefix(layer);
        out.extend(BlockWeights::<f32>::shapes(config, &p, false));
    }
    out.push((format!("{FINAL_NORM}.gain"), vec![d]));
    if config.ln_bias {
        out.push((format!("{FINAL_NORM}.bias"), vec![d]));
    }
    if !config.tied_embeddings {
        out.push((HEAD.to_string(), vec![config.vocab_size, d]));
    }
    out
}

fn is_output_projection(name: &str) -> bool {
    name.ends_with(".attn.wo") || name.ends_with(".mlp.w_down")
}

fn is_norm_or_bias(name: &str) -> bool {
    name.ends_with(".gain") || name.ends_with(".bias") || name.contains(".b_")
}

impl<T: Scalar> Model<T> {
    /// Normal init with standard deviation `std`; output projections are
    /// shrunk by `sqrt(2 * n_layers)`, norms start at identity.
    pub fn init(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in param_shapes(&config) {
            let t = if name.ends_with(".gain") {
                Tensor::ones(shape)
            } else if is_norm_or_bias(&name) {
                Tensor::zeros(shape)
            } else if is_output_projection(&name) {
                Tensor::randn(shape, out_std, &mut rng)
            } else {
                Tensor::randn(shape, std, &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        for (name, shape) in &expected {
            let t = params
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    got: t.shape().to_vec(),
                    expected: shape.clone(),
                });
            }
        }
        if params.len() != expected.len() {
            let extra = params
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn block(&self, layer: usize) -> Result<BlockWeights<T>> {
        BlockWeights::from_params(&self.params, &block_prefix(layer))
    }

    /// Gives the output layer its own copy of the input embedding. Returns
    /// the number of parameters added (zero if already untied).
    pub fn untie(&mut self) -> usize {
        if !self.config.tied_embeddings {
            return 0;
        }
        let head = self.params[EMBED].clone();
        let added = head.len();
        self.params.insert(HEAD.to_string(), head);
        self.config.tied_embeddings = false;
        added
    }

    /// Switches the RoPE base; no parameters change.
    pub fn set_rope_base(&mut self, base: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.rope_base = base;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn set_context_length(&mut self, len: usize) -> Result<()> {
        let mut c = self.config.clone();
        c.context_length = len;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    pub fn bit_eq(&self, other: &Model<T>) -> bool {
        self.config == other.config
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.context_length {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.context_length,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfVocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}
