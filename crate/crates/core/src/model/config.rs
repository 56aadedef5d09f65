use serde::{Deserialize, Serialize};

use super::ModelError;

/// RoPE base used for the first three curriculum stages ("5M+42").
pub const ROPE_BASE_LONG: f64 = 5_000_042.0;
/// RoPE base after the final-stage switch ("500K+42").
pub const ROPE_BASE_FINAL: f64 = 500_042.0;
/// Layer norm epsilon, added inside the variance.
pub const LN_EPS: f64 = 1e-5;
/// Vocabulary of the full-scale tokenizer. Only used for parameter accounting.
pub const FULL_SCALE_VOCAB: usize = 65_024;

fn default_ln_eps() -> f64 {
    LN_EPS
}

fn default_true() -> bool {
    true
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub n_kv: usize,
    pub context_length: usize,
    pub rope_base: f64,
    pub tied_embeddings: bool,
    pub vocab_size: usize,
    /// MLP hidden width; `4 * d_model` when absent.
    #[serde(default)]
    pub mlp_hidden: Option<usize>,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_true")]
    pub ln_bias: bool,
    /// Biases on attention and MLP projections.
    #[serde(default)]
    pub linear_bias: bool,
}

impl ModelConfig {
    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv * self.head_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_hidden.unwrap_or(4 * self.d_model)
    }

    /// Query heads served by one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("n_kv", self.n_kv),
            ("context_length", self.context_length),
            ("vocab_size", self.vocab_size),
            ("mlp_hidden", self.mlp_hidden()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !self.n_heads.is_multiple_of(self.n_kv) {
            return Err(ModelError::Config(format!(
                "n_heads {} is not a multiple of n_kv {}",
                self.n_heads, self.n_kv
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim
            )));
        }
        if !(self.rope_base > 0.0) || !self.rope_base.is_finite() {
            return Err(ModelError::Config(format!(
                "rope_base {} must be positive",
                self.rope_base
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(ModelError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Trainable parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let norm = if self.ln_bias { 2 * d } else { d };
        let (aw, kw, h) = (self.attn_width(), self.kv_width(), self.mlp_hidden());
        let mut block = norm + d * aw + 2 * d * kw + aw * d + d * h + h * d;
        if self.linear_bias {
            block += aw + 2 * kw + d + h + d;
        }
        let embed = self.vocab_size * d;
        let head = if self.tied_embeddings { 0 } else { embed };
        self.n_layers * block + embed + head + norm
    }

    /// The same architecture with separate input and output embeddings.
    pub fn untied(&self) -> Self {
        Self {
            tied_embeddings: false,
            ..self.clone()
        }
    }
}

/// Architecture rows of the reference model family.
pub mod presets {
    use super::*;

    fn base(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        head_dim: usize,
        n_kv: usize,
        context_length: usize,
        rope_base: f64,
        tied: bool,
    ) -> ModelConfig {
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            head_dim,
            n_kv,
            context_length,
            rope_base,
            tied_embeddings: tied,
            vocab_size: FULL_SCALE_VOCAB,
            mlp_hidden: None,
            ln_eps: LN_EPS,
            ln_bias: true,
            linear_bias: false,
        }
    }

    /// The 11B model at curriculum stage 1..=4.
    pub fn eleven_b(stage: u8) -> Option<ModelConfig> {
        let (ctx, base_freq, tied) = match stage {
            1 => (2048, ROPE_BASE_LONG, true),
            2 => (4096, ROPE_BASE_LONG, true),
            3 => (8192, ROPE_BASE_LONG, true),
            4 => (8192, ROPE_BASE_FINAL, false),
            _ => return None,
        };
        Some(base(60, 4096, 32, 128, 8, ctx, base_freq, tied))
    }

    pub fn seven_b() -> ModelConfig {
        base(32, 4544, 71, 64, 1, 2048, 10_000.0, true)
    }

    pub fn forty_b() -> ModelConfig {
        base(60, 8192, 128, 64, 8, 2048, 10_000.0, true)
    }

    pub fn one_eighty_b() -> ModelConfig {
        base(80, 14848, 232, 64, 8, 2048, 10_000.0, true)
    }

    /// Two-layer verification model.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            n_kv: 2,
            context_length: 64,
            rope_base: ROPE_BASE_LONG,
            tied_embeddings: true,
            vocab_size: 97,
            mlp_hidden: None,
            ln_eps: LN_EPS,
            ln_bias: true,
            linear_bias: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;

    #[test]
    fn eleven_b_rows() {
        for stage in 1..=4 {
            let c = eleven_b(stage).unwrap();
            c.validate().unwrap();
            assert_eq!((c.n_layers, c.d_model, c.n_heads, c.head_dim, c.n_kv), (60, 4096, 32, 128, 8));
            assert_eq!(c.attn_width(), c.d_model);
            assert_eq!(c.group_size(), 4);
            assert!(c.context_length.is_power_of_two());
        }
        assert_eq!(eleven_b(1).unwrap().rope_base, 5_000_042.0);
        assert_eq!(eleven_b(4).unwrap().rope_base, 500_042.0);
        assert_eq!(
            [1, 2, 3, 4].map(|s| eleven_b(s).unwrap().context_length),
            [2048, 4096, 8192, 8192]
        );
        assert!(eleven_b(3).unwrap().tied_embeddings && !eleven_b(4).unwrap().tied_embeddings);
        assert!(eleven_b(0).is_none() && eleven_b(5).is_none());
    }

    #[test]
    fn earlier_rows_are_consistent() {
        for c in [seven_b(), forty_b(), one_eighty_b()] {
            c.validate().unwrap();
            assert_eq!(c.attn_width(), c.d_model);
        }
    }

    #[test]
    fn untie_adds_one_embedding_matrix() {
        let tied = eleven_b(3).unwrap();
        let untied = tied.untied();
        let extra = untied.param_count() - tied.param_count();
        assert_eq!(extra, FULL_SCALE_VOCAB * 4096);
        // roughly 0.27B, the "about 300M" extra trainable parameters
        assert!((2.5e8..3.2e8).contains(&(extra as f64)));
    }

    #[test]
    fn invalid_configs() {
        let mut c = toy();
        c.n_kv = 3;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.head_dim = 15;
        c.n_heads = 4;
        assert!(c.validate().is_err());
        let mut c = toy();
        c.rope_base = 0.0;
        assert!(c.validate().is_err());
    }
}
