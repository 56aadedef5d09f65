//! Curriculum plans. A plan is written in reference units (full-scale token
//! counts, context lengths and batch sizes) and resolved to desk scale by
//! one token factor plus divisors for context length and batch size.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::MixtureSpec;
use crate::model::config::{presets, ROPE_BASE_FINAL, ROPE_BASE_LONG};
use crate::model::ModelConfig;
use crate::optim::{BatchSchedule, EpsSchedule, LrSchedule, OptimizerConfig, SpikePolicy, GT};

/// One curriculum stage in reference units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: u8,
    /// Budget in gigatokens.
    pub token_budget_gt: f64,
    pub context_length: usize,
    pub rope_base: f64,
    pub tied_embeddings: bool,
    pub mixture: MixtureSpec,
    /// Indexed by cumulative tokens over the whole run.
    pub lr: LrSchedule,
    pub batch: BatchSchedule,
}

impl StagePlan {
    /// The four reference stages. Every stage carries the same global
    /// schedules; stages 2-4 sit on their constant tail.
    pub fn reference_stages() -> Vec<StagePlan> {
        let rows = [
            (1, 4500.0, 2048, ROPE_BASE_LONG, true),
            (2, 250.0, 4096, ROPE_BASE_LONG, true),
            (3, 250.0, 8192, ROPE_BASE_LONG, true),
            (4, 500.0, 8192, ROPE_BASE_FINAL, false),
        ];
        rows.iter()
            .map(|&(stage, gt, ctx, rope, tied)| StagePlan {
                stage,
                token_budget_gt: gt,
                context_length: ctx,
                rope_base: rope,
                tied_embeddings: tied,
                mixture: MixtureSpec::stage(stage).expect("stages 1-4 exist"),
                lr: LrSchedule::reference(),
                batch: BatchSchedule::reference(),
            })
            .collect()
    }
}

/// Maps reference units to the run's units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    /// Multiplies every token count (budgets and schedule positions).
    pub tokens: f64,
    pub context_divisor: usize,
    pub batch_divisor: usize,
}

impl Scaling {
    pub const IDENTITY: Scaling = Scaling {
        tokens: 1.0,
        context_divisor: 1,
        batch_divisor: 1,
    };

    /// 4500 GT becomes 4.5M tokens, 2048-token windows become 128 and the
    /// 2048-sample batch becomes 4.
    pub fn desk() -> Self {
        Self {
            tokens: 1e-6,
            context_divisor: 16,
            batch_divisor: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainKnobs {
    pub z_loss: f64,
    /// Samples per gradient-accumulation micro-batch.
    pub micro_batch: usize,
    pub init_std: f64,
    /// Checkpoint cadence in reference gigatokens.
    pub checkpoint_every_gt: f64,
    /// Evaluation cadence in reference gigatokens.
    pub eval_every_gt: f64,
    /// Held-out samples drawn from each stage mixture.
    pub eval_samples: usize,
    /// Rollbacks to the same checkpoint before giving up.
    pub max_rollbacks: u32,
}

impl Default for TrainKnobs {
    fn default() -> Self {
        Self {
            z_loss: 1e-4,
            micro_batch: 4,
            init_std: 0.02,
            checkpoint_every_gt: 500.0,
            eval_every_gt: 500.0,
            eval_samples: 8,
            max_rollbacks: 8,
        }
    }
}

/// Synthetic corpus parameters; the vocabulary comes from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub min_doc_len: usize,
    pub max_doc_len: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            min_doc_len: 32,
            max_doc_len: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub seed: u64,
    pub scaling: Scaling,
    /// Base architecture; context length, RoPE base and tying are set per stage.
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub eps: EpsSchedule,
    pub spike: SpikePolicy,
    #[serde(default)]
    pub train: TrainKnobs,
    #[serde(default)]
    pub data: SyntheticData,
    pub stages: Vec<StagePlan>,
}

/// A stage in run units.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedStage {
    pub stage: u8,
    pub token_budget: u64,
    pub context_length: usize,
    pub rope_base: f64,
    pub tied_embeddings: bool,
    pub mixture: MixtureSpec,
    pub lr: LrSchedule,
    pub batch: BatchSchedule,
}

/// Two layers, width 32, four query heads over two key/value heads.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        head_dim: 8,
        n_kv: 2,
        context_length: 128,
        rope_base: ROPE_BASE_LONG,
        tied_embeddings: true,
        vocab_size: 64,
        mlp_hidden: None,
        ln_eps: crate::model::config::LN_EPS,
        ln_bias: true,
        linear_bias: false,
    }
}

impl CurriculumPlan {
    /// Full-scale plan with the stage-1 11B architecture.
    pub fn reference(seed: u64) -> Self {
        Self {
            seed,
            scaling: Scaling::IDENTITY,
            model: presets::eleven_b(1).expect("stage 1 preset"),
            optimizer: OptimizerConfig::default(),
            eps: EpsSchedule::reference(),
            spike: SpikePolicy::default(),
            train: TrainKnobs::default(),
            data: SyntheticData::default(),
            stages: StagePlan::reference_stages(),
        }
    }

    /// The reference curriculum on the desk model, token factor `scale`.
    pub fn desk(seed: u64, scale: f64) -> Self {
        Self {
            scaling: Scaling {
                tokens: scale,
                ..Scaling::desk()
            },
            model: desk_model(),
            // a replay of the same batches after a rollback would spike again
            spike: SpikePolicy {
                skip_tokens: 8192,
                ..SpikePolicy::default()
            },
            ..Self::reference(seed)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Plan(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, TrainError> {
        toml::to_string(self).map_err(|e| TrainError::Plan(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn tokens(&self, reference: f64) -> f64 {
        reference * self.scaling.tokens
    }

    pub fn checkpoint_every(&self) -> u64 {
        (self.tokens(self.train.checkpoint_every_gt * GT).round() as u64).max(1)
    }

    pub fn eval_every(&self) -> u64 {
        (self.tokens(self.train.eval_every_gt * GT).round() as u64).max(1)
    }

    pub fn eps_schedule(&self) -> EpsSchedule {
        self.eps.scaled(self.scaling.tokens)
    }

    /// Validates and converts every stage to run units.
    pub fn resolve(&self) -> Result<Vec<ResolvedStage>, TrainError> {
        let s = &self.scaling;
        if !(s.tokens > 0.0) || s.context_divisor == 0 || s.batch_divisor == 0 {
            return Err(TrainError::Plan(format!("invalid scaling {s:?}")));
        }
        if self.stages.is_empty() {
            return Err(TrainError::Plan("plan has no stages".into()));
        }
        if self.train.micro_batch == 0 || self.train.eval_samples == 0 {
            return Err(TrainError::Plan("micro_batch and eval_samples must be positive".into()));
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.spike.validate()?;
        let mut out: Vec<ResolvedStage> = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            if let Some(prev) = out.last() {
                if st.stage <= prev.stage {
                    return Err(TrainError::Plan(format!(
                        "stage {} follows stage {}; stages must be strictly increasing",
                        st.stage, prev.stage
                    )));
                }
                if st.tied_embeddings && !prev.tied_embeddings {
                    return Err(TrainError::Plan(format!("stage {} re-ties embeddings", st.stage)));
                }
            }
            st.mixture.validate()?;
            let lr = st.lr.scaled(s.tokens);
            lr.validate()?;
            let batch = st.batch.scaled(s.tokens, s.batch_divisor);
            batch.validate()?;
            let budget = self.tokens(st.token_budget_gt * GT).round();
            let context_length = st.context_length / s.context_divisor;
            if !(budget >= 1.0) || context_length < 2 {
                return Err(TrainError::Plan(format!(
                    "stage {} resolves to {budget} tokens at context {context_length}",
                    st.stage
                )));
            }
            let mut cfg = self.model.clone();
            cfg.context_length = context_length;
            cfg.rope_base = st.rope_base;
            cfg.validate()?;
            out.push(ResolvedStage {
                stage: st.stage,
                token_budget: budget as u64,
                context_length,
                rope_base: st.rope_base,
                tied_embeddings: st.tied_embeddings,
                mixture: st.mixture.clone(),
                lr,
                batch,
            });
        }
        Ok(out)
    }
}
