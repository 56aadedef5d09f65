//! The vision-language model and its two training stages.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::encoder::{build_projector, init_projector, StubEncoder, VisionConfig};
use super::image::{tile_high_res, GridPolicy, Image};
use super::sequence::{build_multimodal_input, MultimodalSequence};
use super::VlmError;
use crate::model::checkpoint::sha256_hex;
use crate::model::{build_lm, Layout, Model, ModelConfig, TensorArchive};
use crate::optim::{adamw_step, AdamState, OptimizerConfig};
use crate::par::{self, Exec};
use crate::tensor::{Feed, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlmStage {
    /// Projector only.
    Pretrain,
    /// Projector and language model.
    Finetune,
}

impl VlmStage {
    pub fn trains_llm(self) -> bool {
        self == Self::Finetune
    }
}

impl std::str::FromStr for VlmStage {
    type Err = VlmError;

    fn from_str(s: &str) -> Result<Self, VlmError> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "finetune" => Ok(Self::Finetune),
            _ => Err(VlmError::Config(format!("unknown stage `{s}` (pretrain|finetune)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmExample {
    pub image: Option<Image>,
    pub turns: Vec<(Vec<usize>, Vec<usize>)>,
}

struct Both<'a> {
    llm: &'a Model<f32>,
    projector: &'a BTreeMap<String, Tensor<f32>>,
}

impl Feed<f32> for Both<'_> {
    fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.llm.tensor(name).or_else(|| self.projector.get(name))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmModel {
    pub llm: Model<f32>,
    pub projector: BTreeMap<String, Tensor<f32>>,
    pub encoder: StubEncoder,
    pub vision: VisionConfig,
    pub grid: GridPolicy,
    pub encoder_seed: u64,
}

/// SHA-256 of every tensor of a parameter map, in name order.
pub fn params_checksum(params: &BTreeMap<String, Tensor<f32>>) -> String {
    let mut bytes = Vec::new();
    for (k, v) in params {
        bytes.extend(k.as_bytes());
        bytes.push(0);
        bytes.extend(v.to_le_bytes());
    }
    sha256_hex(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checksums {
    pub llm: String,
    pub projector: String,
    pub encoder: String,
}

impl VlmModel {
    pub fn new(llm: Model<f32>, vision: VisionConfig, grid: GridPolicy, seed: u64) -> Result<Self, VlmError> {
        vision.validate()?;
        let encoder_seed = crate::data::mixture::derive_seed(seed, 0xe4c0);
        let encoder = StubEncoder::new(vision.patch, vision.feature_dim, encoder_seed);
        let projector = init_projector(
            vision.feature_dim,
            vision.projector_hidden,
            llm.config.d_model,
            crate::data::mixture::derive_seed(seed, 0x9e0),
        );
        Ok(Self {
            llm,
            projector,
            encoder,
            vision,
            grid,
            encoder_seed,
        })
    }

    pub fn checksums(&self) -> Checksums {
        Checksums {
            llm: params_checksum(self.llm.params()),
            projector: params_checksum(&self.projector),
            encoder: self.encoder.checksum(),
        }
    }

    /// Patch features of every view (global first, then tiles), stacked.
    pub fn encode_image(&self, image: &Image) -> Result<Tensor<f32>, VlmError> {
        let tiling = tile_high_res(image, &self.grid, self.vision.base)?;
        let d = self.encoder.dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for view in tiling.views() {
            let f = self.encoder.encode(view)?;
            rows += f.len();
            data.extend_from_slice(f.features.data());
        }
        Ok(Tensor::new([rows, d], data)?)
    }

    pub fn sequence(&self, features: Option<&Tensor<f32>>, turns: &[(Vec<usize>, Vec<usize>)]) -> Result<MultimodalSequence, VlmError> {
        let rows: Vec<usize> = features.map(|f| f.rows()).into_iter().collect();
        build_multimodal_input(&rows, turns, self.llm.config.context_length)
    }

    fn graph(
        &self,
        features: Option<&Tensor<f32>>,
        seq: &MultimodalSequence,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(Graph<f32>, crate::model::LmGraph), VlmError> {
        let mut g = Graph::new();
        let prefix = match features {
            Some(f) if f.rows() > 0 => {
                let x = g.constant(f.clone());
                Some(build_projector(
                    &mut g,
                    x,
                    self.vision.projector_hidden,
                    self.llm.config.d_model,
                    trainable,
                )?)
            }
            _ => None,
        };
        let lm = build_lm(&mut g, &self.llm.config, prefix, &seq.text, &Layout::causal(seq.len()), trainable)?;
        Ok((g, lm))
    }

    /// Logits for image features (if any) followed by `tokens`.
    pub fn logits(&self, features: Option<&Tensor<f32>>, tokens: &[usize]) -> Result<Tensor<f32>, VlmError> {
        let seq = self.sequence(features, &[(tokens.to_vec(), Vec::new())])?;
        let (mut g, lm) = self.graph(features, &seq, &|_| false)?;
        g.forward(&Both {
            llm: &self.llm,
            projector: &self.projector,
        })?;
        Ok(g.value(lm.logits)?.clone())
    }

    /// Sum of response-token cross-entropies divided by `normalizer`, and
    /// its gradient for the trainable parameters.
    fn loss_and_grads(
        &self,
        features: Option<&Tensor<f32>>,
        seq: &MultimodalSequence,
        normalizer: f32,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<(f64, BTreeMap<String, Tensor<f32>>), VlmError> {
        let (targets, mask) = seq.targets();
        if !mask.iter().any(|&m| m) {
            return Ok((0.0, BTreeMap::new()));
        }
        let (mut g, lm) = self.graph(features, seq, trainable)?;
        let mask: Arc<[f32]> = mask.iter().map(|&m| f32::from(u8::from(m))).collect();
        let loss = g.lm_loss(lm.logits, Arc::from(targets), mask, Some(normalizer), 0.0)?;
        g.forward(&Both {
            llm: &self.llm,
            projector: &self.projector,
        })?;
        let (ce, _) = g.loss_parts(loss)?;
        Ok((f64::from(ce), g.backward_scalar(loss)?.into_map()))
    }

    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<(), VlmError> {
        let mut tensors: BTreeMap<String, Tensor<f32>> =
            self.llm.params().iter().map(|(k, v)| (format!("llm/{k}"), v.clone())).collect();
        tensors.extend(self.projector.iter().map(|(k, v)| (format!("proj/{k}"), v.clone())));
        let meta = json!({
            "kind": "vlm",
            "llm_config": self.llm.config,
            "vision": self.vision,
            "grid": self.grid,
            "encoder_seed": self.encoder_seed,
            "encoder_sha256": self.encoder.checksum(),
            "extra": meta,
        });
        TensorArchive::new(tensors, meta).write(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value), VlmError> {
        let a = TensorArchive::<f32>::read(dir)?;
        let bad = |m: &str| VlmError::Config(format!("vlm archive: {m}"));
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some("vlm") {
            return Err(bad("not a vlm archive"));
        }
        let field = |k: &str| a.meta.get(k).cloned().ok_or_else(|| bad(&format!("missing `{k}`")));
        let config: ModelConfig = serde_json::from_value(field("llm_config")?)?;
        let vision: VisionConfig = serde_json::from_value(field("vision")?)?;
        let grid: GridPolicy = serde_json::from_value(field("grid")?)?;
        let encoder_seed: u64 = serde_json::from_value(field("encoder_seed")?)?;
        let want: String = serde_json::from_value(field("encoder_sha256")?)?;
        let extra = field("extra")?;
        let (mut llm, mut projector) = (BTreeMap::new(), BTreeMap::new());
        for (k, t) in a.tensors {
            if let Some(n) = k.strip_prefix("llm/") {
                llm.insert(n.to_string(), t);
            } else if let Some(n) = k.strip_prefix("proj/") {
                projector.insert(n.to_string(), t);
            } else {
                return Err(bad(&format!("unexpected tensor `{k}`")));
            }
        }
        let encoder = StubEncoder::new(vision.patch, vision.feature_dim, encoder_seed);
        if encoder.checksum() != want {
            return Err(VlmError::FrozenDrift("encoder".into()));
        }
        Ok((
            Self {
                llm: Model::from_params(config, llm)?,
                projector,
                encoder,
                vision,
                grid,
                encoder_seed,
            },
            extra,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for VlmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            batch: 4,
            lr: 1e-3,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmState {
    pub model: VlmModel,
    pub opt: AdamState<f32>,
    pub step: u64,
}

impl VlmState {
    pub fn new(model: VlmModel) -> Self {
        Self {
            model,
            opt: AdamState::default(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub losses: Vec<f64>,
    pub before: Checksums,
    pub after: Checksums,
}

/// Trains for `cfg.steps` steps, cycling through `data` in order. The
/// encoder (and, when pretraining, the language model) is checksummed
/// around every step; any change is a fatal error.
pub fn vlm_train_stage(
    stage: VlmStage,
    data: &[VlmExample],
    state: &mut VlmState,
    cfg: &VlmTrainConfig,
) -> Result<StageOutcome, VlmError> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(VlmError::Config("need at least one example and a positive batch".into()));
    }
    cfg.optimizer.validate()?;
    // the encoder is frozen, so its features can be computed once
    let features: Vec<Option<Tensor<f32>>> = par::map(Exec::auto(data.len() << 16), data, |ex| {
        ex.image.as_ref().map(|im| state.model.encode_image(im)).transpose()
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let seqs: Vec<MultimodalSequence> = data
        .iter()
        .zip(&features)
        .map(|(ex, f)| state.model.sequence(f.as_ref(), &ex.turns))
        .collect::<Result<_, _>>()?;

    let trains_llm = stage.trains_llm();
    let trainable = move |name: &str| name.starts_with("projector.") || trains_llm;
    let before = state.model.checksums();
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let pre = state.model.checksums();
        let idx: Vec<usize> = (0..cfg.batch)
            .map(|i| ((state.step as usize) * cfg.batch + i) % data.len())
            .collect();
        let normalizer: usize = idx.iter().map(|&i| seqs[i].loss_mask.iter().filter(|&&m| m).count()).sum();
        if normalizer == 0 {
            return Err(VlmError::Config("batch has no response tokens".into()));
        }
        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for &i in &idx {
            let (l, g) = state
                .model
                .loss_and_grads(features[i].as_ref(), &seqs[i], normalizer as f32, &trainable)?;
            loss += l;
            for (k, v) in g {
                match grads.get_mut(&k) {
                    Some(acc) => acc.add_assign(&v)?,
                    None => {
                        grads.insert(k, v);
                    }
                }
            }
        }
        if let Some(name) = grads.keys().find(|k| !trainable(k)) {
            return Err(VlmError::FrozenDrift(format!("gradient produced for frozen `{name}`")));
        }
        let VlmModel { llm, projector, .. } = &mut state.model;
        adamw_step(
            llm.params_mut().chain(projector.iter_mut()),
            &grads,
            &mut state.opt,
            &cfg.optimizer,
            cfg.lr,
        )?;
        state.step += 1;
        losses.push(loss);
        let post = state.model.checksums();
        if post.encoder != pre.encoder {
            return Err(VlmError::FrozenDrift("encoder".into()));
        }
        if !trains_llm && post.llm != pre.llm {
            return Err(VlmError::FrozenDrift("language model".into()));
        }
    }
    Ok(StageOutcome {
        losses,
        before,
        after: state.model.checksums(),
    })
}

/// Desk-scale stand-ins for caption pairs and visual instructions: solid
/// noisy images of one of four colours whose answer names the colour.
/// Token ids stay below `vocab`; a quarter of the images exceed the base
/// resolution and get tiled.
pub fn synthetic_fixtures(stage: VlmStage, n: usize, vocab: usize, base: usize, seed: u64) -> Vec<VlmExample> {
    const COLOURS: [[f32; 3]; 4] = [[0.9, 0.1, 0.1], [0.1, 0.8, 0.2], [0.1, 0.2, 0.9], [0.9, 0.9, 0.2]];
    assert!(vocab >= 16, "fixtures need at least 16 token ids");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = |x: usize| 1 + x % (vocab - 1);
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..COLOURS.len());
            let side = if rng.random_range(0..4) == 0 { 2 * base } else { base };
            let data = (0..side * side)
                .flat_map(|_| COLOURS[c])
                .map(|v| (v + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0))
                .collect();
            let image = Image::new(side, side, data).expect("sized");
            let answer = vec![tok(8 + c), tok(12 + c)];
            let turns = match stage {
                VlmStage::Pretrain => vec![(vec![tok(2)], answer)],
                VlmStage::Finetune => vec![
                    (vec![tok(3), tok(4)], answer),
                    (vec![tok(5)], vec![tok(8 + c)]),
                ],
            };
            VlmExample {
                image: Some(image),
                turns,
            }
        })
        .collect()
}

/// Desk vision geometry: 56-pixel views of 14-pixel patches (16 per view).
pub fn desk_vision() -> VisionConfig {
    VisionConfig {
        patch: 14,
        base: 56,
        feature_dim: 16,
        projector_hidden: 32,
    }
}
