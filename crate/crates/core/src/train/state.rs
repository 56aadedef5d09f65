//! Training state and its checkpoint store.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::plan::CurriculumPlan;
use super::TrainError;
use crate::data::StreamState;
use crate::model::{Model, ModelConfig, TensorArchive};
use crate::optim::AdamState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub opt: AdamState<f32>,
    /// Tokens trained on over the whole run.
    pub tokens_seen: u64,
    /// Index of the stage in progress (equal to the stage count when done).
    pub stage_index: usize,
    pub stage_tokens: u64,
    /// Data cursor of the stage in progress; `None` before the stage starts.
    pub stream: Option<StreamState>,
    pub spikes: u64,
    pub step: u64,
    /// Recent per-step losses of the current stage, oldest first.
    pub losses: Vec<f64>,
    pub rng: ChaCha8Rng,
    /// Checkpoint this state was last saved to or restored from.
    pub parent: Option<u64>,
    /// Batch size of the last committed step.
    pub last_batch: Option<usize>,
}

const MODEL: &str = "model/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: ModelConfig,
    tokens_seen: u64,
    stage_index: usize,
    stage_tokens: u64,
    stream: Option<StreamState>,
    spikes: u64,
    step: u64,
    adam_step: u64,
    losses: Vec<f64>,
    rng: ChaCha8Rng,
    parent: Option<u64>,
    #[serde(default)]
    last_batch: Option<usize>,
}

impl TrainState {
    pub fn fresh(plan: &CurriculumPlan) -> Result<Self, TrainError> {
        let first = plan
            .resolve()?
            .into_iter()
            .next()
            .expect("resolve rejects empty plans");
        let mut cfg = plan.model.clone();
        cfg.context_length = first.context_length;
        cfg.rope_base = first.rope_base;
        cfg.tied_embeddings = true;
        let model = Model::init(cfg, plan.seed, plan.train.init_std)?;
        Ok(Self {
            model,
            opt: AdamState::default(),
            tokens_seen: 0,
            stage_index: 0,
            stage_tokens: 0,
            stream: None,
            spikes: 0,
            step: 0,
            losses: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(crate::data::mixture::derive_seed(plan.seed, 0x7a1e)),
            parent: None,
            last_batch: None,
        })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.model.bit_eq(&other.model)
            && self.opt.bit_eq(&other.opt)
            && self.tokens_seen == other.tokens_seen
            && self.stage_index == other.stage_index
            && self.stage_tokens == other.stage_tokens
            && self.stream == other.stream
            && self.spikes == other.spikes
            && self.step == other.step
            && self.losses.len() == other.losses.len()
            && self.losses.iter().zip(&other.losses).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.rng == other.rng
            && self.last_batch == other.last_batch
    }

    pub fn to_archive(&self, plan: &CurriculumPlan) -> Result<TensorArchive<f32>, TrainError> {
        let mut tensors = BTreeMap::new();
        for (k, v) in self.model.params() {
            tensors.insert(format!("{MODEL}{k}"), v.clone());
        }
        for (k, v) in &self.opt.m {
            tensors.insert(format!("{ADAM_M}{k}"), v.clone());
        }
        for (k, v) in &self.opt.v {
            tensors.insert(format!("{ADAM_V}{k}"), v.clone());
        }
        let meta = Meta {
            kind: "train-state".into(),
            config: self.model.config.clone(),
            tokens_seen: self.tokens_seen,
            stage_index: self.stage_index,
            stage_tokens: self.stage_tokens,
            stream: self.stream.clone(),
            spikes: self.spikes,
            step: self.step,
            adam_step: self.opt.step,
            losses: self.losses.clone(),
            rng: self.rng.clone(),
            parent: self.parent,
            last_batch: self.last_batch,
        };
        let meta = json!({
            "state": serde_json::to_value(meta)?,
            "plan": serde_json::to_value(plan)?,
        });
        Ok(TensorArchive::new(tensors, meta))
    }

    /// Inverse of [`TrainState::to_archive`]; also returns the embedded plan.
    pub fn from_archive(archive: TensorArchive<f32>) -> Result<(Self, CurriculumPlan), TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        let meta: Meta = serde_json::from_value(archive.meta.get("state").cloned().ok_or_else(|| bad("no state"))?)?;
        let plan: CurriculumPlan =
            serde_json::from_value(archive.meta.get("plan").cloned().ok_or_else(|| bad("no plan"))?)?;
        if meta.kind != "train-state" {
            return Err(bad("archive is not a training state"));
        }
        let (mut params, mut m, mut v) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for (k, t) in archive.tensors {
            let slot: &mut BTreeMap<String, Tensor<f32>> = if k.starts_with(MODEL) {
                &mut params
            } else if k.starts_with(ADAM_M) {
                &mut m
            } else if k.starts_with(ADAM_V) {
                &mut v
            } else {
                return Err(bad(&format!("unexpected tensor `{k}`")));
            };
            let name = k.split_once('/').expect("prefixed").1.to_string();
            slot.insert(name, t);
        }
        let model = Model::from_params(meta.config, params)?;
        let state = Self {
            model,
            opt: AdamState {
                step: meta.adam_step,
                m,
                v,
            },
            tokens_seen: meta.tokens_seen,
            stage_index: meta.stage_index,
            stage_tokens: meta.stage_tokens,
            stream: meta.stream,
            spikes: meta.spikes,
            step: meta.step,
            losses: meta.losses,
            rng: meta.rng,
            parent: meta.parent,
            last_batch: meta.last_batch,
        };
        Ok((state, plan))
    }
}

/// Where checkpoints live. Ids increase with every save.
#[derive(Debug)]
pub enum CheckpointStore {
    /// Encoded `(id, manifest, payload)` triples.
    Memory(Vec<(u64, Vec<u8>, Vec<u8>)>),
    Dir(PathBuf),
}

pub fn checkpoint_dir(root: &Path, id: u64) -> PathBuf {
    root.join(format!("ckpt-{id:06}"))
}

impl CheckpointStore {
    pub fn memory() -> Self {
        Self::Memory(Vec::new())
    }

    pub fn dir(path: impl Into<PathBuf>) -> Result<Self, TrainError> {
        let p = path.into();
        fs::create_dir_all(&p)?;
        Ok(Self::Dir(p))
    }

    pub fn ids(&self) -> Result<Vec<u64>, TrainError> {
        match self {
            Self::Memory(v) => Ok(v.iter().map(|e| e.0).collect()),
            Self::Dir(root) => {
                let mut ids = Vec::new();
                for entry in fs::read_dir(root)? {
                    let name = entry?.file_name();
                    if let Some(id) = name.to_str().and_then(|n| n.strip_prefix("ckpt-")).and_then(|n| n.parse().ok()) {
                        ids.push(id);
                    }
                }
                ids.sort_unstable();
                Ok(ids)
            }
        }
    }

    pub fn latest(&self) -> Result<Option<u64>, TrainError> {
        Ok(self.ids()?.last().copied())
    }

    /// Saves `state` and records the new id as its parent.
    pub fn save(&mut self, state: &mut TrainState, plan: &CurriculumPlan) -> Result<u64, TrainError> {
        let id = self.latest()?.map_or(0, |i| i + 1);
        state.parent = Some(id);
        let archive = state.to_archive(plan)?;
        match self {
            Self::Memory(v) => {
                let (m, p) = archive.encode()?;
                v.push((id, m, p));
            }
            Self::Dir(root) => archive.write(&checkpoint_dir(root, id))?,
        }
        Ok(id)
    }

    pub fn load(&self, id: u64) -> Result<(TrainState, CurriculumPlan), TrainError> {
        let archive = match self {
            Self::Memory(v) => {
                let (_, m, p) = v
                    .iter()
                    .find(|e| e.0 == id)
                    .ok_or(TrainError::NoCheckpoint)?;
                TensorArchive::decode(m, p)?
            }
            Self::Dir(root) => {
                let dir = checkpoint_dir(root, id);
                if !dir.exists() {
                    return Err(TrainError::NoCheckpoint);
                }
                TensorArchive::read(&dir)?
            }
        };
        TrainState::from_archive(archive)
    }
}

/// Loads a checkpoint directory written by a [`CheckpointStore::Dir`].
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CurriculumPlan), TrainError> {
    TrainState::from_archive(TensorArchive::read(dir)?)
}

/// Writes the bare language model (no optimizer state) as an archive.
pub fn save_model(model: &Model<f32>, dir: &Path) -> Result<(), TrainError> {
    let meta = json!({ "kind": "lm", "config": model.config });
    TensorArchive::new(model.params().clone(), meta).write(dir)?;
    Ok(())
}

/// Reads a model written by [`save_model`] or the model part of a checkpoint.
pub fn load_model(dir: &Path) -> Result<Model<f32>, TrainError> {
    let archive = TensorArchive::<f32>::read(dir)?;
    if archive.meta.get("kind").and_then(|k| k.as_str()) == Some("lm") {
        let config: ModelConfig = serde_json::from_value(archive.meta["config"].clone())?;
        return Ok(Model::from_params(config, archive.tensors)?);
    }
    Ok(TrainState::from_archive(archive)?.0.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let plan = CurriculumPlan::desk(3, 1e-6);
        let mut s = TrainState::fresh(&plan).unwrap();
        s.losses = vec![0.1 + 0.2, 1.0 / 3.0];
        s.tokens_seen = 12345;
        let mut store = CheckpointStore::memory();
        let id = store.save(&mut s, &plan).unwrap();
        let (back, p2) = store.load(id).unwrap();
        assert!(back.bit_eq(&s));
        assert_eq!(p2, plan);
        // save -> load -> save gives identical bytes
        let a = s.to_archive(&plan).unwrap().encode().unwrap();
        let b = back.to_archive(&plan).unwrap().encode().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let store = CheckpointStore::memory();
        assert!(matches!(store.load(0), Err(TrainError::NoCheckpoint)));
    }
}
