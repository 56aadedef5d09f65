//! The curriculum loop: stage transitions, steps with gradient accumulation,
//! spike rollback, checkpoints and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use super::plan::{CurriculumPlan, ResolvedStage};
use super::report::{Record, RunReport, ThroughputReport};
use super::state::{CheckpointStore, TrainState};
use super::step::{batch_gradients, perplexity};
use super::TrainError;
use crate::data::mixture::derive_seed;
use crate::data::synthetic::curriculum_sources;
use crate::data::{DocSource, LmExample, MixtureStream, Token};
use crate::model::Model;
use crate::optim::{adamw_step, noise_temperature, spike_detect, SpikeEvent, SpikeKind, SpikePolicy};

pub const PAD: Token = 0;

/// Restores the latest checkpoint, keeps the spike counter running and
/// moves the data cursor `policy.skip_tokens` past the restored position.
pub fn rollback_and_skip(
    state: &TrainState,
    store: &CheckpointStore,
    policy: &SpikePolicy,
    stream: &mut MixtureStream,
) -> Result<TrainState, TrainError> {
    let id = store.latest()?.ok_or(TrainError::NoCheckpoint)?;
    let (mut restored, _) = store.load(id)?;
    if restored.stage_index != state.stage_index {
        return Err(TrainError::Checkpoint(format!(
            "latest checkpoint {id} belongs to stage index {}, not {}",
            restored.stage_index, state.stage_index
        )));
    }
    let cursor = restored
        .stream
        .clone()
        .ok_or_else(|| TrainError::Checkpoint(format!("checkpoint {id} has no data cursor")))?;
    stream.restore(cursor)?;
    stream.skip(policy.skip_tokens);
    restored.stream = Some(stream.state().clone());
    restored.spikes = state.spikes + 1;
    restored.parent = Some(id);
    restored.last_batch = state.last_batch;
    Ok(restored)
}

pub struct Trainer {
    pub plan: CurriculumPlan,
    stages: Vec<ResolvedStage>,
    sources: Vec<Arc<dyn DocSource>>,
    pub store: CheckpointStore,
    pub report: RunReport,
    eval_set: Vec<LmExample>,
    faults: BTreeSet<u64>,
    stop_after: Option<u64>,
    rollbacks: BTreeMap<u64, u32>,
}

impl Trainer {
    /// Trainer over the synthetic curriculum corpus.
    pub fn new(plan: CurriculumPlan, store: CheckpointStore) -> Result<Self, TrainError> {
        let d = &plan.data;
        let sources = curriculum_sources(
            derive_seed(plan.seed, 0xda7a),
            plan.model.vocab_size,
            (d.min_doc_len, d.max_doc_len),
        );
        Self::with_sources(plan, sources, store)
    }

    pub fn with_sources(
        plan: CurriculumPlan,
        sources: Vec<Arc<dyn DocSource>>,
        store: CheckpointStore,
    ) -> Result<Self, TrainError> {
        let stages = plan.resolve()?;
        let mut t = Self {
            plan,
            stages,
            sources,
            store,
            report: RunReport::default(),
            eval_set: Vec::new(),
            faults: BTreeSet::new(),
            stop_after: None,
            rollbacks: BTreeMap::new(),
        };
        t.eval_set = t.build_eval_set()?;
        Ok(t)
    }

    pub fn stages(&self) -> &[ResolvedStage] {
        &self.stages
    }

    /// Held-out windows at the first stage's context length, drawn from
    /// every stage mixture by streams seeded apart from the training ones.
    fn build_eval_set(&self) -> Result<Vec<LmExample>, TrainError> {
        let ctx = self.stages[0].context_length;
        let mut out = Vec::new();
        for (k, st) in self.stages.iter().enumerate() {
            let seed = derive_seed(self.plan.seed, 0xe7a1_0000 + k as u64);
            let mut stream = MixtureStream::new(&st.mixture, self.sources.clone(), seed)?;
            let (samples, _) = stream.next_batch(self.plan.train.eval_samples, ctx, u64::MAX, PAD)?;
            out.extend(samples.iter().filter_map(|s| s.lm_example()));
        }
        Ok(out)
    }

    pub fn eval_set(&self) -> &[LmExample] {
        &self.eval_set
    }

    /// Forces a non-finite loss the first time step `step` is attempted.
    pub fn inject_nan_loss(&mut self, step: u64) {
        self.faults.insert(step);
    }

    /// Returns from [`Trainer::run`] once `step` steps are done, with the
    /// data cursor in the state. No checkpoint is written: the caller
    /// persists the state, and rollback targets stay those of an
    /// uninterrupted run.
    pub fn stop_after(&mut self, step: Option<u64>) {
        self.stop_after = step;
    }

    pub fn fresh_state(&self) -> Result<TrainState, TrainError> {
        TrainState::fresh(&self.plan)
    }

    pub fn is_complete(&self, state: &TrainState) -> bool {
        state.stage_index >= self.stages.len()
    }

    pub fn evaluate(&self, model: &Model<f32>) -> Result<f64, TrainError> {
        perplexity(model, &self.eval_set, self.plan.train.micro_batch)
    }

    fn stream_for(&self, k: usize) -> Result<MixtureStream, TrainError> {
        let seed = derive_seed(self.plan.seed, 0x57a6_0000 + u64::from(self.stages[k].stage));
        Ok(MixtureStream::new(&self.stages[k].mixture, self.sources.clone(), seed)?)
    }

    fn eval_record(&mut self, state: &TrainState, stage: u8) -> Result<(), TrainError> {
        let perplexity = self.evaluate(&state.model)?;
        self.report.push(Record::Eval {
            stage,
            tokens_seen: state.tokens_seen,
            perplexity,
        });
        Ok(())
    }

    fn checkpoint(&mut self, state: &mut TrainState) -> Result<(), TrainError> {
        let id = self.store.save(state, &self.plan)?;
        self.report.push(Record::Checkpoint {
            id,
            step: state.step,
            tokens_seen: state.tokens_seen,
        });
        Ok(())
    }

    /// Applies the stage's context length, RoPE base and tying, then saves
    /// a checkpoint so a rollback target always exists.
    fn begin_stage(&mut self, state: &mut TrainState, k: usize) -> Result<(), TrainError> {
        let st = self.stages[k].clone();
        state.model.set_context_length(st.context_length)?;
        state.model.set_rope_base(st.rope_base)?;
        let params_added = match (st.tied_embeddings, state.model.config.tied_embeddings) {
            (false, true) => state.model.untie(),
            (true, false) => {
                return Err(TrainError::Plan(format!("stage {} cannot re-tie embeddings", st.stage)));
            }
            _ => 0,
        };
        let stream = self.stream_for(k)?;
        state.stream = Some(stream.state().clone());
        state.stage_tokens = 0;
        state.losses.clear();
        self.report.push(Record::StageStart {
            stage: st.stage,
            tokens_seen: state.tokens_seen,
            context_length: st.context_length,
            rope_base: st.rope_base,
            tied_embeddings: state.model.config.tied_embeddings,
            params_added,
            params: state.model.param_count(),
        });
        if k == 0 && state.tokens_seen == 0 {
            self.eval_record(state, st.stage)?;
        }
        self.checkpoint(state)
    }

    /// Runs stage `k` to its budget (or to the stop step). The state must be
    /// at stage `k`, either before it or part-way through.
    pub fn run_stage(&mut self, mut state: TrainState, k: usize) -> Result<TrainState, TrainError> {
        if state.stage_index != k || k >= self.stages.len() {
            return Err(TrainError::Plan(format!(
                "state is at stage index {}, asked to run {k}",
                state.stage_index
            )));
        }
        if state.stream.is_none() {
            self.begin_stage(&mut state, k)?;
        }
        let st = self.stages[k].clone();
        let knobs = self.plan.train.clone();
        let eps_sched = self.plan.eps_schedule();
        let (ckpt_every, eval_every) = (self.plan.checkpoint_every(), self.plan.eval_every());
        let mut stream = self.stream_for(k)?;
        stream.restore(state.stream.clone().expect("stage begun"))?;
        let started = Instant::now();
        let tokens_at_start = state.tokens_seen;

        while state.stage_tokens < st.token_budget {
            if self.stop_after.is_some_and(|s| state.step >= s) {
                state.stream = Some(stream.state().clone());
                return Ok(state);
            }
            let seen = state.tokens_seen as f64;
            let batch = st.batch.batch_size_at(seen);
            let remaining = st.token_budget - state.stage_tokens;
            let (samples, taken) = stream.next_batch(batch, st.context_length, remaining, PAD)?;
            if taken == 0 {
                return Err(TrainError::DataExhausted {
                    stage: st.stage,
                    consumed: state.stage_tokens,
                    budget: st.token_budget,
                });
            }
            let examples: Vec<LmExample> = samples.iter().filter_map(|s| s.lm_example()).collect();
            let bg = batch_gradients(&state.model, &examples, knobs.micro_batch, knobs.z_loss)?;
            let mut loss = bg.loss;
            if self.faults.remove(&(state.step + 1)) {
                loss = f64::NAN;
            }
            let mut history = state.losses.clone();
            history.push(loss);
            let grads_finite = bg.grads.values().all(|g| g.all_finite());
            let event = spike_detect(&history, &self.plan.spike).or((!grads_finite).then_some(SpikeEvent {
                kind: SpikeKind::NonFinite,
                loss,
                median: None,
            }));
            if let Some(ev) = event {
                self.report.push(Record::Spike {
                    step: state.step + 1,
                    tokens_seen: state.tokens_seen,
                    spike: ev.kind,
                    loss: ev.loss.is_finite().then_some(ev.loss),
                    median: ev.median,
                    spikes: state.spikes + 1,
                });
                let target = self.store.latest()?.ok_or(TrainError::NoCheckpoint)?;
                let n = self.rollbacks.entry(target).or_insert(0);
                *n += 1;
                if *n > knobs.max_rollbacks {
                    return Err(TrainError::Diverged(format!(
                        "{} rollbacks to checkpoint {target} without recovering",
                        knobs.max_rollbacks
                    )));
                }
                state = rollback_and_skip(&state, &self.store, &self.plan.spike, &mut stream)?;
                self.report.push(Record::Rollback {
                    checkpoint: target,
                    tokens_seen: state.tokens_seen,
                    skipped: self.plan.spike.skip_tokens,
                });
                continue;
            }

            let eta = st.lr.lr_at(seen);
            let mut opt_cfg = self.plan.optimizer.clone();
            opt_cfg.eps = eps_sched.eps_at(seen);
            if bg.targets > 0 {
                adamw_step(state.model.params_mut(), &bg.grads, &mut state.opt, &opt_cfg, eta)?;
            }
            if let Some(from) = state.last_batch.filter(|&b| batch > b) {
                self.report.push(Record::Doubling {
                    tokens_seen: state.tokens_seen,
                    from,
                    to: batch,
                });
            }
            state.last_batch = Some(batch);
            let before = state.tokens_seen;
            state.tokens_seen += taken;
            state.stage_tokens += taken;
            state.step += 1;
            state.losses.push(loss);
            if state.losses.len() > self.plan.spike.window {
                state.losses.remove(0);
            }
            state.stream = Some(stream.state().clone());
            self.report.push(Record::Step {
                step: state.step,
                stage: st.stage,
                tokens_seen: state.tokens_seen,
                batch_tokens: taken,
                batch_size: batch,
                loss,
                lr: eta,
                eps: opt_cfg.eps,
                temperature: noise_temperature(eta, batch),
            });
            let done = state.stage_tokens >= st.token_budget;
            if !done && before / eval_every != state.tokens_seen / eval_every {
                self.eval_record(&state, st.stage)?;
            }
            if !done && before / ckpt_every != state.tokens_seen / ckpt_every {
                self.checkpoint(&mut state)?;
            }
        }

        self.eval_record(&state, st.stage)?;
        self.report.push(Record::StageEnd {
            stage: st.stage,
            tokens_seen: state.tokens_seen,
            stage_tokens: state.stage_tokens,
        });
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        let tp = ThroughputReport::new((state.tokens_seen - tokens_at_start) as f64, secs, 1)?;
        self.report.push(Record::Throughput {
            stage: st.stage,
            report: tp,
            gt_per_hour: tp.gt_per_hour(),
            nmt_per_hour: tp.nmt_per_hour(),
        });
        state.stage_index += 1;
        state.stage_tokens = 0;
        state.stream = None;
        Ok(state)
    }

    /// Runs every remaining stage, or until the stop step.
    pub fn run(&mut self, mut state: TrainState) -> Result<TrainState, TrainError> {
        while !self.is_complete(&state) {
            let k = state.stage_index;
            state = self.run_stage(state, k)?;
            if self.stop_after.is_some_and(|s| state.step >= s) && !self.is_complete(&state) && state.stream.is_some() {
                break;
            }
        }
        Ok(state)
    }
}

/// Full run with an in-memory checkpoint store.
pub fn run_curriculum(plan: &CurriculumPlan, seed: u64) -> Result<(TrainState, RunReport), TrainError> {
    let plan = CurriculumPlan {
        seed,
        ..plan.clone()
    };
    let mut t = Trainer::new(plan, CheckpointStore::memory())?;
    let state = t.fresh_state()?;
    let state = t.run(state)?;
    Ok((state, t.report))
}
