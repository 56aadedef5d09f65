use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use desklm_core::data::io::{read_jsonl, write_jsonl, write_shard, TreeRecord};
use desklm_core::data::{
    filter_corpus, pack_sequences, split_long_samples, ByteTokenizer, Document, RawDoc, RuleRegistry, Token,
    Tokenizer,
};
use desklm_core::model::Model;
use desklm_core::par::{self, Exec};
use desklm_core::train::runner::PAD;
use desklm_core::train::{
    desk_model, load_checkpoint, load_model, save_model, CheckpointStore, CurriculumPlan, Record, RunReport,
    TrainError, TrainState, Trainer,
};
use desklm_core::vlm::{
    desk_vision, synthetic_fixtures, vlm_train_stage, GridPolicy, Image, VlmExample, VlmModel, VlmStage, VlmState,
    VlmTrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;
use crate::{plot, FilterArgs, FlattenArgs, PackArgs, ReportArgs, ResumeArgs, TrainArgs, VlmTrainArgs};

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{}: no such file", p.display())))
    }
}

fn require_dir(p: &Path) -> Result<(), CliError> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{}: no such directory", p.display())))
    }
}

fn default_out(kind: &str, seed: u64) -> PathBuf {
    let root = std::env::var_os("DESKLM_CACHE_DIR").map_or_else(|| PathBuf::from(".desklm"), PathBuf::from);
    root.join(format!("{kind}-seed{seed}"))
}

pub fn filter(a: &FilterArgs) -> Result<(), CliError> {
    require_file(&a.input)?;
    let mut registry = RuleRegistry::builtin();
    if let Some(dir) = &a.rules {
        require_dir(dir)?;
        registry.load_dir(dir)?;
    }
    let docs: Vec<RawDoc> = read_jsonl(&a.input)?;
    let (kept, report) = filter_corpus(&docs, &registry, Exec::Parallel);
    write_jsonl(&a.output, &kept)?;
    let csv = report.to_csv();
    match &a.report {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    eprintln!(
        "kept {} of {} documents ({} in languages without rules)",
        kept.len(),
        docs.len(),
        report.unknown_language
    );
    Ok(())
}

#[derive(Serialize)]
struct ThreadOut<'a> {
    tree: &'a str,
    source: &'a str,
    path: Vec<u64>,
    tokens: Vec<Token>,
    loss_mask: Vec<bool>,
    truncated_tokens: usize,
}

/// Token totals of one source; `overhead = thread_tokens / unique_tokens - 1`.
#[derive(Debug, Default, Serialize)]
struct SourceSummary {
    trees: usize,
    threads: usize,
    unique_tokens: usize,
    thread_tokens: usize,
    overhead: f64,
}

impl SourceSummary {
    fn finish(&mut self) {
        self.overhead = if self.unique_tokens == 0 {
            0.0
        } else {
            self.thread_tokens as f64 / self.unique_tokens as f64 - 1.0
        };
    }
}

pub fn flatten(a: &FlattenArgs) -> Result<(), CliError> {
    require_file(&a.input)?;
    let records: Vec<TreeRecord> = read_jsonl(&a.input)?;
    let tok = ByteTokenizer;
    let flat = par::map(Exec::Parallel, &records, |rec| {
        let tree = rec.tree.tokenize(&tok);
        let threads = match a.max_len {
            Some(m) => tree.flatten_limited(m),
            None => tree.flatten(),
        };
        threads.map(|t| (tree, t))
    });
    let mut out = Vec::new();
    let mut sources: BTreeMap<String, SourceSummary> = BTreeMap::new();
    let mut total = SourceSummary::default();
    for (line, (rec, res)) in records.iter().zip(flat).enumerate() {
        let (tree, threads) = res.map_err(|e| CliError::Validation(format!("tree at line {}: {e}", line + 1)))?;
        let source = if rec.source.is_empty() { "default" } else { rec.source.as_str() };
        let unique: usize = tree.nodes.iter().map(|n| n.tokens.len()).sum();
        let full: usize = threads.iter().map(|t| t.tokens.len() + t.truncated_tokens).sum();
        for s in [sources.entry(source.to_string()).or_default(), &mut total] {
            s.trees += 1;
            s.threads += threads.len();
            s.unique_tokens += unique;
            s.thread_tokens += full;
        }
        out.extend(threads.into_iter().map(|t| ThreadOut {
            tree: &rec.id,
            source,
            path: t.path,
            tokens: t.tokens,
            loss_mask: t.loss_mask,
            truncated_tokens: t.truncated_tokens,
        }));
    }
    sources.values_mut().for_each(SourceSummary::finish);
    total.finish();
    write_jsonl(&a.output, &out)?;
    let summary = serde_json::to_string_pretty(&json!({ "sources": sources, "total": total }))?;
    match &a.summary {
        Some(p) => fs::write(p, summary + "\n")?,
        None => println!("{summary}"),
    }
    Ok(())
}

#[derive(Deserialize)]
struct DocIn {
    #[serde(default)]
    tokens: Option<Vec<Token>>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    source: String,
}

pub fn pack(a: &PackArgs) -> Result<(), CliError> {
    require_file(&a.input)?;
    if a.context == 0 {
        return Err(CliError::Validation("--context must be positive".into()));
    }
    let records: Vec<DocIn> = read_jsonl(&a.input)?;
    let mut names: Vec<String> = Vec::new();
    let mut docs = Vec::new();
    for (i, r) in records.into_iter().enumerate() {
        let tokens = match (r.tokens, r.text) {
            (Some(t), None) => t,
            (None, Some(s)) => ByteTokenizer.encode(&s),
            _ => {
                return Err(CliError::Validation(format!(
                    "record {}: exactly one of `tokens` and `text` is required",
                    i + 1
                )))
            }
        };
        let source = match names.iter().position(|n| *n == r.source) {
            Some(k) => k,
            None => {
                names.push(r.source);
                names.len() - 1
            }
        };
        let source = u16::try_from(source).map_err(|_| CliError::Validation("too many sources".into()))?;
        docs.extend(split_long_samples(&Document::new(tokens, source), a.context)?);
    }
    let samples = pack_sequences(&docs, a.context, PAD)?;
    write_shard(&a.output, &samples, &names)?;
    let used: usize = samples.iter().map(|s| s.used()).sum();
    eprintln!(
        "{} documents in {} samples of {} tokens ({:.1}% filled)",
        docs.len(),
        samples.len(),
        a.context,
        100.0 * used as f64 / (samples.len() * a.context).max(1) as f64
    );
    Ok(())
}

/// Runs to completion (saving `model/`) or to the stop step (saving a
/// `snapshot-*` directory), appending records to `report.jsonl` either way.
fn drive(mut t: Trainer, state: TrainState, run: &Path) -> Result<(), CliError> {
    let result = t.run(state);
    t.report.append_to(&run.join("report.jsonl"))?;
    let state = result?;
    if t.is_complete(&state) {
        save_model(&state.model, &run.join("model"))?;
        let ppl = t.report.evals().last().map(|e| e.2);
        println!(
            "done: {} steps, {} tokens, {} spikes, final eval perplexity {}",
            state.step,
            state.tokens_seen,
            state.spikes,
            ppl.map_or("n/a".into(), |p| format!("{p:.4}"))
        );
    } else {
        let dir = run.join(format!("snapshot-{:06}", state.step));
        state.to_archive(&t.plan)?.write(&dir).map_err(TrainError::from)?;
        println!("stopped after step {}; resume with --from {}", state.step, dir.display());
    }
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    require_file(&a.plan)?;
    let mut plan = CurriculumPlan::load(&a.plan)?;
    if let Some(s) = a.scale {
        plan.scaling.tokens = s;
    }
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    plan.resolve()?;
    let out = a.out.clone().unwrap_or_else(|| default_out("train", plan.seed));
    if out.join("report.jsonl").exists() {
        return Err(CliError::Validation(format!(
            "{} already holds a run; use `resume` or another --out",
            out.display()
        )));
    }
    fs::create_dir_all(&out)?;
    fs::write(out.join("plan.toml"), plan.to_toml()?)?;
    let store = CheckpointStore::dir(out.join("checkpoints"))?;
    let mut t = Trainer::new(plan, store)?;
    t.stop_after(a.stop_after_steps);
    let state = t.fresh_state()?;
    drive(t, state, &out)
}

pub fn resume(a: &ResumeArgs) -> Result<(), CliError> {
    require_dir(&a.from)?;
    let (state, plan) = load_checkpoint(&a.from)?;
    let parent = a.from.parent().unwrap_or(Path::new("."));
    let run = if parent.file_name().is_some_and(|n| n == "checkpoints") {
        parent.parent().unwrap_or(Path::new("."))
    } else {
        parent
    };
    let store = CheckpointStore::dir(run.join("checkpoints"))?;
    let latest = store.latest()?;
    if latest != state.parent {
        return Err(CliError::Validation(format!(
            "{} descends from checkpoint {:?} but the run's latest checkpoint is {:?}",
            a.from.display(),
            state.parent,
            latest
        )));
    }
    let mut t = Trainer::new(plan, store)?;
    if t.is_complete(&state) {
        return Err(CliError::Validation("that run is already complete".into()));
    }
    t.stop_after(a.stop_after_steps);
    drive(t, state, run)
}

#[derive(Deserialize)]
struct TurnIn {
    instruction: Vec<usize>,
    response: Vec<usize>,
}

/// `{image?: "x.ppm", turns: [{instruction: [..], response: [..]}]}`; image
/// paths are relative to the data file.
#[derive(Deserialize)]
struct VlmRecordIn {
    #[serde(default)]
    image: Option<PathBuf>,
    turns: Vec<TurnIn>,
}

fn read_vlm_data(path: &Path) -> Result<Vec<VlmExample>, CliError> {
    require_file(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let records: Vec<VlmRecordIn> = read_jsonl(path)?;
    records
        .into_iter()
        .map(|r| {
            let image = match r.image {
                Some(p) => {
                    let p = base.join(p);
                    require_file(&p)?;
                    Some(Image::from_ppm(&fs::read(&p)?)?)
                }
                None => None,
            };
            Ok(VlmExample {
                image,
                turns: r.turns.into_iter().map(|t| (t.instruction, t.response)).collect(),
            })
        })
        .collect()
}

pub fn vlm_train(a: &VlmTrainArgs) -> Result<(), CliError> {
    let stage: VlmStage = a.stage.parse()?;
    let model = if let Some(from) = &a.from {
        let dir = if from.join("vlm").is_dir() { from.join("vlm") } else { from.clone() };
        require_dir(&dir)?;
        VlmModel::load(&dir)?.0
    } else {
        let llm = match &a.llm {
            Some(p) => {
                require_dir(p)?;
                load_model(p)?
            }
            None => {
                let mut cfg = desk_model();
                cfg.context_length = 256;
                Model::init(cfg, a.seed, 0.02).map_err(TrainError::from)?
            }
        };
        VlmModel::new(llm, desk_vision(), GridPolicy::default(), a.seed)?
    };
    let data = match &a.data {
        Some(p) => read_vlm_data(p)?,
        None => synthetic_fixtures(stage, 32, model.llm.config.vocab_size, model.vision.base, a.seed),
    };
    let cfg = VlmTrainConfig {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        ..VlmTrainConfig::default()
    };
    let mut state = VlmState::new(model);
    let outcome = vlm_train_stage(stage, &data, &mut state, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| default_out("vlm", a.seed));
    fs::create_dir_all(&out)?;
    state.model.save(&out.join("vlm"), json!({ "stage": stage, "steps": state.step, "seed": a.seed }))?;
    let (b, e) = (&outcome.before, &outcome.after);
    let report = json!({
        "stage": stage,
        "steps": state.step,
        "losses": outcome.losses,
        "before": { "llm": b.llm, "projector": b.projector, "encoder": b.encoder },
        "after": { "llm": e.llm, "projector": e.projector, "encoder": e.encoder },
    });
    fs::write(out.join("vlm_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "{} {} steps: loss {:.4} -> {:.4}; encoder {}, llm {}, projector {}",
        a.stage,
        state.step,
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        if b.encoder == e.encoder { "unchanged" } else { "CHANGED" },
        if b.llm == e.llm { "unchanged" } else { "updated" },
        if b.projector == e.projector { "unchanged" } else { "updated" },
    );
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    let path = a.run.join("report.jsonl");
    require_file(&path)?;
    let rep = RunReport::from_jsonl(&fs::read_to_string(&path)?)?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    fs::create_dir_all(&out)?;
    fs::write(out.join("loss.csv"), rep.loss_csv())?;
    fs::write(out.join("eval.csv"), rep.eval_csv())?;
    fs::write(out.join("loss.svg"), plot::loss_svg(&rep))?;
    let doublings = rep.records.iter().filter(|r| matches!(r, Record::Doubling { .. })).count();
    println!(
        "{} steps, {} batch doublings, {} spikes; wrote loss.csv, eval.csv, loss.svg to {}",
        rep.steps().count(),
        doublings,
        rep.spike_count(),
        out.display()
    );
    Ok(())
}
