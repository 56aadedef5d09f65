//! Run reports: line-delimited records, loss-curve CSV and throughput.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::optim::{SpikeKind, GT};

/// Tokens, wall time and devices with the derived rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub wall_seconds: f64,
    pub tokens: f64,
    pub devices: usize,
}

impl ThroughputReport {
    pub fn new(tokens: f64, wall_seconds: f64, devices: usize) -> Result<Self, TrainError> {
        if !(wall_seconds > 0.0) || devices == 0 || !(tokens >= 0.0) {
            return Err(TrainError::Plan(format!(
                "throughput needs positive wall time and devices, got {wall_seconds} s on {devices}"
            )));
        }
        Ok(Self {
            wall_seconds,
            tokens,
            devices,
        })
    }

    /// Builds the report a measured `gt_per_hour` rate implies for one hour.
    pub fn from_rate(gt_per_hour: f64, devices: usize) -> Result<Self, TrainError> {
        Self::new(gt_per_hour * GT, 3600.0, devices)
    }

    pub fn gt_per_hour(&self) -> f64 {
        self.tokens / GT / (self.wall_seconds / 3600.0)
    }

    /// Millions of tokens per hour per device.
    pub fn nmt_per_hour(&self) -> f64 {
        self.gt_per_hour() * 1000.0 / self.devices as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    StageStart {
        stage: u8,
        tokens_seen: u64,
        context_length: usize,
        rope_base: f64,
        tied_embeddings: bool,
        params_added: usize,
        params: usize,
    },
    Step {
        step: u64,
        stage: u8,
        tokens_seen: u64,
        batch_tokens: u64,
        batch_size: usize,
        loss: f64,
        lr: f64,
        eps: f64,
        temperature: f64,
    },
    Doubling {
        tokens_seen: u64,
        from: usize,
        to: usize,
    },
    Eval {
        stage: u8,
        tokens_seen: u64,
        perplexity: f64,
    },
    Spike {
        step: u64,
        tokens_seen: u64,
        spike: SpikeKind,
        loss: Option<f64>,
        median: Option<f64>,
        spikes: u64,
    },
    Rollback {
        checkpoint: u64,
        tokens_seen: u64,
        skipped: u64,
    },
    Checkpoint {
        id: u64,
        step: u64,
        tokens_seen: u64,
    },
    StageEnd {
        stage: u8,
        tokens_seen: u64,
        stage_tokens: u64,
    },
    /// Wall-clock dependent; excluded from replay comparisons.
    Throughput {
        stage: u8,
        report: ThroughputReport,
        gt_per_hour: f64,
        nmt_per_hour: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub records: Vec<Record>,
}

impl RunReport {
    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    /// Every record that does not depend on wall-clock time.
    pub fn deterministic(&self) -> Vec<&Record> {
        self.records
            .iter()
            .filter(|r| !matches!(r, Record::Throughput { .. }))
            .collect()
    }

    pub fn steps(&self) -> impl Iterator<Item = (u64, u8, u64, f64)> + '_ {
        self.records.iter().filter_map(|r| match *r {
            Record::Step {
                step,
                stage,
                tokens_seen,
                loss,
                ..
            } => Some((step, stage, tokens_seen, loss)),
            _ => None,
        })
    }

    pub fn evals(&self) -> Vec<(u8, u64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match *r {
                Record::Eval {
                    stage,
                    tokens_seen,
                    perplexity,
                } => Some((stage, tokens_seen, perplexity)),
                _ => None,
            })
            .collect()
    }

    pub fn spike_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(r, Record::Spike { .. }))
            .count()
    }

    pub fn to_jsonl(&self) -> Result<String, TrainError> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TrainError> {
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            records.push(serde_json::from_str(line)?);
        }
        Ok(Self { records })
    }

    pub fn append_to(&self, path: &Path) -> Result<(), TrainError> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    /// Loss against tokens with the step's batch size and a marker on the
    /// first step after each batch doubling, plus the cumulative spike count.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,stage,tokens_seen,loss,lr,batch_size,doubling,spikes\n");
        let mut doubled = false;
        let mut spikes = 0u64;
        for r in &self.records {
            match *r {
                Record::Doubling { .. } => doubled = true,
                Record::Spike { spikes: n, .. } => spikes = n,
                Record::Step {
                    step,
                    stage,
                    tokens_seen,
                    loss,
                    lr,
                    batch_size,
                    ..
                } => {
                    let _ = writeln!(
                        out,
                        "{step},{stage},{tokens_seen},{loss},{lr},{batch_size},{},{spikes}",
                        u8::from(doubled)
                    );
                    doubled = false;
                }
                _ => {}
            }
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from("stage,tokens_seen,perplexity\n");
        for (stage, tokens, ppl) in self.evals() {
            let _ = writeln!(out, "{stage},{tokens},{ppl}");
        }
        out
    }
}
