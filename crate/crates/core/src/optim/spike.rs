use serde::{Deserialize, Serialize};

use super::OptimError;

/// Loss-spike detection and recovery settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikePolicy {
    /// Number of preceding losses whose median is the reference.
    pub window: usize,
    /// A loss above `threshold * median` is a spike.
    pub threshold: f64,
    /// Fewer preceding losses than this never trigger a jump spike.
    pub min_history: usize,
    /// Tokens skipped in the data stream after a rollback.
    pub skip_tokens: u64,
}

impl Default for SpikePolicy {
    fn default() -> Self {
        Self {
            window: 50,
            threshold: 2.0,
            min_history: 5,
            skip_tokens: 0,
        }
    }
}

impl SpikePolicy {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.window == 0 || !(self.threshold > 0.0) {
            return Err(OptimError::Config(format!("invalid spike policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SpikeKind {
    NonFinite,
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub kind: SpikeKind,
    pub loss: f64,
    pub median: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Checks the last entry of `history` against the median of the finite
/// losses in the preceding window.
pub fn spike_detect(history: &[f64], policy: &SpikePolicy) -> Option<SpikeEvent> {
    let (&loss, before) = history.split_last()?;
    if !loss.is_finite() {
        return Some(SpikeEvent {
            kind: SpikeKind::NonFinite,
            loss,
            median: None,
        });
    }
    let start = before.len().saturating_sub(policy.window);
    let window: Vec<f64> = before[start..].iter().copied().filter(|x| x.is_finite()).collect();
    if window.len() < policy.min_history.max(1) {
        return None;
    }
    let med = median(&window)?;
    (loss > policy.threshold * med).then_some(SpikeEvent {
        kind: SpikeKind::Jump,
        loss,
        median: Some(med),
    })
}
