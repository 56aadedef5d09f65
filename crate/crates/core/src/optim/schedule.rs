//! Token-indexed schedules. All token positions are raw token counts (not GT)
//! so the same code serves the reference plan and scaled-down desk plans.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::OptimError;

/// One gigatoken.
pub const GT: f64 = 1e9;

/// Linear warmup to `eta_max`, cosine down to `eta_min` at
/// `cosine_end_tokens`, then `constant_eta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_tokens: f64,
    pub eta_max: f64,
    pub eta_min: f64,
    pub cosine_end_tokens: f64,
    pub constant_eta: f64,
}

impl LrSchedule {
    pub fn reference() -> Self {
        Self {
            warmup_tokens: 4.0 * GT,
            eta_max: 3.7e-4,
            eta_min: 1.89e-5,
            cosine_end_tokens: 4500.0 * GT,
            constant_eta: 1.89e-5,
        }
    }

    /// Token positions multiplied by `factor`; rates unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            warmup_tokens: self.warmup_tokens * factor,
            cosine_end_tokens: self.cosine_end_tokens * factor,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.warmup_tokens >= 0.0
            && self.cosine_end_tokens > self.warmup_tokens
            && 0.0 <= self.eta_min
            && self.eta_min <= self.eta_max
            && self.constant_eta >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    pub fn lr_at(&self, tokens_seen: f64) -> f64 {
        let t = tokens_seen.max(0.0);
        if t <= self.warmup_tokens {
            if self.warmup_tokens == 0.0 {
                return self.eta_max;
            }
            return self.eta_max * t / self.warmup_tokens;
        }
        if t <= self.cosine_end_tokens {
            let frac = (t - self.warmup_tokens) / (self.cosine_end_tokens - self.warmup_tokens);
            return self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1.0 + (PI * frac).cos());
        }
        self.constant_eta
    }
}

/// Batch size as a step function of tokens seen. `steps[i] = (from_tokens,
/// samples)`; the first step starts at 0 and every later size doubles the
/// previous one. Right-continuous: at a threshold the new size applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub steps: Vec<(f64, usize)>,
}

impl BatchSchedule {
    pub fn constant(samples: usize) -> Self {
        Self {
            steps: vec![(0.0, samples)],
        }
    }

    /// 2048 samples doubling four times to 32768. Only the first doubling
    /// position is known; the others are spread over the remaining stage.
    pub fn reference() -> Self {
        Self::doublings(2048, &[470.0 * GT, 1150.0 * GT, 2000.0 * GT, 3000.0 * GT])
    }

    pub fn doublings(initial: usize, thresholds: &[f64]) -> Self {
        let mut steps = vec![(0.0, initial)];
        for (i, &t) in thresholds.iter().enumerate() {
            steps.push((t, initial << (i + 1)));
        }
        Self { steps }
    }

    /// Thresholds multiplied by `token_factor`, sizes divided by `size_divisor`.
    pub fn scaled(&self, token_factor: f64, size_divisor: usize) -> Self {
        Self {
            steps: self
                .steps
                .iter()
                .map(|&(t, b)| (t * token_factor, (b / size_divisor).max(1)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let err = |m: String| Err(OptimError::Config(m));
        let Some(&(first, b0)) = self.steps.first() else {
            return err("empty batch schedule".into());
        };
        if first != 0.0 || b0 == 0 {
            return err(format!("batch schedule must start at 0 with a positive size, got ({first}, {b0})"));
        }
        for w in self.steps.windows(2) {
            if !(w[1].0 > w[0].0) {
                return err(format!("thresholds not increasing: {} then {}", w[0].0, w[1].0));
            }
            if w[1].1 != 2 * w[0].1 {
                return err(format!("{} is not double {}", w[1].1, w[0].1));
            }
        }
        Ok(())
    }

    pub fn batch_size_at(&self, tokens_seen: f64) -> usize {
        self.steps
            .iter()
            .take_while(|&&(t, _)| t <= tokens_seen)
            .last()
            .map_or(self.steps[0].1, |&(_, b)| b)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.1).collect()
    }

    /// Token positions where the size doubles.
    pub fn doubling_points(&self) -> Vec<f64> {
        self.steps.iter().skip(1).map(|s| s.0).collect()
    }
}

/// Adam epsilon with an optional switch at a token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsSchedule {
    pub initial: f64,
    pub switch_at_tokens: Option<f64>,
    pub after: f64,
}

impl EpsSchedule {
    pub fn reference() -> Self {
        Self {
            initial: 1e-8,
            switch_at_tokens: Some(3500.0 * GT),
            after: 1e-7,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            switch_at_tokens: self.switch_at_tokens.map(|t| t * factor),
            ..self.clone()
        }
    }

    pub fn eps_at(&self, tokens_seen: f64) -> f64 {
        match self.switch_at_tokens {
            Some(t) if tokens_seen >= t => self.after,
            _ => self.initial,
        }
    }
}

/// SGD noise temperature `eta / sqrt(B)`.
pub fn noise_temperature(eta: f64, batch: usize) -> f64 {
    assert!(batch > 0, "batch size must be positive");
    eta / (batch as f64).sqrt()
}
