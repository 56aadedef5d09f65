use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::OptimError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay to norm gains/biases and linear biases.
    #[serde(default)]
    pub decay_norms: bool,
    /// Apply weight decay to the input embedding.
    #[serde(default)]
    pub decay_embeddings: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            decay_norms: false,
            decay_embeddings: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = 0.0 < self.beta1
            && self.beta1 < self.beta2
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::Config(format!(
                "need 0 < beta1 < beta2 < 1, eps > 0, weight_decay >= 0; got {self:?}"
            )))
        }
    }

    pub fn decays(&self, name: &str) -> bool {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let is_norm_or_bias = leaf == "gain" || leaf == "bias" || leaf.starts_with("b_");
        if is_norm_or_bias {
            return self.decay_norms;
        }
        if name == crate::model::EMBED {
            return self.decay_embeddings;
        }
        true
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T> Default for AdamState<T> {
    fn default() -> Self {
        Self {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        let eq = |a: &BTreeMap<String, Tensor<T>>, b: &BTreeMap<String, Tensor<T>>| {
            a.len() == b.len() && a.iter().zip(b).all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
        };
        self.step == other.step && eq(&self.m, &other.m) && eq(&self.v, &other.v)
    }
}

/// One decoupled AdamW update with bias-corrected moments:
/// `p <- p * (1 - eta * wd)`, then `p <- p - eta * m_hat / (sqrt(v_hat) + eps)`.
///
/// Parameters without a gradient entry are left alone. Every gradient is
/// checked for finiteness before anything is modified.
pub fn adamw_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = (&'a String, &'a mut Tensor<T>)>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
    eta: f64,
) -> Result<(), OptimError> {
    if !(eta >= 0.0) {
        return Err(OptimError::Config(format!("learning rate {eta} must be >= 0")));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(OptimError::NonFiniteGradient(name.clone()));
    }
    let step = state.step + 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = T::of(1.0 - b1.powf(step as f64));
    let bc2 = T::of(1.0 - b2.powf(step as f64));
    let (b1t, b2t) = (T::of(b1), T::of(b2));
    let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (eta_t, eps) = (T::of(eta), T::of(cfg.eps));
    let decay = T::of(1.0 - eta * cfg.weight_decay);
    let mut touched = false;
    for (name, p) in params {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != p.shape() {
            return Err(OptimError::Shape {
                name: name.clone(),
                param: p.shape().to_vec(),
                grad: g.shape().to_vec(),
            });
        }
        touched = true;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let decays = cfg.decays(name) && cfg.weight_decay > 0.0;
        let pd = p.data_mut();
        for (((w, &gi), mi), vi) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            if decays {
                *w = *w * decay;
            }
            *mi = b1t * *mi + one_b1 * gi;
            *vi = b2t * *vi + one_b2 * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w - eta_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    if touched {
        state.step = step;
    }
    Ok(())
}
