//! Loss and gradients over a batch of packed examples, and held-out
//! perplexity.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::TrainError;
use crate::data::LmExample;
use crate::model::{build_lm, Layout, Model};
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct BatchGrads<T> {
    /// Mean loss per unmasked target, z-loss included.
    pub loss: f64,
    pub ce: f64,
    pub targets: usize,
    pub grads: BTreeMap<String, Tensor<T>>,
}

/// Rows of several examples stacked into one sequence. Segment ids are
/// renumbered so no two examples share one, which keeps attention and
/// positions per document.
fn stack(examples: &[&LmExample]) -> (Vec<usize>, Vec<usize>, Vec<bool>, Vec<u32>) {
    let n: usize = examples.iter().map(|e| e.inputs.len()).sum();
    let (mut inputs, mut targets, mut mask, mut segs) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut next = 0u32;
    for e in examples {
        let mut prev = None;
        for i in 0..e.inputs.len() {
            if prev != Some(e.segments[i]) {
                prev = Some(e.segments[i]);
                next += 1;
            }
            segs.push(next);
        }
        inputs.extend_from_slice(&e.inputs);
        targets.extend_from_slice(&e.targets);
        mask.extend_from_slice(&e.target_mask);
    }
    (inputs, targets, mask, segs)
}

/// Loss and gradients of one micro-batch, scaled by `1 / normalizer`.
fn micro_batch<T: Scalar>(
    model: &Model<T>,
    examples: &[&LmExample],
    normalizer: f64,
    z_loss: f64,
    want_grads: bool,
) -> Result<Option<(f64, f64, BTreeMap<String, Tensor<T>>)>, TrainError> {
    let (inputs, targets, mask, segs) = stack(examples);
    if !mask.iter().any(|&m| m) {
        return Ok(None);
    }
    let layout = Layout::from_segments(&segs)?;
    let mut g = Graph::new();
    let lm = build_lm(&mut g, &model.config, None, &inputs, &layout, &|_| want_grads)?;
    let mask: Arc<[T]> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    let loss = g.lm_loss(lm.logits, Arc::from(targets), mask, Some(T::of(normalizer)), T::of(z_loss))?;
    g.forward(model)?;
    let (ce, z) = g.loss_parts(loss)?;
    let grads = if want_grads {
        g.backward_scalar(loss)?.into_map()
    } else {
        BTreeMap::new()
    };
    Ok(Some((ce.f64() + z.f64(), ce.f64(), grads)))
}

/// Mean loss over every unmasked target of `examples` and its gradient,
/// accumulated over micro-batches of `micro` examples. With `micro >=
/// examples.len()` this is a single pass over the whole batch.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    examples: &[LmExample],
    micro: usize,
    z_loss: f64,
) -> Result<BatchGrads<T>, TrainError> {
    let targets: usize = examples.iter().map(|e| e.target_mask.iter().filter(|&&m| m).count()).sum();
    let mut out = BatchGrads {
        loss: 0.0,
        ce: 0.0,
        targets,
        grads: BTreeMap::new(),
    };
    if targets == 0 {
        return Ok(out);
    }
    let refs: Vec<&LmExample> = examples.iter().collect();
    for chunk in refs.chunks(micro.max(1)) {
        let Some((loss, ce, grads)) = micro_batch(model, chunk, targets as f64, z_loss, true)? else {
            continue;
        };
        out.loss += loss;
        out.ce += ce;
        for (k, g) in grads {
            match out.grads.get_mut(&k) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    out.grads.insert(k, g);
                }
            }
        }
    }
    Ok(out)
}

/// `exp` of the mean cross-entropy over every unmasked target.
pub fn perplexity<T: Scalar>(model: &Model<T>, examples: &[LmExample], micro: usize) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    let refs: Vec<&LmExample> = examples.iter().collect();
    for chunk in refs.chunks(micro.max(1)) {
        let n: usize = chunk.iter().map(|e| e.target_mask.iter().filter(|&&m| m).count()).sum();
        if let Some((_, ce, _)) = micro_batch(model, chunk, 1.0, 0.0, false)? {
            total += ce;
            count += n;
        }
    }
    if count == 0 {
        return Err(TrainError::Plan("evaluation set has no targets".into()));
    }
    Ok((total / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    fn example(tokens: &[usize], seg_break: usize) -> LmExample {
        let n = tokens.len() - 1;
        let segments: Vec<u32> = (0..n).map(|i| u32::from(i >= seg_break)).collect();
        LmExample {
            inputs: tokens[..n].to_vec(),
            targets: tokens[1..].to_vec(),
            target_mask: (0..n).map(|i| i + 1 != seg_break).collect(),
            segments,
        }
    }

    #[test]
    fn stacked_micro_batches_match_single_examples() {
        let model: Model<f64> = Model::init(presets::toy(), 1, 0.2).unwrap();
        let a = example(&[3, 9, 4, 1, 7, 7, 2], 3);
        let b = example(&[5, 6, 8, 8, 1], 10);
        let both = batch_gradients(&model, &[a.clone(), b.clone()], 2, 1e-4).unwrap();
        let split = batch_gradients(&model, &[a, b], 1, 1e-4).unwrap();
        assert!((both.loss - split.loss).abs() < 1e-12);
        for (k, g) in &both.grads {
            assert!(g.max_abs_diff(&split.grads[k]) < 1e-12, "{k}");
        }
    }
}
