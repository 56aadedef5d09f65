//! Central-difference gradient checking.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn scalar_output<T: Scalar>(
    graph: &mut Graph<T>,
    feed: &BTreeMap<String, Tensor<T>>,
    output: &str,
) -> Result<f64> {
    let id = graph.output_id(output)?;
    graph.forward(feed)?;
    Ok(graph.value(id)?.item().f64())
}

/// Max relative error between the analytic gradient of scalar output
/// `output` with respect to input `wrt` and central differences with step
/// `eps`, over every coordinate of `wrt`.
pub fn grad_check<T: Scalar>(
    graph: &mut Graph<T>,
    feed: &BTreeMap<String, Tensor<T>>,
    output: &str,
    wrt: &str,
    eps: f64,
) -> Result<f64> {
    let report = check(
        graph,
        feed,
        output,
        &[wrt.to_string()],
        &GradCheckOptions {
            eps,
            ..Default::default()
        },
    )?;
    Ok(report.max_rel_err)
}

/// Gradient check over every `requires_grad` input of the graph.
pub fn grad_check_inputs<T: Scalar>(
    graph: &mut Graph<T>,
    feed: &BTreeMap<String, Tensor<T>>,
    output: &str,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let names = graph.grad_inputs();
    check(graph, feed, output, &names, opts)
}

fn check<T: Scalar>(
    graph: &mut Graph<T>,
    feed: &BTreeMap<String, Tensor<T>>,
    output: &str,
    names: &[String],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.eps > 0.0) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            detail: format!("eps must be positive, got {}", opts.eps),
        });
    }
    let id = graph.output_id(output)?;
    if !graph.shape(id).iter().all(|&d| d == 1) {
        return Err(TensorError::NonScalar(graph.shape(id).to_vec()));
    }
    graph.forward(feed)?;
    let grads = graph.backward_scalar(id)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut feed = feed.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for name in names {
        let analytic = grads
            .get(name)
            .ok_or_else(|| TensorError::MissingInput(name.clone()))?
            .clone();
        let n = analytic.len();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let original = feed[name].data()[i];
            feed.get_mut(name).expect("fed").data_mut()[i] = T::of(original.f64() + opts.eps);
            let plus = scalar_output(graph, &feed, output)?;
            feed.get_mut(name).expect("fed").data_mut()[i] = T::of(original.f64() - opts.eps);
            let minus = scalar_output(graph, &feed, output)?;
            feed.get_mut(name).expect("fed").data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic.data()[i].f64(), numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
