//! One training step and batched evaluation of an instrumented graph.

use crate::error::{Error, Result};
use crate::gate::{retention_gradient, GateConfig};
use crate::graph::{Gating, InstrumentedGraph};
use crate::kernels::{correct_predictions, softmax_ce_forward};
use crate::real::Real;
use crate::rho::PruningSiteState;
use crate::rng::StreamKey;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Results of a stochastic forward/backward pass.
#[derive(Clone, Debug)]
pub struct TrainStep {
    pub loss: Real,
    pub grads: Vec<Tensor>,
    /// `dL0/dp` estimate per site and channel, summed over gates of a site.
    pub l0p: Vec<Vec<Real>>,
    /// Fraction of gate factors strictly between 0 and 1.
    pub fractional_rate: Real,
}

/// Forward with stochastic gates keyed by `(seed, iteration, site)`, then backward.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    graph: &InstrumentedGraph,
    params: &[Tensor],
    sites: &[PruningSiteState],
    gate_cfg: &GateConfig,
    key: &StreamKey,
    iteration: u64,
    input: Tensor,
    labels: &[usize],
) -> Result<TrainStep> {
    let mut tape = Tape::new();
    let gating = Gating::Train {
        sites,
        cfg: gate_cfg,
        key,
        iteration,
    };
    let fwd = graph.forward(&mut tape, params, input, gating)?;
    let loss_var = tape.softmax_cross_entropy(fwd.output, labels)?;
    let loss = tape.value(loss_var).item().expect("scalar loss");
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            what: "training loss".into(),
            detail: format!("{loss} at iteration {iteration}"),
        });
    }
    tape.backward(loss_var)?;
    let grads = fwd
        .params
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let mut l0p: Vec<Vec<Real>> = sites.iter().map(|s| vec![0.0; s.channels()]).collect();
    let (mut fractional, mut total) = (0usize, 0usize);
    for &(site, gate) in &fwd.gates {
        let sample = tape.gate_sample(gate).expect("gate node");
        fractional += sample.h.iter().filter(|&&h| h > 0.0 && h < 1.0).count();
        total += sample.h.len();
        if let Some(dx) = tape.gate_noise_grad(gate) {
            for (acc, g) in l0p[site].iter_mut().zip(retention_gradient(dx, sites[site].channels())) {
                *acc += g;
            }
        }
    }
    Ok(TrainStep {
        loss,
        grads,
        l0p,
        fractional_rate: fractional as Real / total.max(1) as Real,
    })
}

/// Mean loss and accuracy over a dataset, evaluated in chunks of `batch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: Real,
    pub accuracy: Real,
}

pub fn evaluate(
    graph: &InstrumentedGraph,
    params: &[Tensor],
    gating: Gating<'_>,
    inputs: &Tensor,
    labels: &[usize],
    batch: usize,
) -> Result<Evaluation> {
    let n = inputs.batch();
    if labels.len() != n {
        return Err(crate::error::mismatch("evaluate", "labels vs samples", n, labels.len()));
    }
    if n == 0 {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let logits = graph.predict(params, inputs.rows(start, end), gating)?;
        let (l, _) = softmax_ce_forward(&logits, &labels[start..end])?;
        loss += l * (end - start) as Real;
        correct += correct_predictions(&logits, &labels[start..end]);
        start = end;
    }
    Ok(Evaluation {
        loss: loss / n as Real,
        accuracy: correct as Real / n as Real,
    })
}
