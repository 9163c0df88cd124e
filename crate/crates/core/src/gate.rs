//! Learnable channel-wise dropout.
//!
//! A channel with pruning parameter `rho` is kept with probability
//! `p = sigmoid(rho)`. During training the hard indicator `[x < p]` on a
//! uniform draw `x` is smoothed: the separation point is split into a gap
//! `[x_lo, x_hi]` inside which the scaling factor falls linearly from 1
//! to 0. With `epsilon = 0` the gap closes and the factor is exactly
//! Bernoulli(p).
//!
//! Note on orientation: the factor is *decreasing* in `x`, which is what
//! makes `P(h = 1) -> p` in the hard limit. The gradient w.r.t. the
//! retention probability is then estimated as `-sum_n dL/dx`.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::real::Real;
use crate::rng::StreamKey;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Smoothing width; 0 gives hard binary gating.
    pub epsilon: Real,
    /// Relative gap floor at saturated `rho`.
    pub kappa: Real,
    pub rho_max: Real,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            kappa: 0.04,
            rho_max: 12.0,
        }
    }
}

impl GateConfig {
    pub fn hard(self) -> Self {
        Self { epsilon: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("gate epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("gate kappa {} outside (0, 1)", self.kappa)));
        }
        if !(self.rho_max > 0.0) {
            return Err(Error::Config(format!("rho_max {} must be positive", self.rho_max)));
        }
        Ok(())
    }
}

pub fn sigmoid(t: Real) -> Real {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `d sigmoid / dt`.
pub fn sigmoid_prime(t: Real) -> Real {
    let s = sigmoid(t);
    s * (1.0 - s)
}

/// Edges of the interpolation gap for a channel with parameter `rho`.
pub fn gate_boundaries(rho: Real, cfg: &GateConfig) -> (Real, Real) {
    let ek = cfg.epsilon * cfg.kappa;
    let lo = (1.0 - ek) * sigmoid(rho - cfg.epsilon);
    let hi = ek + (1.0 - ek) * sigmoid(rho + cfg.epsilon);
    (lo, hi)
}

fn value_in(x: Real, lo: Real, hi: Real) -> Real {
    if x >= hi {
        0.0
    } else if x <= lo {
        1.0
    } else {
        (hi - x) / (hi - lo)
    }
}

fn slope_in(x: Real, lo: Real, hi: Real) -> Real {
    if x > lo && x < hi {
        -1.0 / (hi - lo)
    } else {
        0.0
    }
}

/// Channel scaling factor `h(rho, x, epsilon)` in `[0, 1]`.
pub fn gate_value(rho: Real, x: Real, cfg: &GateConfig) -> Real {
    let (lo, hi) = gate_boundaries(rho, cfg);
    value_in(x, lo, hi)
}

/// `dh/dx`: `-1 / (x_hi - x_lo)` strictly inside the gap, 0 elsewhere.
pub fn gate_slope(rho: Real, x: Real, cfg: &GateConfig) -> Real {
    let (lo, hi) = gate_boundaries(rho, cfg);
    slope_in(x, lo, hi)
}

/// Noise and factors drawn for one gate on one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSample {
    pub batch: usize,
    pub channels: usize,
    /// Uniform draws, `batch * channels`, sample-major.
    pub x: Vec<Real>,
    pub h: Vec<Real>,
    pub lo: Vec<Real>,
    pub hi: Vec<Real>,
}

impl GateSample {
    /// Factors for explicit noise values.
    pub fn from_noise(rho: &[Real], batch: usize, x: Vec<Real>, cfg: &GateConfig) -> Result<Self> {
        let channels = rho.len();
        if x.len() != batch * channels {
            return Err(mismatch("gate", "noise values vs batch*channels", batch * channels, x.len()));
        }
        let (lo, hi): (Vec<Real>, Vec<Real>) = rho.iter().map(|&r| gate_boundaries(r, cfg)).unzip();
        let h = x
            .iter()
            .enumerate()
            .map(|(i, &xv)| {
                let c = i % channels;
                value_in(xv, lo[c], hi[c])
            })
            .collect();
        Ok(Self {
            batch,
            channels,
            x,
            h,
            lo,
            hi,
        })
    }

    /// Factors for the deterministic inference mask: `h = [rho > 0]`.
    pub fn from_sign(rho: &[Real], batch: usize) -> Self {
        let channels = rho.len();
        let h: Vec<Real> = (0..batch * channels)
            .map(|i| if rho[i % channels] > 0.0 { 1.0 } else { 0.0 })
            .collect();
        Self {
            batch,
            channels,
            x: vec![0.5; batch * channels],
            lo: vec![0.5; channels],
            hi: vec![0.5; channels],
            h,
        }
    }

    /// Fraction of draws whose factor is strictly between 0 and 1.
    pub fn fractional_rate(&self) -> Real {
        let n = self.h.iter().filter(|&&h| h > 0.0 && h < 1.0).count();
        n as Real / self.h.len().max(1) as Real
    }
}

/// Draws counter-keyed noise for `(iteration, site)` and applies the gate.
pub fn gate_forward(
    activations: &Tensor,
    rho: &[Real],
    cfg: &GateConfig,
    key: &StreamKey,
    iteration: u64,
    site: usize,
) -> Result<(Tensor, GateSample)> {
    let batch = activations.batch();
    check_channels(activations, rho.len())?;
    let x = key.gate_noise(iteration, site, batch * rho.len());
    let sample = GateSample::from_noise(rho, batch, x, cfg)?;
    let out = apply(activations, &sample)?;
    Ok((out, sample))
}

fn check_channels(t: &Tensor, channels: usize) -> Result<()> {
    let got = t.shape().get(1).copied().unwrap_or(0);
    if t.ndim() < 2 || got != channels {
        return Err(mismatch("gate", "activation channels vs site channels", channels, got));
    }
    Ok(())
}

/// `out[n, c, ...] = h[n, c] * a[n, c, ...]`.
pub fn apply(activations: &Tensor, sample: &GateSample) -> Result<Tensor> {
    check_channels(activations, sample.channels)?;
    if activations.batch() != sample.batch {
        return Err(mismatch("gate", "activation batch vs sample batch", sample.batch, activations.batch()));
    }
    let spatial = activations.per_sample() / sample.channels.max(1);
    let mut out = activations.clone();
    for (block, &h) in out.data_mut().chunks_mut(spatial.max(1)).zip(&sample.h) {
        for v in block {
            *v *= h;
        }
    }
    Ok(out)
}

/// Returns `(dL/da, dL/dx)` where `dL/dx` has one entry per `(sample, channel)`.
pub fn gate_backward(upstream: &Tensor, sample: &GateSample, activations: &Tensor) -> Result<(Tensor, Vec<Real>)> {
    if upstream.shape() != activations.shape() {
        return Err(Error::BadShape {
            op: "gate backward",
            shape: upstream.shape().to_vec(),
            reason: format!("upstream does not match activations {:?}", activations.shape()),
        });
    }
    check_channels(activations, sample.channels)?;
    if activations.batch() != sample.batch {
        return Err(mismatch("gate backward", "activation batch vs sample batch", sample.batch, activations.batch()));
    }
    let spatial = (activations.per_sample() / sample.channels.max(1)).max(1);
    let mut grad = upstream.clone();
    let mut dx = vec![0.0; sample.h.len()];
    let blocks = grad
        .data_mut()
        .chunks_mut(spatial)
        .zip(activations.data().chunks(spatial));
    for (i, (g, a)) in blocks.enumerate() {
        let c = i % sample.channels;
        let slope = slope_in(sample.x[i], sample.lo[c], sample.hi[c]);
        if slope != 0.0 {
            let s: Real = g.iter().zip(a).map(|(u, v)| u * v).sum();
            dx[i] = s * slope;
        }
        let h = sample.h[i];
        for v in g {
            *v *= h;
        }
    }
    Ok((grad, dx))
}

/// Per-channel estimate of `dL0/dp`: `-sum_n dL/dx[n, c]`.
pub fn retention_gradient(dl_dx: &[Real], channels: usize) -> Vec<Real> {
    let mut out = vec![0.0; channels];
    for (i, v) in dl_dx.iter().enumerate() {
        out[i % channels] -= *v;
    }
    out
}
