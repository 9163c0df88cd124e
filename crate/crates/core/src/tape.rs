//! Reverse-mode autodiff over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already in
//! topological order and `backward` walks it once from the end. One tape
//! is built per minibatch and dropped afterwards; only first-order
//! gradients are supported.

use std::collections::HashMap;

use crate::error::{mismatch, Error, Result};
use crate::gate::{self, GateSample};
use crate::kernels::{self, ConvGeom};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Sum(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<Real>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Gate {
        input: Var,
        sample: GateSample,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// When false, forward caches needed only for backward are skipped.
    recording: bool,
    grads: Vec<Option<Tensor>>,
    gate_dx: HashMap<usize, Vec<Real>>,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            recording: true,
            ..Default::default()
        }
    }

    /// A tape for forward-only evaluation; `backward` on it is an error.
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", "operand lengths", x.len(), y.len()));
        }
        let mut out = x.clone();
        out.add_assign(y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", "operand lengths", x.len(), y.len()));
        }
        let d = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), d)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: Real) -> Var {
        let mut out = self.value(a).clone();
        out.scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, cols, geom) = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            pad,
            self.recording,
        )?;
        let cols = cols.unwrap_or_default();
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::dense_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Dense { input, weight, bias }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = kernels::relu_forward(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool_forward(self.value(input), kernel, stride)?;
        let argmax = if self.recording { argmax } else { Vec::new() };
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(input)))
    }

    /// `(N, ...)` to `(N, prod(...))`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let shape = vec![t.batch(), t.per_sample()];
        self.reshape(input, shape)
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let ref_shape = self.value(*first).shape().to_vec();
        if ref_shape.len() < 2 {
            return Err(Error::BadShape {
                op: "concat",
                shape: ref_shape,
                reason: "needs a channel axis".into(),
            });
        }
        let n = ref_shape[0];
        let spatial: usize = ref_shape[2..].iter().product();
        let mut channels = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            if s.len() != ref_shape.len() || s[0] != n || s[2..] != ref_shape[2..] {
                return Err(Error::BadShape {
                    op: "concat",
                    shape: s.to_vec(),
                    reason: format!("incompatible with {ref_shape:?}"),
                });
            }
            channels += s[1];
        }
        let mut data = Vec::with_capacity(n * channels * spatial);
        for s in 0..n {
            for v in inputs {
                let t = self.value(*v);
                let per = t.per_sample();
                data.extend_from_slice(&t.data()[s * per..(s + 1) * per]);
            }
        }
        let mut shape = ref_shape;
        shape[1] = channels;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(inputs.to_vec())))
    }

    /// Channels `[start, end)` along axis 1.
    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(input);
        let shape = t.shape().to_vec();
        if shape.len() < 2 || start >= end || end > shape[1] {
            return Err(Error::BadShape {
                op: "slice",
                shape,
                reason: format!("channel range {start}..{end} invalid"),
            });
        }
        let spatial: usize = shape[2..].iter().product();
        let per = t.per_sample();
        let mut data = Vec::with_capacity(shape[0] * (end - start) * spatial);
        for s in 0..shape[0] {
            data.extend_from_slice(&t.data()[s * per + start * spatial..s * per + end * spatial]);
        }
        let mut out_shape = shape;
        out_shape[1] = end - start;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Slice { input, start }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_ce_forward(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Multiplies channels by the sample's factors. After `backward`, the
    /// per-`(n, c)` derivative w.r.t. the gate noise is available from
    /// [`Tape::gate_noise_grad`].
    pub fn gate(&mut self, input: Var, sample: GateSample) -> Result<Var> {
        let out = gate::apply(self.value(input), &sample)?;
        Ok(self.push(out, Op::Gate { input, sample }))
    }

    pub fn gate_sample(&self, v: Var) -> Option<&GateSample> {
        match &self.nodes.get(v.0)?.op {
            Op::Gate { sample, .. } => Some(sample),
            _ => None,
        }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `dL/dx` for every `(sample, channel)` of a gate node.
    pub fn gate_noise_grad(&self, v: Var) -> Option<&[Real]> {
        self.gate_dx.get(&v.0).map(|v| v.as_slice())
    }

    /// Populates gradients of the scalar `loss` w.r.t. every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward before the loss was recorded".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, 1.0));
        self.gate_dx.clear();

        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, up.clone());
                    acc(*b, up.clone());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = zip_map(&up, vb, |g, y| g * y);
                    let gb = zip_map(&up, va, |g, x| g * x);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Scale(a, k) => {
                    let mut g = up.clone();
                    g.scale(*k);
                    acc(*a, g);
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    acc(*a, Tensor::full(&shape, up.data()[0]));
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let (dx, dw, db) = kernels::conv2d_backward(geom, cols, &self.nodes[weight.0].value, &up);
                    acc(*input, dx);
                    acc(*weight, dw);
                    acc(*bias, db);
                }
                Op::Dense { input, weight, bias } => {
                    let (dx, dw, db) =
                        kernels::dense_backward(&self.nodes[input.0].value, &self.nodes[weight.0].value, &up);
                    acc(*input, dx);
                    acc(*weight, dw);
                    acc(*bias, db);
                }
                Op::Relu(a) => acc(*a, kernels::relu_backward(&self.nodes[a.0].value, &up)),
                Op::MaxPool { input, argmax } => {
                    let shape = self.nodes[input.0].value.shape().to_vec();
                    acc(*input, kernels::maxpool_backward(&shape, argmax, &up));
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    acc(*a, up.clone().reshape(shape)?);
                }
                Op::Concat(inputs) => {
                    let n = up.batch();
                    let per_out = up.per_sample();
                    let mut offset = 0;
                    for v in inputs {
                        let t = &self.nodes[v.0].value;
                        let per = t.per_sample();
                        let mut d = Vec::with_capacity(n * per);
                        for s in 0..n {
                            d.extend_from_slice(&up.data()[s * per_out + offset..s * per_out + offset + per]);
                        }
                        offset += per;
                        acc(*v, Tensor::new(t.shape().to_vec(), d)?);
                    }
                }
                Op::Slice { input, start } => {
                    let t = &self.nodes[input.0].value;
                    let spatial: usize = t.shape()[2..].iter().product();
                    let (per_in, per_out) = (t.per_sample(), up.per_sample());
                    let mut d = Tensor::zeros(t.shape());
                    for s in 0..up.batch() {
                        let dst = s * per_in + start * spatial;
                        d.data_mut()[dst..dst + per_out]
                            .copy_from_slice(&up.data()[s * per_out..(s + 1) * per_out]);
                    }
                    acc(*input, d);
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    acc(*logits, kernels::softmax_ce_backward(probs, labels, up.data()[0]));
                }
                Op::Gate { input, sample } => {
                    let (g, dx) = gate::gate_backward(&up, sample, &self.nodes[input.0].value)?;
                    acc(*input, g);
                    self.gate_dx.insert(i, dx);
                }
            }
            grads[i] = Some(up);
        }
        self.grads = grads;
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
    let d = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), d).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[2, 3], |i| i as Real));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_half_square_is_x() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[4], |i| i as Real - 1.5));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), t.value(x));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[3], 1.5));
        let y = t.add(x, x).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn backward_usage_errors() {
        let mut t = Tape::new();
        assert!(matches!(t.backward(Var(0)), Err(Error::Usage(_))));
        let x = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
        let mut inf = Tape::inference();
        let y = inf.leaf(Tensor::scalar(1.0));
        assert!(inf.backward(y).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip_channels() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_fn(&[2, 2, 3], |i| i as Real));
        let b = t.leaf(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as Real));
        let c = t.concat(&[a, b]).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 3, 3]);
        let back = t.slice_channels(c, 2, 3).unwrap();
        assert_eq!(t.value(back), t.value(b));
        let s = t.sum(back);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.0; 12]);
        assert_eq!(t.grad(b).unwrap().data(), &[1.0; 6]);
    }
}
