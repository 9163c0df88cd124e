//! Forward/backward kernels for the layer set used by the toy networks.
//!
//! All functions are pure: shapes in, buffers out. The tape in
//! [`crate::tape`] wires them together and owns the caches.

use crate::error::{mismatch, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// `c = alpha * a * b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    rsa: usize,
    csa: usize,
    b: &[Real],
    rsb: usize,
    csb: usize,
    beta: Real,
    c: &mut [Real],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above describe the extent of every
    // strided access; callers pass buffers sized for the stated layouts.
    unsafe {
        #[cfg(not(feature = "f32"))]
        let f = matrixmultiply::dgemm;
        #[cfg(feature = "f32")]
        let f = matrixmultiply::sgemm;
        f(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a 2-D convolution over a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (in_c, in_h, in_w) = match *input {
            [_, c, h, w] => (c, h, w),
            _ => {
                return Err(Error::BadShape {
                    op: "conv2d",
                    shape: input.to_vec(),
                    reason: "input must be (N, C, H, W)".into(),
                })
            }
        };
        let (out_c, wc, kh, kw) = match *weight {
            [k, c, kh, kw] => (k, c, kh, kw),
            _ => {
                return Err(Error::BadShape {
                    op: "conv2d",
                    shape: weight.to_vec(),
                    reason: "weight must be (K, C, kh, kw)".into(),
                })
            }
        };
        if wc != in_c {
            return Err(mismatch("conv2d", "input channels vs weight channels", wc, in_c));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be positive".into()));
        }
        let (ph, pw) = (in_h + 2 * pad, in_w + 2 * pad);
        if ph < kh || pw < kw {
            return Err(Error::BadShape {
                op: "conv2d",
                shape: input.to_vec(),
                reason: format!("padded input {ph}x{pw} smaller than kernel {kh}x{kw}"),
            });
        }
        Ok(Self {
            in_c,
            in_h,
            in_w,
            out_c,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `ox` whose input column `ox * stride + j - pad` is in range.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(j).div_ceil(self.stride).min(self.out_w);
        let hi = if self.in_w + self.pad > j {
            ((self.in_w + self.pad - j - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[Real], cols: &mut [Real]) {
        let p = self.positions();
        for c in 0..self.in_c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.out_w..row + (oy + 1) * self.out_w];
                        if y < 0 || y >= self.in_h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if lo == hi {
                            continue;
                        }
                        let src = &x[(c * self.in_h + y as usize) * self.in_w..][..self.in_w];
                        let x0 = lo * self.stride + j - self.pad;
                        if self.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[x0 + k * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[Real], dx: &mut [Real]) {
        let p = self.positions();
        for c in 0..self.in_c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * p;
                    let (lo, hi) = self.valid_cols(j);
                    if lo == hi {
                        continue;
                    }
                    let x0 = lo * self.stride + j - self.pad;
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.in_h + y as usize) * self.in_w..][..self.in_w];
                        let src = &cols[row + oy * self.out_w + lo..row + oy * self.out_w + hi];
                        if self.stride == 1 {
                            for (d, s) in dst[x0..x0 + src.len()].iter_mut().zip(src) {
                                *d += s;
                            }
                        } else {
                            for (k, s) in src.iter().enumerate() {
                                dst[x0 + k * self.stride] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. Returns the output and the im2col buffers (one per
/// sample) when `keep_cols` is set.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor, Option<Vec<Real>>, ConvGeom)> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    if bias.len() != g.out_c {
        return Err(mismatch("conv2d", "bias length vs output channels", g.out_c, bias.len()));
    }
    let n = input.batch();
    let (q, p) = (g.patch(), g.positions());
    let in_per = g.in_c * g.in_h * g.in_w;
    let out_per = g.out_c * p;
    let mut out = vec![0.0; n * out_per];
    let mut all_cols = if keep_cols { vec![0.0; n * q * p] } else { Vec::new() };
    let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; q * p] };
    for s in 0..n {
        let x = &input.data()[s * in_per..(s + 1) * in_per];
        let cols: &mut [Real] = if keep_cols {
            &mut all_cols[s * q * p..(s + 1) * q * p]
        } else {
            &mut scratch
        };
        g.im2col(x, cols);
        let y = &mut out[s * out_per..(s + 1) * out_per];
        for (k, row) in y.chunks_mut(p).enumerate() {
            row.fill(bias.data()[k]);
        }
        gemm(g.out_c, q, p, 1.0, weight.data(), q, 1, cols, p, 1, 1.0, y, p, 1);
    }
    let out = Tensor::new(vec![n, g.out_c, g.out_h, g.out_w], out)?;
    Ok((out, keep_cols.then_some(all_cols), g))
}

/// Gradients of the convolution w.r.t. input, weight and bias.
pub fn conv2d_backward(
    g: &ConvGeom,
    cols: &[Real],
    weight: &Tensor,
    upstream: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = upstream.batch();
    let (q, p) = (g.patch(), g.positions());
    let in_per = g.in_c * g.in_h * g.in_w;
    let out_per = g.out_c * p;
    let mut dx = vec![0.0; n * in_per];
    let mut dw = vec![0.0; g.out_c * q];
    let mut db = vec![0.0; g.out_c];
    let mut dcols = vec![0.0; q * p];
    for s in 0..n {
        let dy = &upstream.data()[s * out_per..(s + 1) * out_per];
        let c = &cols[s * q * p..(s + 1) * q * p];
        for (k, row) in dy.chunks(p).enumerate() {
            db[k] += row.iter().sum::<Real>();
        }
        // dW (K x Q) += dY (K x P) * cols^T (P x Q)
        gemm(g.out_c, p, q, 1.0, dy, p, 1, c, 1, p, 1.0, &mut dw, q, 1);
        // dcols (Q x P) = W^T (Q x K) * dY (K x P)
        gemm(q, g.out_c, p, 1.0, weight.data(), 1, q, dy, p, 1, 0.0, &mut dcols, p, 1);
        g.col2im(&dcols, &mut dx[s * in_per..(s + 1) * in_per]);
    }
    (
        Tensor::new(vec![n, g.in_c, g.in_h, g.in_w], dx).expect("dx shape"),
        Tensor::new(weight.shape().to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![g.out_c], db).expect("db shape"),
    )
}

/// `y = x W^T + b` with `x: (N, I)`, `W: (O, I)`, `b: (O)`.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, i) = input.dims2("dense")?;
    let (o, wi) = weight.dims2("dense")?;
    if wi != i {
        return Err(mismatch("dense", "input features vs weight columns", wi, i));
    }
    if bias.len() != o {
        return Err(mismatch("dense", "bias length vs output features", o, bias.len()));
    }
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        y.extend_from_slice(bias.data());
    }
    gemm(n, i, o, 1.0, input.data(), i, 1, weight.data(), 1, i, 1.0, &mut y, o, 1);
    Tensor::new(vec![n, o], y)
}

pub fn dense_backward(input: &Tensor, weight: &Tensor, upstream: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, i) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    let dy = upstream.data();
    let mut dx = vec![0.0; n * i];
    gemm(n, o, i, 1.0, dy, o, 1, weight.data(), i, 1, 0.0, &mut dx, i, 1);
    let mut dw = vec![0.0; o * i];
    gemm(o, n, i, 1.0, dy, 1, o, input.data(), i, 1, 0.0, &mut dw, i, 1);
    let mut db = vec![0.0; o];
    for row in dy.chunks(o) {
        for (b, v) in db.iter_mut().zip(row) {
            *b += *v;
        }
    }
    (
        Tensor::new(vec![n, i], dx).expect("dx shape"),
        Tensor::new(vec![o, i], dw).expect("dw shape"),
        Tensor::new(vec![o], db).expect("db shape"),
    )
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect()).expect("same shape")
}

pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Tensor {
    let d = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), d).expect("same shape")
}

/// Max pooling without padding. Returns the output and, for every output
/// element, the flat index of the input element it was taken from.
pub fn maxpool_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4("maxpool2d")?;
    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
        return Err(Error::BadShape {
            op: "maxpool2d",
            shape: x.shape().to_vec(),
            reason: format!("kernel {kernel} / stride {stride} do not fit"),
        });
    }
    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..kernel {
                    for j in 0..kernel {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if xd[idx] > xd[best] || xd[idx].is_nan() {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, g) in argmax.iter().zip(upstream.data()) {
        d[i] += *g;
    }
    dx
}

/// Mean softmax cross-entropy over the batch. Returns `(loss, probs)`.
pub fn softmax_ce_forward(logits: &Tensor, labels: &[usize]) -> Result<(Real, Tensor)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(mismatch("softmax_cross_entropy", "labels vs batch", n, labels.len()));
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::Usage(format!("label {y} out of range for {k} classes")));
        }
        let m = row.iter().fold(Real::NEG_INFINITY, |a, &b| a.max(b));
        let z: Real = row.iter().map(|v| (v - m).exp()).sum();
        let lz = z.ln();
        loss += -(row[y] - m - lz);
        probs.extend(row.iter().map(|v| (v - m - lz).exp()));
    }
    Ok((loss / n as Real, Tensor::new(vec![n, k], probs)?))
}

pub fn softmax_ce_backward(probs: &Tensor, labels: &[usize], upstream: Real) -> Tensor {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = upstream / n as Real;
    let mut d = probs.data().to_vec();
    for (s, &y) in labels.iter().enumerate() {
        d[s * k + y] -= 1.0;
    }
    for v in &mut d {
        *v *= scale;
    }
    Tensor::new(vec![n, k], d).expect("same shape")
}

/// Count of correct argmax predictions.
pub fn correct_predictions(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}
