//! Dense row-major `f64` tensors and the handful of kernels the layers need.
//!
//! A [`Tensor`] always satisfies `data.len() == shape.iter().product()` and
//! holds only finite values. Public operations that produce new values check
//! finiteness on the way out and report [`Error::NonFinite`] instead of
//! letting a NaN travel silently through a network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {expected} elements, got {}",
                data.len()
            )));
        }
        let t = Self { shape, data };
        t.ensure_finite("create")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Crate-internal constructor for kernels that already guarantee the
    /// length invariant. Callers still run `ensure_finite` on results.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major strides derived from the shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Element at a multi-index. Panics on an out-of-range index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank");
        let offset: usize = index
            .iter()
            .zip(&self.shape)
            .zip(self.strides())
            .map(|((&i, &d), s)| {
                assert!(i < d, "index {i} out of range for dimension {d}");
                i * s
            })
            .sum();
        self.data[offset]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub(crate) fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let out = Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect());
        out.ensure_finite("map")?;
        Ok(out)
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise operands {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let out = Self::from_parts(self.shape.clone(), data);
        out.ensure_finite("zip_map")?;
        Ok(out)
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dimensions {k} and {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        let t = Tensor::from_parts(vec![m, n], out);
        t.ensure_finite("matmul")?;
        Ok(t)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "transpose needs rank 2, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::from_parts(vec![c, r], out))
    }

    /// Minima and maxima over `axes`. The reduced axes are dropped from the
    /// result shape, so reducing every axis yields rank-0 tensors.
    pub fn reduce_extrema(&self, axes: &[usize]) -> Result<(Tensor, Tensor)> {
        let rank = self.rank();
        let mut reduce = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            reduce[axis] = true;
        }
        if self.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduce[a]).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&a| self.shape[a]).collect();
        let out_len: usize = out_shape.iter().product();
        let out_strides = strides_of(&out_shape);

        let mut mins = vec![f64::INFINITY; out_len];
        let mut maxs = vec![f64::NEG_INFINITY; out_len];
        let strides = self.strides();
        for (flat, &v) in self.data.iter().enumerate() {
            let mut out_idx = 0;
            for (k, &axis) in kept.iter().enumerate() {
                let coord = (flat / strides[axis]) % self.shape[axis];
                out_idx += coord * out_strides[k];
            }
            if v < mins[out_idx] {
                mins[out_idx] = v;
            }
            if v > maxs[out_idx] {
                maxs[out_idx] = v;
            }
        }
        Ok((
            Tensor::from_parts(out_shape.clone(), mins),
            Tensor::from_parts(out_shape, maxs),
        ))
    }

    /// Index of the largest entry in each row of a rank-2 tensor; ties go to
    /// the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "argmax_rows needs rank 2, got {:?}",
                self.shape
            )));
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks(cols.max(1))
            .take(self.shape[0])
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Tensor> {
        let outer = *self.shape.first().ok_or_else(|| {
            Error::ShapeMismatch("cannot slice a rank-0 tensor".to_string())
        })?;
        if start > end || end > outer {
            return Err(Error::ShapeMismatch(format!(
                "slice {start}..{end} of leading dimension {outer}"
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * inner..end * inner].to_vec(),
        ))
    }

    /// Gathers rows along the leading axis in the given order.
    pub fn gather_outer(&self, rows: &[usize]) -> Result<Tensor> {
        let outer = *self.shape.first().ok_or_else(|| {
            Error::ShapeMismatch("cannot gather from a rank-0 tensor".to_string())
        })?;
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= outer {
                return Err(Error::ShapeMismatch(format!(
                    "row {r} out of range for leading dimension {outer}"
                )));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor::from_parts(shape, data))
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Stride and zero padding of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::ShapeMismatch(format!(
                "kernel extent {kernel} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }

    /// Output columns `ox` whose input column `ox*stride + k - padding` lies in
    /// `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = k as isize;
        // ox*s + k - p >= 0  and  ox*s + k - p <= extent - 1
        let lo = (p - k).max(0);
        let lo = (lo + s - 1) / s;
        let hi_num = extent as isize - 1 - k + p;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(out_extent as isize);
        if lo >= hi {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }
}

fn conv_dims(input: &Tensor, kernels: &Tensor) -> Result<[usize; 7]> {
    if input.rank() != 4 || kernels.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d needs rank-4 input and kernels, got {:?} and {:?}",
            input.shape(),
            kernels.shape()
        )));
    }
    let [n, c, h, w] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
    let [o, kc, kh, kw] = [
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    ];
    if c != kc {
        return Err(Error::ShapeMismatch(format!(
            "input has {c} channels, kernels expect {kc}"
        )));
    }
    Ok([n, c, h, w, o, kh, kw])
}

/// Unfolds `input [N, C, H, W]` into a `[C*KH*KW, N*OH*OW]` row-major matrix
/// whose row `(c, ky, kx)` holds the input value under that tap for every
/// output position; taps in the padding are zero.
fn im2col(input: &[f64], dims: [usize; 7], oh: usize, ow: usize, geom: Conv2dGeometry) -> Vec<f64> {
    let [n, c, h, w, _, kh, kw] = dims;
    let (s, p) = (geom.stride, geom.padding);
    let cols = n * oh * ow;
    let mut col = vec![0.0; c * kh * kw * cols];
    for ic in 0..c {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = geom.valid_range(ky, h, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = geom.valid_range(kx, w, ow);
                let row = ((ic * kh + ky) * kw + kx) * cols;
                for b in 0..n {
                    let plane = &input[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let dst = &mut col[row + (b * oh + oy) * ow..][..ow];
                        for ox in ox_lo..ox_hi {
                            dst[ox] = plane[iy * w + ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an input-shaped buffer.
fn col2im(col: &[f64], dims: [usize; 7], oh: usize, ow: usize, geom: Conv2dGeometry) -> Vec<f64> {
    let [n, c, h, w, _, kh, kw] = dims;
    let (s, p) = (geom.stride, geom.padding);
    let cols = n * oh * ow;
    let mut out = vec![0.0; n * c * h * w];
    for ic in 0..c {
        for ky in 0..kh {
            let (oy_lo, oy_hi) = geom.valid_range(ky, h, oh);
            for kx in 0..kw {
                let (ox_lo, ox_hi) = geom.valid_range(kx, w, ow);
                let row = ((ic * kh + ky) * kw + kx) * cols;
                for b in 0..n {
                    let plane = &mut out[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let src = &col[row + (b * oh + oy) * ow..][..ow];
                        for ox in ox_lo..ox_hi {
                            plane[iy * w + ox * s + kx - p] += src[ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cross-correlation of `input [N, C, H, W]` with `kernels [O, C, KH, KW]`,
/// zero padded; bias is not applied here.
pub fn conv2d(input: &Tensor, kernels: &Tensor, geom: Conv2dGeometry) -> Result<Tensor> {
    let dims = conv_dims(input, kernels)?;
    let [n, _, h, w, o, kh, kw] = dims;
    let oh = geom.output_extent(h, kh)?;
    let ow = geom.output_extent(w, kw)?;
    let plane = oh * ow;
    let cols = n * plane;
    let taps = kernels.len() / o.max(1);
    let col = im2col(&input.data, dims, oh, ow, geom);
    // [O, N*OH*OW]
    let mut prod = vec![0.0; o * cols];
    for oc in 0..o {
        let dst = &mut prod[oc * cols..(oc + 1) * cols];
        for (r, &wv) in kernels.data[oc * taps..(oc + 1) * taps].iter().enumerate() {
            if wv != 0.0 {
                axpy(wv, &col[r * cols..(r + 1) * cols], dst);
            }
        }
    }
    let mut out = vec![0.0; n * o * plane];
    for b in 0..n {
        for oc in 0..o {
            out[(b * o + oc) * plane..][..plane].copy_from_slice(&prod[oc * cols + b * plane..][..plane]);
        }
    }
    let t = Tensor::from_parts(vec![n, o, oh, ow], out);
    t.ensure_finite("conv2d")?;
    Ok(t)
}

/// Gradients of [`conv2d`] with respect to its input and its kernels, given
/// the gradient of the output.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    geom: Conv2dGeometry,
) -> Result<(Tensor, Tensor)> {
    let dims = conv_dims(input, kernels)?;
    let [n, _, h, w, o, kh, kw] = dims;
    let oh = geom.output_extent(h, kh)?;
    let ow = geom.output_extent(w, kw)?;
    if grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d output gradient {:?}, expected {:?}",
            grad_out.shape(),
            [n, o, oh, ow]
        )));
    }
    let plane = oh * ow;
    let cols = n * plane;
    let taps = kernels.len() / o.max(1);
    let col = im2col(&input.data, dims, oh, ow, geom);
    let mut g = vec![0.0; o * cols];
    for b in 0..n {
        for oc in 0..o {
            g[oc * cols + b * plane..][..plane].copy_from_slice(&grad_out.data[(b * o + oc) * plane..][..plane]);
        }
    }
    let mut grad_k = vec![0.0; kernels.len()];
    let mut grad_col = vec![0.0; taps * cols];
    for oc in 0..o {
        let g_row = &g[oc * cols..(oc + 1) * cols];
        for r in 0..taps {
            let col_row = &col[r * cols..(r + 1) * cols];
            grad_k[oc * taps + r] = dot(g_row, col_row);
            let wv = kernels.data[oc * taps + r];
            if wv != 0.0 {
                axpy(wv, g_row, &mut grad_col[r * cols..(r + 1) * cols]);
            }
        }
    }
    let grad_in = col2im(&grad_col, dims, oh, ow, geom);
    let gi = Tensor::from_parts(input.shape.clone(), grad_in);
    let gk = Tensor::from_parts(kernels.shape.clone(), grad_k);
    gi.ensure_finite("conv2d backward")?;
    gk.ensure_finite("conv2d backward")?;
    Ok((gi, gk))
}
