//! Layer kinds and their forward/backward passes.
//!
//! Every tensor flowing between layers is batch-first. Convolution and
//! pooling layers take `[N, C, H, W]`; dense layers flatten everything after
//! the batch axis; global pooling produces `[N, C]`.

mod minmax;
mod network;

pub use minmax::{AxisPolicy, ExtremaGrad, MinMaxCache, MinMaxState, DEFAULT_MOMENTUM};
pub use network::{LayerSpec, Network, NetworkConfig};

use serde::{Deserialize, Serialize};

use crate::approx::{ActivationKind, ChebyshevSeries};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, Conv2dGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// `y = x W^T + b` with `weights [out, in]` and `bias [out]`.
    Dense { weights: Tensor, bias: Tensor },
    /// Cross-correlation with `kernels [out_ch, in_ch, kh, kw]` and one bias
    /// per output channel.
    Conv2d {
        kernels: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    AvgPool { k: usize, stride: usize },
    SumPool { k: usize, stride: usize },
    GlobalAvgPool,
    GlobalSumPool,
    Activation { kind: ActivationKind },
    PolyActivation { series: ChebyshevSeries },
    MinMax(MinMaxState),
}

/// Backward context produced by [`Layer::forward`].
#[derive(Debug, Clone)]
pub struct Cache(CacheKind);

#[derive(Debug, Clone)]
enum CacheKind {
    Dense { input: Tensor, in_shape: Vec<usize> },
    Conv2d { input: Tensor },
    Pool { in_shape: Vec<usize> },
    Activation { input: Tensor },
    MinMax(MinMaxCache),
}

/// Gradients of a parametric layer's weights and bias.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::SumPool { .. } => "sum_pool",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::GlobalSumPool => "global_sum_pool",
            Layer::Activation { .. } => "activation",
            Layer::PolyActivation { .. } => "poly_activation",
            Layer::MinMax(_) => "min_max",
        }
    }

    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    /// Weights and bias of a dense or conv2d layer.
    pub fn params_mut(&mut self) -> Option<(&mut Tensor, &mut Tensor)> {
        match self {
            Layer::Dense { weights, bias } => Some((weights, bias)),
            Layer::Conv2d { kernels, bias, .. } => Some((kernels, bias)),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            Layer::Dense { weights, bias } => Some((weights, bias)),
            Layer::Conv2d { kernels, bias, .. } => Some((kernels, bias)),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| {
            Err(Error::ShapeMismatch(format!(
                "{} layer cannot take input {input:?}: {what}",
                self.kind_name()
            )))
        };
        match self {
            Layer::Dense { weights, bias } => {
                let features: usize = input.iter().product();
                if weights.rank() != 2 || weights.shape()[1] != features {
                    return mismatch(&format!("weights {:?}", weights.shape()));
                }
                if bias.shape() != [weights.shape()[0]] {
                    return mismatch(&format!("bias {:?}", bias.shape()));
                }
                Ok(vec![weights.shape()[0]])
            }
            Layer::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => {
                if input.len() != 3 || kernels.rank() != 4 || kernels.shape()[1] != input[0] {
                    return mismatch(&format!("kernels {:?}", kernels.shape()));
                }
                if bias.shape() != [kernels.shape()[0]] {
                    return mismatch(&format!("bias {:?}", bias.shape()));
                }
                let g = Conv2dGeometry {
                    stride: *stride,
                    padding: *padding,
                };
                Ok(vec![
                    kernels.shape()[0],
                    g.output_extent(input[1], kernels.shape()[2])?,
                    g.output_extent(input[2], kernels.shape()[3])?,
                ])
            }
            Layer::AvgPool { k, stride } | Layer::SumPool { k, stride } => {
                if input.len() != 3 || *k == 0 || *stride == 0 || input[1] < *k || input[2] < *k {
                    return mismatch(&format!("pool window {k}, stride {stride}"));
                }
                Ok(vec![
                    input[0],
                    (input[1] - k) / stride + 1,
                    (input[2] - k) / stride + 1,
                ])
            }
            Layer::GlobalAvgPool | Layer::GlobalSumPool => {
                if input.len() != 3 {
                    return mismatch("expected [C, H, W]");
                }
                Ok(vec![input[0]])
            }
            Layer::Activation { .. } | Layer::PolyActivation { .. } => Ok(input.to_vec()),
            Layer::MinMax(state) => {
                if let (AxisPolicy::PerFeatureMap, Some(rmin)) = (state.policy(), state.running_min())
                {
                    if input.is_empty() || input[0] != rmin.len() {
                        return mismatch(&format!("{} running channels", rmin.len()));
                    }
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Inference-mode forward pass without a backward cache.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Dense { weights, bias } => dense_forward(weights, bias, input).map(|(y, _)| y),
            Layer::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => conv_forward(kernels, bias, *stride, *padding, input),
            Layer::MinMax(state) => state.forward_infer(input),
            Layer::Activation { kind } => input.map(|x| kind.activate(x)),
            Layer::PolyActivation { series } => input.map(|x| series.eval(x)),
            Layer::AvgPool { k, stride } => pool_forward(input, *k, *stride, true),
            Layer::SumPool { k, stride } => pool_forward(input, *k, *stride, false),
            Layer::GlobalAvgPool => global_pool_forward(input, true),
            Layer::GlobalSumPool => global_pool_forward(input, false),
        }
    }

    /// Forward pass returning the context [`Layer::backward`] needs. Only a
    /// min-max layer in [`Mode::Train`] mutates itself.
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        let (out, cache) = match self {
            Layer::Dense { weights, bias } => {
                let (y, flat) = dense_forward(weights, bias, input)?;
                (
                    y,
                    CacheKind::Dense {
                        input: flat,
                        in_shape: input.shape().to_vec(),
                    },
                )
            }
            Layer::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => (
                conv_forward(kernels, bias, *stride, *padding, input)?,
                CacheKind::Conv2d {
                    input: input.clone(),
                },
            ),
            Layer::MinMax(state) => {
                let (y, c) = match mode {
                    Mode::Train => state.forward_train(input)?,
                    Mode::Infer => state.forward_infer_cached(input)?,
                };
                (y, CacheKind::MinMax(c))
            }
            Layer::Activation { .. } | Layer::PolyActivation { .. } => (
                self.infer(input)?,
                CacheKind::Activation {
                    input: input.clone(),
                },
            ),
            Layer::AvgPool { .. }
            | Layer::SumPool { .. }
            | Layer::GlobalAvgPool
            | Layer::GlobalSumPool => (
                self.infer(input)?,
                CacheKind::Pool {
                    in_shape: input.shape().to_vec(),
                },
            ),
        };
        Ok((out, Cache(cache)))
    }

    /// Gradient with respect to the layer input, plus parameter gradients
    /// for dense and conv2d layers.
    pub fn backward(&self, cache: &Cache, grad_out: &Tensor) -> Result<(Tensor, Option<ParamGrads>)> {
        let mismatch = || Error::CacheMismatch(self.kind_name());
        match (self, &cache.0) {
            (Layer::Dense { weights, .. }, CacheKind::Dense { input, in_shape }) => {
                let n = input.shape()[0];
                let out = weights.shape()[0];
                if grad_out.shape() != [n, out] {
                    return Err(Error::ShapeMismatch(format!(
                        "dense output gradient {:?}, expected {:?}",
                        grad_out.shape(),
                        [n, out]
                    )));
                }
                let grad_w = grad_out.transpose()?.matmul(input)?;
                let mut grad_b = vec![0.0; out];
                for row in grad_out.data().chunks(out) {
                    for (acc, &g) in grad_b.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                let grad_in = grad_out.matmul(weights)?.reshape(in_shape.clone())?;
                Ok((
                    grad_in,
                    Some(ParamGrads {
                        weights: grad_w,
                        bias: Tensor::from_parts(vec![out], grad_b),
                    }),
                ))
            }
            (
                Layer::Conv2d {
                    kernels,
                    stride,
                    padding,
                    ..
                },
                CacheKind::Conv2d { input },
            ) => {
                let geom = Conv2dGeometry {
                    stride: *stride,
                    padding: *padding,
                };
                let (grad_in, grad_k) = conv2d_backward(input, kernels, grad_out, geom)?;
                let [n, o] = [grad_out.shape()[0], grad_out.shape()[1]];
                let plane: usize = grad_out.shape()[2..].iter().product();
                let mut grad_b = vec![0.0; o];
                for b in 0..n {
                    for (c, acc) in grad_b.iter_mut().enumerate() {
                        let off = (b * o + c) * plane;
                        *acc += grad_out.data()[off..off + plane].iter().sum::<f64>();
                    }
                }
                Ok((
                    grad_in,
                    Some(ParamGrads {
                        weights: grad_k,
                        bias: Tensor::from_parts(vec![o], grad_b),
                    }),
                ))
            }
            (Layer::MinMax(_), CacheKind::MinMax(c)) => Ok((c.backward(grad_out)?, None)),
            (Layer::Activation { kind }, CacheKind::Activation { input }) => Ok((
                input.zip_map(grad_out, |x, g| g * kind.derivative(x))?,
                None,
            )),
            (Layer::PolyActivation { series }, CacheKind::Activation { input }) => {
                let d = series.derivative();
                Ok((input.zip_map(grad_out, |x, g| g * d.eval(x))?, None))
            }
            (Layer::AvgPool { k, stride }, CacheKind::Pool { in_shape }) => {
                Ok((pool_backward(in_shape, grad_out, *k, *stride, true)?, None))
            }
            (Layer::SumPool { k, stride }, CacheKind::Pool { in_shape }) => {
                Ok((pool_backward(in_shape, grad_out, *k, *stride, false)?, None))
            }
            (Layer::GlobalAvgPool, CacheKind::Pool { in_shape }) => {
                Ok((global_pool_backward(in_shape, grad_out, true)?, None))
            }
            (Layer::GlobalSumPool, CacheKind::Pool { in_shape }) => {
                Ok((global_pool_backward(in_shape, grad_out, false)?, None))
            }
            _ => Err(mismatch()),
        }
    }
}

fn dense_forward(weights: &Tensor, bias: &Tensor, input: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = *input.shape().first().ok_or_else(|| {
        Error::ShapeMismatch("dense input needs a batch axis".into())
    })?;
    let features: usize = input.shape()[1..].iter().product();
    if weights.rank() != 2 || weights.shape()[1] != features {
        return Err(Error::ShapeMismatch(format!(
            "dense weights {:?} cannot take {features} input features",
            weights.shape()
        )));
    }
    let out = weights.shape()[0];
    if bias.shape() != [out] {
        return Err(Error::ShapeMismatch(format!(
            "dense bias {:?}, expected [{out}]",
            bias.shape()
        )));
    }
    let flat = input.clone().reshape(vec![n, features])?;
    let mut y = flat.matmul(&weights.transpose()?)?;
    for row in y.data_mut().chunks_mut(out) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    y.ensure_finite("dense")?;
    Ok((y, flat))
}

fn conv_forward(
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    input: &Tensor,
) -> Result<Tensor> {
    let mut y = conv2d(input, kernels, Conv2dGeometry { stride, padding })?;
    let o = kernels.shape()[0];
    if bias.shape() != [o] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d bias {:?}, expected [{o}]",
            bias.shape()
        )));
    }
    let plane: usize = y.shape()[2..].iter().product();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[i % o];
        for v in chunk {
            *v += b;
        }
    }
    y.ensure_finite("conv2d")?;
    Ok(y)
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::ShapeMismatch(format!(
            "{what} needs a [N, C, H, W] tensor, got {shape:?}"
        ))),
    }
}

fn pool_forward(input: &Tensor, k: usize, stride: usize, average: bool) -> Result<Tensor> {
    let [n, c, h, w] = rank4(input.shape(), "pooling")?;
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(Error::ShapeMismatch(format!(
            "pool window {k} stride {stride} on {h}x{w}"
        )));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let scale = if average { 1.0 / (k * k) as f64 } else { 1.0 };
    let mut out = vec![0.0; n * c * oh * ow];
    let src = input.data();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = &plane[(oy * stride + dy) * w..];
                    acc += row[ox * stride..ox * stride + k].iter().sum::<f64>();
                }
                out[(p * oh + oy) * ow + ox] = if average { acc * scale } else { acc };
            }
        }
    }
    let t = Tensor::from_parts(vec![n, c, oh, ow], out);
    t.ensure_finite("pooling")?;
    Ok(t)
}

fn pool_backward(
    in_shape: &[usize],
    grad_out: &Tensor,
    k: usize,
    stride: usize,
    average: bool,
) -> Result<Tensor> {
    let [n, c, h, w] = rank4(in_shape, "pooling")?;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "pool output gradient {:?}, expected {:?}",
            grad_out.shape(),
            [n, c, oh, ow]
        )));
    }
    let scale = if average { 1.0 / (k * k) as f64 } else { 1.0 };
    let mut grad = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data()[(p * oh + oy) * ow + ox] * scale;
                for dy in 0..k {
                    let base = p * h * w + (oy * stride + dy) * w + ox * stride;
                    for v in &mut grad[base..base + k] {
                        *v += g;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), grad))
}

fn global_pool_forward(input: &Tensor, average: bool) -> Result<Tensor> {
    let [n, c, h, w] = rank4(input.shape(), "global pooling")?;
    let plane = h * w;
    let out = input
        .data()
        .chunks(plane)
        .map(|p| {
            let s: f64 = p.iter().sum();
            if average {
                s / plane as f64
            } else {
                s
            }
        })
        .collect();
    let t = Tensor::from_parts(vec![n, c], out);
    t.ensure_finite("global pooling")?;
    Ok(t)
}

fn global_pool_backward(in_shape: &[usize], grad_out: &Tensor, average: bool) -> Result<Tensor> {
    let [n, c, h, w] = rank4(in_shape, "global pooling")?;
    if grad_out.shape() != [n, c] {
        return Err(Error::ShapeMismatch(format!(
            "global pool output gradient {:?}, expected {:?}",
            grad_out.shape(),
            [n, c]
        )));
    }
    let plane = h * w;
    let scale = if average { 1.0 / plane as f64 } else { 1.0 };
    let mut grad = Vec::with_capacity(n * c * plane);
    for &g in grad_out.data() {
        grad.extend(std::iter::repeat_n(g * scale, plane));
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), grad))
}
