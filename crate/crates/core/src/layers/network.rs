use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AxisPolicy, Cache, ExtremaGrad, Layer, MinMaxState, Mode, ParamGrads, DEFAULT_MOMENTUM};
use crate::approx::{ActivationKind, ChebyshevSeries};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered stack of layers with the per-sample input shape it accepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork")]
pub struct Network {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

#[derive(Deserialize)]
struct RawNetwork {
    input_shape: Vec<usize>,
    classes: usize,
    #[serde(default)]
    seed: u64,
    layers: Vec<Layer>,
}

impl TryFrom<RawNetwork> for Network {
    type Error = Error;

    fn try_from(raw: RawNetwork) -> Result<Self> {
        let net = Network {
            input_shape: raw.input_shape,
            classes: raw.classes,
            seed: raw.seed,
            layers: raw.layers,
        };
        net.validate()?;
        Ok(net)
    }
}

/// Architecture description used to build a freshly initialized network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    AvgPool {
        k: usize,
        stride: Option<usize>,
    },
    SumPool {
        k: usize,
        stride: Option<usize>,
    },
    GlobalAvgPool,
    GlobalSumPool,
    Activation {
        kind: ActivationKind,
    },
    PolyActivation {
        series: ChebyshevSeries,
    },
    /// Policy defaults to per-feature-map on `[C, H, W]` activations and
    /// per-tensor otherwise.
    MinMax {
        range: (f64, f64),
        #[serde(default = "default_momentum")]
        momentum: f64,
        policy: Option<AxisPolicy>,
        #[serde(default)]
        extrema_grad: ExtremaGrad,
    },
}

fn one() -> usize {
    1
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

/// Glorot-style uniform initialization in `[-limit, limit]`.
fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape, (0..n).map(|_| rng.gen_range(-limit..limit)).collect())
}

impl Network {
    /// Builds and initializes a network; all randomness comes from `seed`.
    pub fn from_config(config: &NetworkConfig, seed: u64) -> Result<Network> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = config.input_shape.clone();
        let mut layers = Vec::with_capacity(config.layers.len());
        for spec in &config.layers {
            let layer = match spec {
                LayerSpec::Dense { units } => {
                    let fan_in: usize = shape.iter().product();
                    Layer::Dense {
                        weights: glorot(&mut rng, vec![*units, fan_in], fan_in, *units),
                        bias: Tensor::zeros(vec![*units]),
                    }
                }
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let in_ch = *shape.first().ok_or_else(|| {
                        Error::ShapeMismatch("conv2d needs a [C, H, W] input".into())
                    })?;
                    let area = kernel * kernel;
                    Layer::Conv2d {
                        kernels: glorot(
                            &mut rng,
                            vec![*out_channels, in_ch, *kernel, *kernel],
                            in_ch * area,
                            out_channels * area,
                        ),
                        bias: Tensor::zeros(vec![*out_channels]),
                        stride: *stride,
                        padding: *padding,
                    }
                }
                LayerSpec::AvgPool { k, stride } => Layer::AvgPool {
                    k: *k,
                    stride: stride.unwrap_or(*k),
                },
                LayerSpec::SumPool { k, stride } => Layer::SumPool {
                    k: *k,
                    stride: stride.unwrap_or(*k),
                },
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::GlobalSumPool => Layer::GlobalSumPool,
                LayerSpec::Activation { kind } => {
                    kind.validate()?;
                    Layer::Activation { kind: *kind }
                }
                LayerSpec::PolyActivation { series } => Layer::PolyActivation {
                    series: series.clone(),
                },
                LayerSpec::MinMax {
                    range,
                    momentum,
                    policy,
                    extrema_grad,
                } => {
                    let policy = policy.unwrap_or(if shape.len() == 3 {
                        AxisPolicy::PerFeatureMap
                    } else {
                        AxisPolicy::PerTensor
                    });
                    Layer::MinMax(MinMaxState::new(*range, *momentum, policy)?.with_extrema_grad(*extrema_grad))
                }
            };
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        let net = Network {
            input_shape: config.input_shape.clone(),
            classes: config.classes,
            seed,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Per-sample input shape of every layer, followed by the output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    /// Checks that consecutive layer shapes chain and the output has one
    /// entry per class.
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::InvalidArgument("class count must be positive".into()));
        }
        for layer in &self.layers {
            if let Layer::Activation { kind } = layer {
                kind.validate()?;
            }
        }
        let shapes = self.layer_shapes()?;
        let out: usize = shapes.last().expect("non-empty").iter().product();
        if out != self.classes {
            return Err(Error::ShapeMismatch(format!(
                "network output {:?} does not hold {} classes",
                shapes.last(),
                self.classes
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "network expects [N, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(x.shape()[0])
    }

    /// Inference-mode logits `[N, classes]`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check_input(x)?;
        let mut iter = self.layers.iter();
        let mut h = match iter.next() {
            Some(first) => first.infer(x)?,
            None => x.clone(),
        };
        for layer in iter {
            h = layer.infer(&h)?;
        }
        h.reshape(vec![n, self.classes])
    }

    /// Predicted class per sample (ties go to the lowest index).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.infer(x)?.argmax_rows()
    }

    /// Forward pass that records backward caches. Logits are `[N, classes]`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Cache>)> {
        let n = self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = layer.forward(&h, mode)?;
            caches.push(cache);
            h = next;
        }
        Ok((h.reshape(vec![n, self.classes])?, caches))
    }

    /// Backpropagates `grad_logits [N, classes]`; returns parameter gradients
    /// indexed by layer.
    pub fn backward(&self, caches: &[Cache], grad_logits: &Tensor) -> Result<Vec<Option<ParamGrads>>> {
        if caches.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let n = grad_logits.shape().first().copied().unwrap_or(0);
        let mut out_shape = vec![n];
        out_shape.extend(self.layer_shapes()?.last().expect("non-empty"));
        let mut grad = grad_logits.clone().reshape(out_shape)?;
        let mut grads = vec![None; self.layers.len()];
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (g, p) = layer.backward(cache, &grad)?;
            grads[i] = p;
            grad = g;
        }
        Ok(grads)
    }

    /// Indices of layers holding an original (non-polynomial) activation.
    pub fn activation_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Activation { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, pred: impl Fn(&Layer) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(l)).count()
    }
}
