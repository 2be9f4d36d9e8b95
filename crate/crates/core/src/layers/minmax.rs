//! Min-Max normalization.
//!
//! Training mode rescales each reduced group of the batch from its own
//! extrema `[x_min, x_max]` into the target range `[r_min, r_max]`:
//!
//! ```text
//! y = (r_max - r_min) * (x - x_min) / (x_max - x_min) + r_min
//! ```
//!
//! and folds the batch extrema into exponential moving means. Inference mode
//! applies the same affine map with the moving means in place of the batch
//! extrema, without clamping. By default the backward pass treats the batch
//! extrema as constants; [`ExtremaGrad::Through`] also differentiates them,
//! routing their gradient to the arg-min and arg-max elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// Which elements share one pair of extrema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisPolicy {
    /// One pair per channel (axis 1), reduced over every other axis.
    PerFeatureMap,
    /// One pair for the whole batch.
    PerTensor,
}

/// How the training-mode backward pass treats the batch extrema.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremaGrad {
    /// Extrema are constants: `grad_in = grad_out * slope`.
    #[default]
    Stop,
    /// Extrema are functions of the batch. The gradient of each group is then
    /// orthogonal to shifting or scaling that group.
    Through,
}

impl ExtremaGrad {
    fn is_stop(&self) -> bool {
        *self == ExtremaGrad::Stop
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawState")]
pub struct MinMaxState {
    range: (f64, f64),
    momentum: f64,
    policy: AxisPolicy,
    #[serde(default, skip_serializing_if = "ExtremaGrad::is_stop")]
    extrema_grad: ExtremaGrad,
    running_min: Option<Tensor>,
    running_max: Option<Tensor>,
}

#[derive(Deserialize)]
struct RawState {
    range: (f64, f64),
    momentum: f64,
    policy: AxisPolicy,
    #[serde(default)]
    extrema_grad: ExtremaGrad,
    running_min: Option<Tensor>,
    running_max: Option<Tensor>,
}

impl TryFrom<RawState> for MinMaxState {
    type Error = Error;

    fn try_from(raw: RawState) -> Result<Self> {
        let mut state = MinMaxState::new(raw.range, raw.momentum, raw.policy)?.with_extrema_grad(raw.extrema_grad);
        match (raw.running_min, raw.running_max) {
            (None, None) => {}
            (Some(lo), Some(hi)) => state.set_running(lo, hi)?,
            _ => {
                return Err(Error::InvalidArgument(
                    "running_min and running_max must both be present or both absent".into(),
                ))
            }
        }
        Ok(state)
    }
}

/// What the backward pass needs: one slope per reduced group, plus the
/// arg-extrema and normalized positions when extrema are differentiated.
#[derive(Debug, Clone)]
pub struct MinMaxCache {
    slopes: Vec<f64>,
    policy: AxisPolicy,
    shape: Vec<usize>,
    through: Option<ThroughCache>,
}

#[derive(Debug, Clone)]
struct ThroughCache {
    /// `(x - x_min) / (x_max - x_min)` per element.
    unit: Vec<f64>,
    argmin: Vec<usize>,
    argmax: Vec<usize>,
}

impl MinMaxState {
    pub fn new(range: (f64, f64), momentum: f64, policy: AxisPolicy) -> Result<Self> {
        let (lo, hi) = range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::DegenerateInterval { a: lo, b: hi });
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in (0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            range,
            momentum,
            policy,
            extrema_grad: ExtremaGrad::Stop,
            running_min: None,
            running_max: None,
        })
    }

    pub fn with_extrema_grad(mut self, extrema_grad: ExtremaGrad) -> Self {
        self.extrema_grad = extrema_grad;
        self
    }

    pub fn extrema_grad(&self) -> ExtremaGrad {
        self.extrema_grad
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn policy(&self) -> AxisPolicy {
        self.policy
    }

    pub fn is_initialized(&self) -> bool {
        self.running_min.is_some()
    }

    pub fn running_min(&self) -> Option<&Tensor> {
        self.running_min.as_ref()
    }

    pub fn running_max(&self) -> Option<&Tensor> {
        self.running_max.as_ref()
    }

    /// Overwrites the moving extrema, e.g. when restoring a model.
    pub fn set_running(&mut self, min: Tensor, max: Tensor) -> Result<()> {
        if min.shape() != max.shape() {
            return Err(Error::ShapeMismatch(format!(
                "running extrema shapes {:?} and {:?}",
                min.shape(),
                max.shape()
            )));
        }
        if self.policy == AxisPolicy::PerTensor && min.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "per-tensor running extrema must hold one value, got {:?}",
                min.shape()
            )));
        }
        if min.data().iter().zip(max.data()).any(|(lo, hi)| lo > hi) {
            return Err(Error::InvalidArgument("running_min exceeds running_max".into()));
        }
        self.running_min = Some(min);
        self.running_max = Some(max);
        Ok(())
    }

    /// Number of groups, and the group of a flat element index, for `shape`.
    fn grouping(&self, shape: &[usize]) -> Result<Grouping> {
        match self.policy {
            AxisPolicy::PerTensor => Ok(Grouping {
                groups: 1,
                channels: 1,
                inner: 1,
            }),
            AxisPolicy::PerFeatureMap => {
                if shape.len() < 2 {
                    return Err(Error::ShapeMismatch(format!(
                        "per-feature-map min-max needs a [N, C, ...] input, got {shape:?}"
                    )));
                }
                let channels = shape[1];
                let inner = shape[2..].iter().product();
                Ok(Grouping {
                    groups: channels,
                    channels,
                    inner,
                })
            }
        }
    }

    fn reduce_axes(&self, rank: usize) -> Vec<usize> {
        match self.policy {
            AxisPolicy::PerTensor => (0..rank).collect(),
            AxisPolicy::PerFeatureMap => (0..rank).filter(|&a| a != 1).collect(),
        }
    }

    /// Normalizes a training batch with its own extrema and updates the
    /// moving extrema.
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<(Tensor, MinMaxCache)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let grouping = self.grouping(batch.shape())?;
        let (lo, hi) = batch.reduce_extrema(&self.reduce_axes(batch.rank()))?;
        let (out, slopes) = self.apply(batch, lo.data(), hi.data(), grouping)?;
        let through = match self.extrema_grad {
            ExtremaGrad::Stop => None,
            ExtremaGrad::Through => Some(through_cache(batch.data(), lo.data(), hi.data(), grouping)),
        };

        let (lo, hi) = match (&self.running_min, &self.running_max) {
            (Some(rmin), Some(rmax)) => {
                if rmin.len() != lo.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "batch has {} min-max groups, running statistics hold {}",
                        lo.len(),
                        rmin.len()
                    )));
                }
                let m = self.momentum;
                let blend = |run: &Tensor, batch: &Tensor| {
                    let data = run
                        .data()
                        .iter()
                        .zip(batch.data())
                        .map(|(&r, &b)| m * r + (1.0 - m) * b)
                        .collect();
                    Tensor::from_parts(run.shape().to_vec(), data)
                };
                (blend(rmin, &lo), blend(rmax, &hi))
            }
            _ => (lo, hi),
        };
        self.running_min = Some(lo);
        self.running_max = Some(hi);

        Ok((
            out,
            MinMaxCache {
                slopes,
                policy: self.policy,
                shape: batch.shape().to_vec(),
                through,
            },
        ))
    }

    /// Affine map with the moving extrema.
    pub fn forward_infer(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_infer_cached(input)?.0)
    }

    pub(crate) fn forward_infer_cached(&self, input: &Tensor) -> Result<(Tensor, MinMaxCache)> {
        let (rmin, rmax) = match (&self.running_min, &self.running_max) {
            (Some(lo), Some(hi)) => (lo, hi),
            _ => return Err(Error::Uninitialized),
        };
        let grouping = self.grouping(input.shape())?;
        if grouping.groups != rmin.len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} min-max groups, running statistics hold {}",
                grouping.groups,
                rmin.len()
            )));
        }
        let (out, slopes) = self.apply(input, rmin.data(), rmax.data(), grouping)?;
        Ok((
            out,
            MinMaxCache {
                slopes,
                policy: self.policy,
                shape: input.shape().to_vec(),
                through: None,
            },
        ))
    }

    /// Per-group `(slope, offset)` of the inference map `y = slope * x + offset`.
    pub fn inference_affine(&self) -> Result<Vec<(f64, f64)>> {
        let (rmin, rmax) = match (&self.running_min, &self.running_max) {
            (Some(lo), Some(hi)) => (lo, hi),
            _ => return Err(Error::Uninitialized),
        };
        let (r_lo, r_hi) = self.range;
        Ok(rmin
            .data()
            .iter()
            .zip(rmax.data())
            .map(|(&lo, &hi)| {
                if hi > lo {
                    let s = (r_hi - r_lo) / (hi - lo);
                    (s, r_lo - s * lo)
                } else {
                    (0.0, 0.5 * (r_lo + r_hi))
                }
            })
            .collect())
    }

    fn apply(
        &self,
        x: &Tensor,
        lo: &[f64],
        hi: &[f64],
        grouping: Grouping,
    ) -> Result<(Tensor, Vec<f64>)> {
        let (r_lo, r_hi) = self.range;
        let width = r_hi - r_lo;
        let mid = 0.5 * (r_lo + r_hi);
        let slopes: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| if h > l { width / (h - l) } else { 0.0 })
            .collect();
        let mut out = x.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            let g = grouping.group_of(i);
            let (l, h) = (lo[g], hi[g]);
            *v = if h > l {
                width * ((*v - l) / (h - l)) + r_lo
            } else {
                mid
            };
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        t.ensure_finite("min-max")?;
        Ok((t, slopes))
    }
}

impl MinMaxCache {
    /// `grad_in = grad_out * slope` of the element's group, plus the extrema
    /// terms under [`ExtremaGrad::Through`].
    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        if grad_out.shape() != self.shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "min-max gradient {:?}, expected {:?}",
                grad_out.shape(),
                self.shape
            )));
        }
        let grouping = match self.policy {
            AxisPolicy::PerTensor => Grouping {
                groups: 1,
                channels: 1,
                inner: 1,
            },
            AxisPolicy::PerFeatureMap => Grouping {
                groups: self.shape[1],
                channels: self.shape[1],
                inner: self.shape[2..].iter().product(),
            },
        };
        let mut data: Vec<f64> = grad_out
            .data()
            .iter()
            .enumerate()
            .map(|(i, &g)| g * self.slopes[grouping.group_of(i)])
            .collect();
        if let Some(t) = &self.through {
            // dy_i/dx_min = s (u_i - 1), dy_i/dx_max = -s u_i
            let mut to_min = vec![0.0; grouping.groups];
            let mut to_max = vec![0.0; grouping.groups];
            for (i, (&g, &u)) in grad_out.data().iter().zip(&t.unit).enumerate() {
                let k = grouping.group_of(i);
                to_min[k] += g * (u - 1.0);
                to_max[k] -= g * u;
            }
            for k in 0..grouping.groups {
                data[t.argmin[k]] += self.slopes[k] * to_min[k];
                data[t.argmax[k]] += self.slopes[k] * to_max[k];
            }
        }
        let t = Tensor::from_parts(self.shape.clone(), data);
        t.ensure_finite("min-max backward")?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy)]
struct Grouping {
    groups: usize,
    channels: usize,
    inner: usize,
}

fn through_cache(x: &[f64], lo: &[f64], hi: &[f64], grouping: Grouping) -> ThroughCache {
    let mut argmin = vec![usize::MAX; grouping.groups];
    let mut argmax = vec![usize::MAX; grouping.groups];
    let mut unit = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        let k = grouping.group_of(i);
        if argmin[k] == usize::MAX && v == lo[k] {
            argmin[k] = i;
        }
        if argmax[k] == usize::MAX && v == hi[k] {
            argmax[k] = i;
        }
        unit.push(if hi[k] > lo[k] { (v - lo[k]) / (hi[k] - lo[k]) } else { 0.5 });
    }
    ThroughCache { unit, argmin, argmax }
}

impl Grouping {
    #[inline]
    fn group_of(&self, flat: usize) -> usize {
        if self.groups == 1 {
            0
        } else {
            (flat / self.inner) % self.channels
        }
    }
}
