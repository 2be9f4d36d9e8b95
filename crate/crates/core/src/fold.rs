//! Network surgery: polynomial swap, Min-Max folding and the division-free
//! rewrite. Every function returns a new network and leaves its input alone.

use std::collections::BTreeMap;

use crate::approx::ChebyshevSeries;
use crate::error::{Error, Result};
use crate::layers::{AxisPolicy, Layer, Network};
use crate::tensor::Tensor;

/// Series to install per activation-layer index.
pub type SwapPlan = BTreeMap<usize, ChebyshevSeries>;

/// Plan that installs `series` at every original activation.
pub fn uniform_plan(net: &Network, series: &ChebyshevSeries) -> SwapPlan {
    net.activation_indices()
        .into_iter()
        .map(|i| (i, series.clone()))
        .collect()
}

/// Plan that installs `early` at the first `early_count` activations and
/// `late` at the rest.
pub fn hybrid_plan(
    net: &Network,
    early: &ChebyshevSeries,
    early_count: usize,
    late: &ChebyshevSeries,
) -> SwapPlan {
    net.activation_indices()
        .into_iter()
        .enumerate()
        .map(|(pos, i)| (i, if pos < early_count { early.clone() } else { late.clone() }))
        .collect()
}

/// Replaces each planned activation layer with its polynomial series.
pub fn swap_activations(net: &Network, plan: &SwapPlan) -> Result<Network> {
    let mut out = net.clone();
    for (&index, series) in plan {
        match out.layers.get_mut(index) {
            Some(layer @ Layer::Activation { .. }) => {
                *layer = Layer::PolyActivation {
                    series: series.clone(),
                }
            }
            _ => return Err(Error::IndexNotActivation(index)),
        }
    }
    Ok(out)
}

/// Absorbs every inference-mode Min-Max layer into the dense or conv2d layer
/// in front of it.
///
/// With moving extrema `E_min`, `E_max` and `s = (r_max - r_min) / (E_max - E_min)`
/// the preceding layer becomes `w' = s w` and `b' = s (b - E_min) + r_min`,
/// per output channel under the per-feature-map policy.
pub fn fold_minmax(net: &Network) -> Result<Network> {
    let mut layers: Vec<Layer> = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let Layer::MinMax(state) = layer else {
            layers.push(layer.clone());
            continue;
        };
        let affine = state.inference_affine()?;
        let prev = match layers.last_mut() {
            Some(prev) if prev.is_parametric() => prev,
            _ => return Err(Error::UnfoldableTopology(i)),
        };
        let (weights, bias) = prev.params_mut().expect("parametric layer");
        let out_channels = bias.len();
        let group_of = |c: usize| match state.policy() {
            AxisPolicy::PerTensor => Ok(0),
            AxisPolicy::PerFeatureMap if affine.len() == out_channels => Ok(c),
            AxisPolicy::PerFeatureMap => Err(Error::ShapeMismatch(format!(
                "min-max layer {i} tracks {} channels, preceding layer has {out_channels}",
                affine.len()
            ))),
        };
        let per_channel = weights.len() / out_channels;
        let mut w = weights.data().to_vec();
        let mut b = bias.data().to_vec();
        for c in 0..out_channels {
            let g = group_of(c)?;
            let (s, offset) = affine[g];
            for v in &mut w[c * per_channel..(c + 1) * per_channel] {
                *v *= s;
            }
            // s (b - E_min) + r_min, with the constant part precomputed
            b[c] = s * b[c] + offset;
        }
        *weights = Tensor::new(weights.shape().to_vec(), w)?;
        *bias = Tensor::new(bias.shape().to_vec(), b)?;
    }
    let folded = Network {
        layers,
        ..net.clone()
    };
    folded.validate()?;
    Ok(folded)
}

/// Rewrites average pooling as sum pooling.
///
/// The `1/k²` factor of a local pool is absorbed into the weights of the next
/// dense or conv2d layer. Pools with nothing but pooling after them become
/// sum pools without compensation, which scales the logits by a positive
/// constant and leaves the predicted class unchanged.
pub fn divfree_rewrite(net: &Network) -> Result<Network> {
    let offenders: Vec<(usize, String)> = net
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Activation { .. } | Layer::MinMax(_)))
        .map(|(i, l)| (i, l.kind_name().to_string()))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::NotHeCompatible(offenders));
    }
    let shapes = net.layer_shapes()?;
    let mut out = net.clone();
    for i in 0..out.layers.len() {
        let factor = match out.layers[i] {
            Layer::AvgPool { k, stride } => {
                out.layers[i] = Layer::SumPool { k, stride };
                1.0 / (k * k) as f64
            }
            Layer::GlobalAvgPool => {
                out.layers[i] = Layer::GlobalSumPool;
                let area: usize = shapes[i][1..].iter().product();
                1.0 / area as f64
            }
            _ => continue,
        };
        // no parametric layer downstream means the pool is terminal
        for j in i + 1..out.layers.len() {
            match &mut out.layers[j] {
                Layer::Dense { weights, .. } | Layer::Conv2d { kernels: weights, .. } => {
                    *weights = weights.map(|w| w * factor)?;
                    break;
                }
                Layer::AvgPool { .. }
                | Layer::SumPool { .. }
                | Layer::GlobalAvgPool
                | Layer::GlobalSumPool => continue,
                _ => return Err(Error::NoDownstreamLayer(i)),
            }
        }
    }
    Ok(out)
}
