//! Static cost model of an inference network run as a leveled-HE circuit.
//!
//! Conventions:
//! - weights and polynomial coefficients are plaintexts, so dense, conv2d and
//!   pooling layers add no ciphertext-ciphertext depth;
//! - a degree-`n` polynomial computes its powers with a square-and-multiply
//!   ladder, adding `ceil(log2 n)` ciphertext-ciphertext levels;
//! - values are fixed-point integers scaled by `10^k`. Inputs enter at
//!   exponent `k`; multiplying by a plaintext weight adds `k`; a degree-`n`
//!   polynomial maps an input exponent `e` to `n*e + k` (top power times a
//!   scaled coefficient). Sum pooling only adds, so it leaves the exponent
//!   unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Network;
use crate::layers::Layer;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub ct_ct_depth: u32,
    pub pt_mult_count: u64,
    #[serde(rename = "scale_exp_delta")]
    pub scale_exponent_delta: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitReport {
    #[serde(rename = "layers")]
    pub per_layer: Vec<LayerCost>,
    pub total_ct_ct_depth: u32,
    /// Exponent of the `10^k` scale carried by the network output.
    pub total_scale_exponent: u64,
}

/// `ceil(log2 n)`, zero for `n <= 1`.
pub fn ladder_depth(degree: usize) -> u32 {
    if degree <= 1 {
        0
    } else {
        usize::BITS - (degree - 1).leading_zeros()
    }
}

fn overflow() -> Error {
    Error::InvalidArgument("fixed-point scale exponent overflows u64".into())
}

/// Depth and cost report. Fails with [`Error::NotHeCompatible`] naming every
/// layer that is not expressible with additions and multiplications.
pub fn depth_report(net: &Network, fixed_point_k: u32) -> Result<CircuitReport> {
    let offenders: Vec<(usize, String)> = net
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            matches!(
                l,
                Layer::Activation { .. } | Layer::MinMax(_) | Layer::AvgPool { .. } | Layer::GlobalAvgPool
            )
        })
        .map(|(i, l)| (i, l.kind_name().to_string()))
        .collect();
    if !offenders.is_empty() {
        return Err(Error::NotHeCompatible(offenders));
    }

    let k = u64::from(fixed_point_k);
    let shapes = net.layer_shapes()?;
    let mut exponent = k;
    let mut per_layer = Vec::with_capacity(net.layers.len());
    for (index, layer) in net.layers.iter().enumerate() {
        let input = &shapes[index];
        let output = &shapes[index + 1];
        let (ct_ct_depth, pt_mult_count, delta) = match layer {
            Layer::Dense { weights, .. } => (0, weights.len() as u64, k),
            Layer::Conv2d {
                kernels,
                stride,
                padding,
                ..
            } => (0, conv_mults(input, output, kernels.shape(), *stride, *padding), k),
            Layer::SumPool { .. } | Layer::GlobalSumPool => (0, 0, 0),
            Layer::PolyActivation { series } => {
                let n = series.degree();
                let elems: usize = output.iter().product();
                let terms = series
                    .to_monomial()
                    .iter()
                    .skip(1)
                    .filter(|c| **c != 0.0)
                    .count();
                let delta = if n == 0 {
                    0
                } else {
                    // n*e + k - e
                    exponent
                        .checked_mul(n as u64 - 1)
                        .and_then(|v| v.checked_add(k))
                        .ok_or_else(overflow)?
                };
                (ladder_depth(n), (elems * terms) as u64, delta)
            }
            Layer::Activation { .. } | Layer::MinMax(_) | Layer::AvgPool { .. } | Layer::GlobalAvgPool => {
                unreachable!("rejected above")
            }
        };
        exponent = exponent.checked_add(delta).ok_or_else(overflow)?;
        per_layer.push(LayerCost {
            index,
            ct_ct_depth,
            pt_mult_count,
            scale_exponent_delta: delta,
        });
    }
    Ok(CircuitReport {
        total_ct_ct_depth: per_layer.iter().map(|c| c.ct_ct_depth).sum(),
        total_scale_exponent: exponent,
        per_layer,
    })
}

/// Plaintext multiplications of one conv2d application, skipping taps that
/// land in zero padding.
fn conv_mults(input: &[usize], output: &[usize], kernel: &[usize], stride: usize, padding: usize) -> u64 {
    let (h, w) = (input[1] as isize, input[2] as isize);
    let (oc, oh, ow) = (output[0], output[1], output[2]);
    let (ic, kh, kw) = (kernel[1], kernel[2] as isize, kernel[3] as isize);
    let valid = |o: usize, k: isize, extent: isize| {
        (0..k)
            .filter(|&d| {
                let i = (o * stride) as isize + d - padding as isize;
                i >= 0 && i < extent
            })
            .count() as u64
    };
    let rows: u64 = (0..oh).map(|oy| valid(oy, kh, h)).sum();
    let cols: u64 = (0..ow).map(|ox| valid(ox, kw, w)).sum();
    rows * cols * (oc * ic) as u64
}
