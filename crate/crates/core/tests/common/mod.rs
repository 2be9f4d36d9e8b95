#![allow(dead_code)]

use mmhe::approx::{fit_chebyshev, ActivationKind};
use mmhe::layers::{AxisPolicy, ExtremaGrad, Layer, MinMaxState, Mode, Network};
use mmhe::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Inputs bounded away from the activation kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Layer whose min-max groups use the extrema of `input` as fixed statistics,
/// unless the layer differentiates its extrema.
fn frozen(layer: &Layer, input: &Tensor) -> Layer {
    match layer {
        Layer::MinMax(state) if state.extrema_grad() == ExtremaGrad::Stop => {
            let axes: Vec<usize> = match state.policy() {
                AxisPolicy::PerTensor => (0..input.rank()).collect(),
                AxisPolicy::PerFeatureMap => (0..input.rank()).filter(|&a| a != 1).collect(),
            };
            let (lo, hi) = input.reduce_extrema(&axes).unwrap();
            let mut s = MinMaxState::new(state.range(), state.momentum(), state.policy()).unwrap();
            s.set_running(lo, hi).unwrap();
            Layer::MinMax(s)
        }
        other => other.clone(),
    }
}

fn weighted_sum(layer: &Layer, input: &Tensor, probe: &Tensor) -> f64 {
    let out = match layer {
        Layer::MinMax(s) if s.extrema_grad() == ExtremaGrad::Through => {
            layer.clone().forward(input, Mode::Train).unwrap().0
        }
        _ => layer.infer(input).unwrap(),
    };
    out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

fn central_difference(values: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = values[i];
    values[i] = orig + FD_STEP;
    let up = f(values);
    values[i] = orig - FD_STEP;
    let down = f(values);
    values[i] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// Worst relative error between the analytic and central-difference
/// gradients of `sum(layer(input) * probe)` over the input and any parameters.
/// Min-max layers are differentiated with their batch extrema held fixed.
pub fn grad_check(layer: &Layer, input: &Tensor, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut train = layer.clone();
    let (out, cache) = train.forward(input, Mode::Train).unwrap();
    let probe = uniform(&mut r, out.shape(), -1.0, 1.0);
    let (grad_in, grads) = layer.backward(&cache, &probe).unwrap();
    let fixed = frozen(layer, input);

    let mut x = input.data().to_vec();
    let numeric_in: Vec<f64> = (0..x.len())
        .map(|i| {
            central_difference(&mut x, i, |v| {
                weighted_sum(&fixed, &Tensor::new(input.shape().to_vec(), v.to_vec()).unwrap(), &probe)
            })
        })
        .collect();
    let mut worst = rel_error(grad_in.data(), &numeric_in);

    if let Some(g) = grads {
        let (w, b) = fixed.params().unwrap();
        for (which, analytic) in [(0, &g.weights), (1, &g.bias)] {
            let base = if which == 0 { w.clone() } else { b.clone() };
            let mut p = base.data().to_vec();
            let numeric: Vec<f64> = (0..p.len())
                .map(|i| {
                    central_difference(&mut p, i, |v| {
                        let mut l = fixed.clone();
                        let (pw, pb) = l.params_mut().unwrap();
                        let target = if which == 0 { pw } else { pb };
                        *target = Tensor::new(base.shape().to_vec(), v.to_vec()).unwrap();
                        weighted_sum(&l, input, &probe)
                    })
                })
                .collect();
            worst = worst.max(rel_error(analytic.data(), &numeric));
        }
    }
    worst
}

/// One small random instance of every layer kind (and of the geometry and
/// policy variants that take different code paths).
pub fn layer_cases(seed: u64) -> Vec<(String, Layer, Tensor)> {
    let mut r = rng(seed);
    let mut cases = Vec::new();
    let img = |r: &mut ChaCha8Rng, shape: &[usize]| uniform(r, shape, -2.0, 2.0);

    cases.push((
        "dense".into(),
        Layer::Dense {
            weights: uniform(&mut r, &[4, 6], -1.0, 1.0),
            bias: uniform(&mut r, &[4], -1.0, 1.0),
        },
        img(&mut r, &[3, 6]),
    ));
    cases.push((
        "dense on feature maps".into(),
        Layer::Dense {
            weights: uniform(&mut r, &[3, 2 * 2 * 2], -1.0, 1.0),
            bias: uniform(&mut r, &[3], -1.0, 1.0),
        },
        img(&mut r, &[2, 2, 2, 2]),
    ));
    for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
        cases.push((
            format!("conv2d stride {stride} padding {padding}"),
            Layer::Conv2d {
                kernels: uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
                bias: uniform(&mut r, &[3], -1.0, 1.0),
                stride,
                padding,
            },
            img(&mut r, &[2, 2, 5, 5]),
        ));
    }
    cases.push(("avg_pool".into(), Layer::AvgPool { k: 2, stride: 2 }, img(&mut r, &[2, 2, 4, 4])));
    cases.push((
        "avg_pool overlapping".into(),
        Layer::AvgPool { k: 3, stride: 1 },
        img(&mut r, &[1, 2, 4, 4]),
    ));
    cases.push(("sum_pool".into(), Layer::SumPool { k: 2, stride: 2 }, img(&mut r, &[2, 2, 4, 4])));
    cases.push(("global_avg_pool".into(), Layer::GlobalAvgPool, img(&mut r, &[2, 3, 3, 3])));
    cases.push(("global_sum_pool".into(), Layer::GlobalSumPool, img(&mut r, &[2, 3, 3, 3])));
    for kind in [ActivationKind::Relu, ActivationKind::elu(), ActivationKind::Elu { alpha: 0.5 }] {
        cases.push((
            format!("activation {}", kind.name()),
            Layer::Activation { kind },
            away_from_zero(&mut r, &[2, 3, 4]),
        ));
    }
    cases.push((
        "poly_activation".into(),
        Layer::PolyActivation {
            series: fit_chebyshev(ActivationKind::elu(), 4, (-2.0, 2.0), 1001).unwrap(),
        },
        img(&mut r, &[2, 3, 4]),
    ));
    for (policy, shape) in [
        (AxisPolicy::PerFeatureMap, vec![4, 3, 3, 3]),
        (AxisPolicy::PerFeatureMap, vec![5, 4]),
        (AxisPolicy::PerTensor, vec![4, 2, 3, 3]),
    ] {
        let x = img(&mut r, &shape);
        for grad in [ExtremaGrad::Stop, ExtremaGrad::Through] {
            cases.push((
                format!("min_max {policy:?} {grad:?} {shape:?}"),
                Layer::MinMax(MinMaxState::new((-2.0, 3.0), 0.9, policy).unwrap().with_extrema_grad(grad)),
                x.clone(),
            ));
        }
    }
    cases
}

/// Network of 1-3 conv blocks, each followed by a per-channel min-max layer
/// with random moving extrema, ending in global average pooling.
pub fn random_fold_net(r: &mut ChaCha8Rng) -> Network {
    let blocks = r.gen_range(1..=3);
    let mut channels = r.gen_range(1..=3);
    let mut layers = Vec::new();
    for b in 0..blocks {
        let out = r.gen_range(1..=4);
        let k = r.gen_range(1..=3);
        let padding = r.gen_range(0..=1);
        layers.push(Layer::Conv2d {
            kernels: uniform(r, &[out, channels, k, k], -1.0, 1.0),
            bias: uniform(r, &[out], -0.5, 0.5),
            stride: 1,
            padding,
        });
        let lo = uniform(r, &[out], -3.0, 0.0);
        let hi = Tensor::new(
            vec![out],
            lo.data().iter().map(|l| l + r.gen_range(0.1..4.0)).collect(),
        )
        .unwrap();
        let range = [(-1.0, 1.0), (-2.0, 2.0), (-3.0, 3.0)][r.gen_range(0..3)];
        let mut state = MinMaxState::new(range, 0.99, AxisPolicy::PerFeatureMap).unwrap();
        state.set_running(lo, hi).unwrap();
        layers.push(Layer::MinMax(state));
        if b + 1 < blocks {
            layers.push(Layer::Activation {
                kind: ActivationKind::elu(),
            });
        }
        channels = out;
    }
    layers.push(Layer::GlobalAvgPool);
    Network {
        input_shape: vec![layers_input_channels(&layers), 8, 8],
        classes: channels,
        seed: 0,
        layers,
    }
}

fn layers_input_channels(layers: &[Layer]) -> usize {
    match &layers[0] {
        Layer::Conv2d { kernels, .. } => kernels.shape()[1],
        _ => unreachable!(),
    }
}
