mod common;

use common::{random_fold_net, rng, uniform};
use mmhe::approx::{fit_chebyshev, ActivationKind, DEFAULT_SAMPLES};
use mmhe::circuit::depth_report;
use mmhe::fold::{divfree_rewrite, fold_minmax, hybrid_plan, swap_activations, uniform_plan, SwapPlan};
use mmhe::layers::{Layer, Network, NetworkConfig};
use proptest::prelude::*;

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn folding_preserves_inference(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = random_fold_net(&mut r);
        let folded = fold_minmax(&net).unwrap();
        prop_assert_eq!(folded.count(|l| matches!(l, Layer::MinMax(_))), 0);
        let c = net.input_shape[0];
        let x = uniform(&mut r, &[10, c, 8, 8], -1.0, 1.0);
        let a = net.infer(&x).unwrap();
        let b = folded.infer(&x).unwrap();
        prop_assert!(max_rel(b.data(), a.data()) < 1e-9);
    }

    #[test]
    fn divfree_preserves_argmax(seed in any::<u64>()) {
        let mut r = rng(seed);
        let net = random_fold_net(&mut r);
        let series = fit_chebyshev(ActivationKind::elu(), 3, (-2.0, 2.0), DEFAULT_SAMPLES).unwrap();
        let folded = fold_minmax(&net).unwrap();
        let he = swap_activations(&folded, &uniform_plan(&folded, &series)).unwrap();
        let sum = divfree_rewrite(&he).unwrap();
        let x = uniform(&mut r, &[10, net.input_shape[0], 8, 8], -1.0, 1.0);
        prop_assert_eq!(he.predict(&x).unwrap(), sum.predict(&x).unwrap());
    }
}

fn lenet_like(min_max: bool) -> Network {
    let mm = if min_max { r#"{"type":"min_max","range":[-3,3]},"# } else { "" };
    let text = format!(
        r#"{{"input_shape":[1,12,12],"classes":4,"layers":[
            {{"type":"conv2d","out_channels":3,"kernel":3,"padding":1}},{mm}
            {{"type":"activation","kind":{{"fn":"elu"}}}},
            {{"type":"avg_pool","k":2}},
            {{"type":"conv2d","out_channels":4,"kernel":3}},{mm}
            {{"type":"activation","kind":{{"fn":"elu"}}}},
            {{"type":"avg_pool","k":2}},
            {{"type":"conv2d","out_channels":4,"kernel":1}},{mm}
            {{"type":"activation","kind":{{"fn":"elu"}}}},
            {{"type":"conv2d","out_channels":4,"kernel":1}},
            {{"type":"global_avg_pool"}}]}}"#
    );
    let config: NetworkConfig = serde_json::from_str(&text).unwrap();
    Network::from_config(&config, 4).unwrap()
}

#[test]
fn empty_plan_is_identity() {
    let net = lenet_like(false);
    let swapped = swap_activations(&net, &SwapPlan::new()).unwrap();
    let x = uniform(&mut rng(1), &[5, 1, 12, 12], 0.0, 1.0);
    let a = net.infer(&x).unwrap();
    let b = swapped.infer(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn pipeline_scales_pooling_into_next_layer() {
    let net = lenet_like(false);
    let series = fit_chebyshev(ActivationKind::elu(), 3, (-2.0, 2.0), DEFAULT_SAMPLES).unwrap();
    let he = swap_activations(&net, &uniform_plan(&net, &series)).unwrap();
    let sum = divfree_rewrite(&he).unwrap();
    assert_eq!(sum.count(|l| matches!(l, Layer::AvgPool { .. } | Layer::GlobalAvgPool)), 0);
    // the terminal global pool is left as a sum: logits grow by the pooled area
    let x = uniform(&mut rng(2), &[6, 1, 12, 12], 0.0, 1.0);
    let a = he.infer(&x).unwrap();
    let b = sum.infer(&x).unwrap();
    let area = 4.0; // 12 -> 6 -> 4 -> 2, so the global pool covers 2x2
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((q - area * p).abs() <= 1e-9 * (1.0 + p.abs()));
    }
    assert_eq!(he.predict(&x).unwrap(), sum.predict(&x).unwrap());
}

#[test]
fn hybrid_plan_reduces_depth() {
    let net = lenet_like(true);
    let mut trained = net.clone();
    let x = uniform(&mut rng(3), &[8, 1, 12, 12], 0.0, 1.0);
    trained.forward(&x, mmhe::Mode::Train).unwrap();
    let folded = fold_minmax(&trained).unwrap();
    let fit = |d| fit_chebyshev(ActivationKind::elu(), d, (-3.0, 3.0), DEFAULT_SAMPLES).unwrap();
    let uniform5 = divfree_rewrite(&swap_activations(&folded, &uniform_plan(&folded, &fit(5))).unwrap()).unwrap();
    let hybrid = divfree_rewrite(&swap_activations(&folded, &hybrid_plan(&folded, &fit(5), 1, &fit(2))).unwrap()).unwrap();
    assert_eq!(depth_report(&uniform5, 3).unwrap().total_ct_ct_depth, 9);
    assert_eq!(depth_report(&hybrid, 3).unwrap().total_ct_ct_depth, 5);
}
