//! End-to-end acceptance run: one `PASS`/`FAIL` line per criterion, nonzero
//! exit if any fails.
//!
//! MNIST is read from `MNIST_DIR` (default `<workspace>/data/mnist`). The two
//! MNIST trainings dominate the runtime; set `ACCEPTANCE_MODEL_DIR` to keep
//! the trained models there and reuse them on later runs.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{grad_check, layer_cases, random_fold_net, rng, uniform};
use mmhe::approx::{
    error_profile, fit_chebyshev, max_error_within, residual_sum_of_squares, uniform_grid, ActivationKind,
    DEFAULT_SAMPLES,
};
use mmhe::cli::{read_json, write_json};
use mmhe::data::{load_mnist, one_hot, Dataset, Split, MNIST_CLASSES};
use mmhe::fold::{divfree_rewrite, fold_minmax, hybrid_plan, swap_activations, uniform_plan};
use mmhe::layers::{AxisPolicy, MinMaxState, Network, NetworkConfig};
use mmhe::train::{evaluate_accuracy, fit, predict_all, TrainConfig};
use mmhe::Mode;
use rand::Rng;

const SEED: u64 = 1;
const EPOCHS: usize = 5;
const BATCH: usize = 64;
const VAL_SIZE: usize = 5000;

type Outcome = Result<String, String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fold_equivalence() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let net = random_fold_net(&mut r);
        let folded = fold_minmax(&net).map_err(|e| e.to_string())?;
        let x = uniform(&mut r, &[100, net.input_shape[0], 8, 8], -1.0, 1.0);
        let a = net.infer(&x).map_err(|e| e.to_string())?;
        let b = folded.infer(&x).map_err(|e| e.to_string())?;
        for (p, q) in a.data().iter().zip(b.data()) {
            worst = worst.max((q - p).abs() / (p.abs() + 1e-12));
        }
    }
    check(worst < 1e-6, format!("50 nets x 100 inputs, max rel error {worst:.2e}"))
}

fn gradient_checks() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for seed in 0..3 {
        for (name, layer, input) in layer_cases(seed) {
            let err = grad_check(&layer, &input, seed + 7);
            count += 1;
            if err >= worst.0 {
                worst = (err, name);
            }
        }
    }
    check(
        worst.0 < 1e-4,
        format!("{count} cases, worst {:.2e} ({})", worst.0, worst.1),
    )
}

fn minmax_range() -> Outcome {
    let mut r = rng(103);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let shape = [r.gen_range(1..6), r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5)];
        let x = uniform(&mut r, &shape, -20.0, 20.0);
        if x.data().iter().all(|&v| v == x.data()[0]) {
            continue;
        }
        checked += 1;
        for range in [(-1.0, 1.0), (-2.0, 2.0), (-3.0, 3.0)] {
            let mut state = MinMaxState::new(range, 0.99, AxisPolicy::PerFeatureMap).unwrap();
            let (out, _) = state.forward_train(&x).map_err(|e| e.to_string())?;
            let axes = [0, 2, 3];
            let (lo_in, hi_in) = x.reduce_extrema(&axes).unwrap();
            let (lo, hi) = out.reduce_extrema(&axes).unwrap();
            for c in 0..shape[1] {
                if lo_in.data()[c] == hi_in.data()[c] {
                    continue;
                }
                worst = worst
                    .max((lo.data()[c] - range.0).abs())
                    .max((hi.data()[c] - range.1).abs());
            }
        }
    }
    check(worst <= 1e-12, format!("1000 batches x 3 ranges, max deviation {worst:.2e}"))
}

fn approximation_shape() -> Outcome {
    let fit = |kind, degree| fit_chebyshev(kind, degree, (-3.0, 3.0), DEFAULT_SAMPLES).unwrap();
    let near = |kind| {
        let profile = error_profile(&fit(kind, 3), kind, (-3.0, 3.0, 6001)).unwrap();
        max_error_within(&profile, -0.5, 0.5)
    };
    let (relu, elu) = (near(ActivationKind::Relu), near(ActivationKind::elu()));
    let grid = uniform_grid(-3.0, 3.0, DEFAULT_SAMPLES);
    let mut monotone = true;
    for kind in [ActivationKind::Relu, ActivationKind::elu()] {
        let rss: Vec<f64> = (2..=6)
            .map(|d| residual_sum_of_squares(&fit(kind, d), |x| kind.activate(x), &grid))
            .collect();
        monotone &= rss.windows(2).all(|w| w[1] <= w[0]);
    }
    check(
        relu > elu && monotone,
        format!("|x|<=0.5 max error relu {relu:.4} elu {elu:.4}; residual non-increasing 2..6: {monotone}"),
    )
}

struct Mnist {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn load_data() -> Result<Mnist, String> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data/mnist"));
    let full = load_mnist(&dir, Split::Train).map_err(|e| format!("MNIST unavailable: {e}"))?;
    let test = load_mnist(&dir, Split::Test).map_err(|e| format!("MNIST unavailable: {e}"))?;
    let (train, val) = full.split(VAL_SIZE, SEED).map_err(|e| e.to_string())?;
    Ok(Mnist { train, val, test })
}

fn trained(config: &str, data: &Mnist) -> Result<Network, String> {
    let cache = std::env::var_os("ACCEPTANCE_MODEL_DIR").map(|d| PathBuf::from(d).join(config));
    if let Some(path) = cache.as_ref().filter(|p| p.exists()) {
        eprintln!("  reusing {}", path.display());
        return read_json(path).map_err(|e| e.to_string());
    }
    let cfg: NetworkConfig = read_json(&workspace().join("configs").join(config)).map_err(|e| e.to_string())?;
    let mut net = Network::from_config(&cfg, SEED).map_err(|e| e.to_string())?;
    let targets = one_hot(&data.train.labels, MNIST_CLASSES).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        batch_size: BATCH,
        epochs: EPOCHS,
        seed: SEED,
        shuffle: true,
    };
    eprintln!("  training {config}");
    fit(
        &mut net,
        &data.train.images,
        &targets,
        Some((&data.val.images, &data.val.labels)),
        &train_cfg,
        |r| eprintln!("    {r}"),
    )
    .map_err(|e| e.to_string())?;
    if let Some(path) = cache {
        write_json(&path, &net, false).map_err(|e| e.to_string())?;
    }
    Ok(net)
}

fn accuracy(net: &Network, data: &Dataset) -> Result<f64, String> {
    evaluate_accuracy(net, &data.images, &data.labels).map_err(|e| e.to_string())
}

/// Baseline accuracy and accuracy after the degree-3 ELU swap on [-2, 2].
struct Swapped {
    base: f64,
    poly: f64,
    he: Network,
}

fn swap_experiment(net: &Network, data: &Mnist) -> Result<Swapped, String> {
    let series = fit_chebyshev(ActivationKind::elu(), 3, (-2.0, 2.0), DEFAULT_SAMPLES).map_err(|e| e.to_string())?;
    let folded = fold_minmax(net).map_err(|e| e.to_string())?;
    let he = swap_activations(&folded, &uniform_plan(&folded, &series)).map_err(|e| e.to_string())?;
    Ok(Swapped {
        base: accuracy(net, &data.test)?,
        poly: accuracy(&he, &data.test)?,
        he,
    })
}

fn divfree_argmax(he: &Network, test: &Dataset) -> Outcome {
    let sum = divfree_rewrite(he).map_err(|e| e.to_string())?;
    let a = predict_all(he, &test.images).map_err(|e| e.to_string())?;
    let b = predict_all(&sum, &test.images).map_err(|e| e.to_string())?;
    let differ = a.iter().zip(&b).filter(|(p, q)| p != q).count();
    check(
        differ == 0 && a.len() == 10000,
        format!("{} test samples, {differ} predictions changed", a.len()),
    )
}

fn pct(v: f64) -> f64 {
    100.0 * v
}

fn hybrid_depth() -> Outcome {
    let config: NetworkConfig = serde_json::from_str(
        r#"{"input_shape":[1,12,12],"classes":4,"layers":[
            {"type":"conv2d","out_channels":3,"kernel":3,"padding":1},
            {"type":"min_max","range":[-3,3]},
            {"type":"activation","kind":{"fn":"elu"}},
            {"type":"avg_pool","k":2},
            {"type":"conv2d","out_channels":4,"kernel":3},
            {"type":"min_max","range":[-3,3]},
            {"type":"activation","kind":{"fn":"elu"}},
            {"type":"avg_pool","k":2},
            {"type":"conv2d","out_channels":4,"kernel":1},
            {"type":"min_max","range":[-3,3]},
            {"type":"activation","kind":{"fn":"elu"}},
            {"type":"conv2d","out_channels":4,"kernel":1},
            {"type":"global_avg_pool"}]}"#,
    )
    .unwrap();
    let mut net = Network::from_config(&config, SEED).map_err(|e| e.to_string())?;
    net.forward(&uniform(&mut rng(5), &[8, 1, 12, 12], 0.0, 1.0), Mode::Train)
        .map_err(|e| e.to_string())?;
    let folded = fold_minmax(&net).map_err(|e| e.to_string())?;
    let fit = |d| fit_chebyshev(ActivationKind::elu(), d, (-3.0, 3.0), DEFAULT_SAMPLES).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut depths = Vec::new();
    for (name, plan) in [
        ("uniform5", uniform_plan(&folded, &fit(5))),
        ("hybrid", hybrid_plan(&folded, &fit(5), 1, &fit(2))),
    ] {
        let he = divfree_rewrite(&swap_activations(&folded, &plan).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("{name}.json"));
        write_json(&path, &he, false).map_err(|e| e.to_string())?;
        let out = Command::new(env!("CARGO_BIN_EXE_mmhe"))
            .args(["report-depth", "--fixed-point-k", "3", "--model"])
            .arg(&path)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).trim().to_string());
        }
        let report: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        depths.push(report["total_ct_ct_depth"].as_u64().unwrap_or(u64::MAX));
    }
    check(
        depths == [9, 5],
        format!("report-depth: uniform degree 5 = {}, hybrid 5/2/2 = {}", depths[0], depths[1]),
    )
}

fn report(results: &mut Vec<bool>, n: usize, name: &str, start: Instant, outcome: Outcome) {
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} {n} {name}: {detail} [{secs:.1}s]");
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();

    let t = Instant::now();
    report(&mut results, 1, "fold equivalence", t, fold_equivalence());
    let t = Instant::now();
    report(&mut results, 2, "gradient checks", t, gradient_checks());
    let t = Instant::now();
    report(&mut results, 3, "min-max range", t, minmax_range());
    let t = Instant::now();
    report(&mut results, 4, "approximation shape", t, approximation_shape());

    let t = Instant::now();
    let experiments = load_data().and_then(|data| {
        let b2 = swap_experiment(&trained("lenet5_elu_minmax.json", &data)?, &data)?;
        let b1 = swap_experiment(&trained("lenet5_elu_baseline.json", &data)?, &data)?;
        Ok((data, b1, b2))
    });
    match experiments {
        Ok((data, b1, b2)) => {
            report(&mut results, 5, "division-free argmax", t, divfree_argmax(&b2.he, &data.test));
            let drop2 = pct(b2.base - b2.poly);
            report(
                &mut results,
                6,
                "min-max MNIST",
                t,
                check(
                    b2.base >= 0.97 && drop2 <= 1.0,
                    format!(
                        "baseline 2 {:.2}%, swapped {:.2}%, drop {drop2:.2} points",
                        pct(b2.base),
                        pct(b2.poly)
                    ),
                ),
            );
            let drop1 = pct(b1.base - b1.poly);
            report(
                &mut results,
                7,
                "no-min-max contrast",
                t,
                check(
                    drop1 >= drop2 + 5.0,
                    format!(
                        "baseline 1 {:.2}%, swapped {:.2}%, drop {drop1:.2} vs {drop2:.2} points",
                        pct(b1.base),
                        pct(b1.poly)
                    ),
                ),
            );
        }
        Err(e) => {
            for (n, name) in [(5, "division-free argmax"), (6, "min-max MNIST"), (7, "no-min-max contrast")] {
                report(&mut results, n, name, t, Err(e.clone()));
            }
        }
    }

    let t = Instant::now();
    report(&mut results, 8, "hybrid depth", t, hybrid_depth());

    let failed = results.iter().filter(|ok| !**ok).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
