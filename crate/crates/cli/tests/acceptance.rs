//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! ```text
//! cargo test -p relprop-cli --test acceptance
//! ```

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relprop::eval::{
    accuracy_curve, distance_transform, localization, make_mask_from_values, Dataset, EvalMethod, EvalOptions, Mask,
    MaskMode, DEFAULT_PERCENTAGES,
};
use relprop::model::argmax;
use relprop::model_io::{load_image, load_model, load_object_mask};
use relprop::relevance::{attribute_with_seed, backward_avgpool, backward_conv, backward_maxpool, backward_residual};
use relprop::tensor::WindowGeometry;
use relprop::verify::{
    conservation_suite, oracle_suite, random_conv_net, random_dense_net, random_input, random_residual_net,
    random_tensor, relative_difference, PoolChoice,
};
use relprop::{attribute, Conv2D, Dense, Error, LayerSpec, MethodConfig, Network, Padding, Pool2D, Tensor};

const SEED: u64 = 20240;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn fixture(name: &str) -> Network {
    let d = fixtures();
    load_model(d.join(format!("{name}.json")), d.join(format!("{name}.bin"))).expect("fixture loads")
}

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let suites = oracle_suite(SEED, 100).expect("oracle suite runs");
    let elapsed = start.elapsed();
    let rlrp = &suites[0];
    let lrp0 = &suites[1];
    let passed = rlrp.passed() && lrp0.passed() && rlrp.compared >= 100 && lrp0.compared >= 100 && elapsed < Duration::from_secs(30);
    outcome(
        passed,
        format!(
            "rlrp {} nets worst {:.2e}; lrp0 {} nets (|denominator| >= 0.1) worst {:.2e}; {:.1}s",
            rlrp.compared,
            rlrp.worst,
            lrp0.compared,
            lrp0.worst,
            elapsed.as_secs_f64()
        ),
    )
}

fn conservation() -> Outcome {
    let suites = conservation_suite(SEED, 100).expect("conservation suite runs");
    let passed = suites.iter().all(|s| s.passed() && s.compared >= 100);
    let detail = suites
        .iter()
        .map(|s| format!("{} n={} worst {:.2e}", s.name, s.compared, s.worst))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(passed, detail)
}

/// Flatten, dense layer whose rows pair every input with a neighbour of opposite
/// weight, positive biases, ReLU and a positive read-out.
fn antisymmetric_net(rng: &mut ChaCha8Rng) -> (Network, Tensor) {
    let (h, w, c) = (rng.gen_range(1..=4), 2 * rng.gen_range(1..=3), rng.gen_range(1..=3));
    let n_in = h * w * c;
    let hidden = rng.gen_range(2..=8);
    let mut weights = Vec::with_capacity(hidden * n_in);
    for _ in 0..hidden {
        for _ in 0..n_in / 2 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            weights.extend([a, -a]);
        }
    }
    let net = Network::new(
        "antisymmetric",
        vec![h, w, c],
        vec![
            LayerSpec::Flatten,
            LayerSpec::Dense(Dense {
                weights: Tensor::new(vec![hidden, n_in], weights).unwrap(),
                bias: random_tensor(rng, &[hidden], 0.1, 1.0),
            }),
            LayerSpec::ReLU,
            LayerSpec::Dense(Dense {
                weights: random_tensor(rng, &[3, hidden], 0.1, 1.0),
                bias: Tensor::zeros(&[3]),
            }),
        ],
    )
    .unwrap();
    (net, Tensor::filled(&[h, w, c], rng.gen_range(0.1..1.0)))
}

fn rlrp_robustness() -> Outcome {
    let mut cases = vec![(
        fixture("zero_denominator"),
        load_image(fixtures().join("constant_2x2.ppm")).unwrap(),
    )];
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    cases.extend((0..50).map(|_| antisymmetric_net(&mut rng)));
    let mut failures = Vec::new();
    for (i, (net, x)) in cases.iter().enumerate() {
        let (logits, trace) = net.forward(x).unwrap();
        let LayerSpec::Dense(d) = &net.layers()[1] else { unreachable!() };
        let cancels = trace
            .output_of(1)
            .data()
            .iter()
            .zip(d.bias.data())
            .all(|(&y, &b)| y - b == 0.0);
        let k = argmax(logits.data());
        let rlrp_ok = attribute(net, &trace, k, &MethodConfig::rlrp()).is_ok_and(|m| m.values.is_finite());
        let lrp0_guarded = matches!(
            attribute(net, &trace, k, &MethodConfig::lrp0()),
            Err(Error::GuardedDenominator { .. })
        );
        if !(cancels && rlrp_ok && lrp0_guarded) {
            failures.push(format!("case {i}: cancels={cancels} rlrp_finite={rlrp_ok} lrp0_guarded={lrp0_guarded}"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} networks with every first-layer sum exactly 0: rlrp finite, lrp0 guarded", cases.len())
        } else {
            failures.join("; ")
        },
    )
}

fn homogeneity() -> Outcome {
    let mut cases: Vec<(Network, Tensor)> = Vec::new();
    let dataset = Dataset::load(fixtures().join("squares/dataset.json")).unwrap();
    cases.push((fixture("square_detector"), load_image(&dataset.records[0].image).unwrap()));
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    for name in ["dense2", "conv_small", "conv_pool", "resnet_small"] {
        let net = fixture(name);
        let x = random_tensor(&mut rng, net.input_shape(), 0.0, 1.0);
        cases.push((net, x));
    }
    for i in 0..60 {
        let net = match i % 3 {
            0 => random_dense_net(&mut rng, false),
            1 => random_conv_net(&mut rng, false, PoolChoice::Any),
            _ => random_residual_net(&mut rng, i % 2 == 0, false),
        };
        let x = random_input(&mut rng, &net);
        cases.push((net, x));
    }
    let cfg = MethodConfig::rlrp();
    let mut worst: f64 = 0.0;
    let mut mask_mismatch = 0;
    let mut degenerate = 0;
    let mut checked = 0;
    for (net, x) in &cases {
        let (logits, trace) = net.forward(x).unwrap();
        let k = argmax(logits.data());
        let logit = logits.data()[k];
        let base = attribute_with_seed(net, &trace, k, &cfg, logit).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let scaled = attribute_with_seed(net, &trace, k, &cfg, c * logit).unwrap();
            if !(base.diagnostics.is_empty() && scaled.diagnostics.is_empty()) {
                degenerate += 1;
                continue;
            }
            checked += 1;
            worst = worst.max(relative_difference(scaled.values.data(), base.values.scale(c).data()));
            let modes: &[MaskMode] = if x.rank() == 3 { &MaskMode::ALL } else { &MaskMode::ALL[..2] };
            for &mode in modes {
                for p in DEFAULT_PERCENTAGES {
                    if make_mask_from_values(&base.values, p, mode).unwrap()
                        != make_mask_from_values(&scaled.values, p, mode).unwrap()
                    {
                        mask_mismatch += 1;
                    }
                }
            }
        }
    }
    outcome(
        worst <= 1e-12 && mask_mismatch == 0 && checked > 0,
        format!(
            "{checked} (network, c) pairs, worst {worst:.2e}, {mask_mismatch} mask mismatches, \
             {degenerate} skipped for a degenerate residual path sum"
        ),
    )
}

fn pooling() -> Outcome {
    let mut problems = Vec::new();
    let cfg = MethodConfig::rlrp();
    let layer = Pool2D {
        pool: (2, 2),
        strides: (2, 2),
    };
    let window = |v: [f64; 4]| Tensor::new(vec![2, 2, 1], v.to_vec()).unwrap();
    let six = Tensor::filled(&[1, 1, 1], 6.0);

    let z = backward_maxpool(&layer, &window([1.0, 3.0, 2.0, 0.0]), &six, &cfg).unwrap();
    if !(z.data()[1] > 0.0 && [0, 2, 3].iter().all(|&i| z.data()[i] == 0.0)) {
        problems.push(format!("single argmax: {:?}", z.data()));
    }
    let z = backward_maxpool(&layer, &window([2.0; 4]), &six, &cfg).unwrap();
    if !(z.data()[0] > 0.0 && z.data().iter().all(|&v| v == z.data()[0])) {
        problems.push(format!("tied window: {:?}", z.data()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut off_argmax = 0;
    let mut avg_worst: f64 = 0.0;
    for _ in 0..200 {
        let (h, w, c) = (rng.gen_range(2..=8), rng.gen_range(2..=8), rng.gen_range(1..=3));
        let p = (rng.gen_range(1..=2usize).min(h), rng.gen_range(1..=2usize).min(w));
        let s = (rng.gen_range(1..=p.0), rng.gen_range(1..=p.1));
        let layer = Pool2D { pool: p, strides: s };
        let g = WindowGeometry::new((h, w), p, s, Padding::Valid).unwrap();
        let x = random_tensor(&mut rng, &[h, w, c], 0.0, 1.0).map(|v| (v * 4.0).floor());
        let z_out = random_tensor(&mut rng, &[g.out_h, g.out_w, c], 0.1, 1.0);
        let z = backward_maxpool(&layer, &x, &z_out, &cfg).unwrap();
        let mut on_argmax = vec![false; x.len()];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                for ch in 0..c {
                    let idx: Vec<usize> = (0..p.0)
                        .flat_map(|a| (0..p.1).map(move |b| (a, b)))
                        .map(|(a, b)| ((oh * s.0 + a) * w + ow * s.1 + b) * c + ch)
                        .collect();
                    let m = idx.iter().map(|&i| x.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                    idx.iter().filter(|&&i| x.data()[i] == m).for_each(|&i| on_argmax[i] = true);
                }
            }
        }
        off_argmax += z.data().iter().zip(&on_argmax).filter(|(&v, &on)| !on && v != 0.0).count();

        // avg-pool against the uniform-kernel convolution, one channel
        let x1 = random_tensor(&mut rng, &[h, w, 1], 0.0, 1.0);
        let z1 = random_tensor(&mut rng, &[g.out_h, g.out_w, 1], -1.0, 1.0);
        let conv = Conv2D {
            kernel: Tensor::filled(&[1, p.0, p.1, 1], 1.0 / (p.0 * p.1) as f64),
            bias: Tensor::zeros(&[1]),
            strides: s,
            padding: Padding::Valid,
        };
        let a = backward_avgpool(&layer, &x1, &z1, &cfg).unwrap();
        let b = backward_conv(&conv, &x1, &z1, &cfg).unwrap();
        avg_worst = avg_worst.max(relative_difference(a.data(), b.data()));
    }
    if off_argmax > 0 {
        problems.push(format!("{off_argmax} nonzero values off the argmax set"));
    }
    if avg_worst > 1e-12 {
        problems.push(format!("avg-pool vs uniform conv {avg_worst:.2e}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("argmax-only flow, ties shared, avg-pool vs uniform conv worst {avg_worst:.2e}")
        } else {
            problems.join("; ")
        },
    )
}

fn residual_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let cfg = MethodConfig::rlrp();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut degenerate = 0;
    for i in 0..300 {
        let net = random_residual_net(&mut rng, i % 2 == 0, false);
        let x = random_input(&mut rng, &net);
        let (_, trace) = net.forward(&x).unwrap();
        let LayerSpec::Residual(block) = &net.layers()[2] else { unreachable!() };
        let res = trace.residual(2).unwrap();
        let z_out = random_tensor(&mut rng, res.skip_output.shape(), -0.5, 1.0);
        let out_sum = z_out.sum();
        let r = backward_residual(block, trace.input(2), res, &z_out, &cfg).unwrap();
        // skip paths whose sum is mostly cancellation
        let cancelled = |t: &Tensor| t.sum().abs() < 1e-3 * t.data().iter().map(|v| v.abs()).sum::<f64>();
        if !r.diagnostics.is_empty() {
            degenerate += 1;
            continue;
        }
        if cancelled(&z_out) || cancelled(&r.skip_raw) || cancelled(&r.branch_raw) {
            continue;
        }
        checked += 1;
        for path in [r.skip_raw.sum() * r.skip_factor, r.branch_raw.sum() * r.branch_factor] {
            worst = worst.max((path - out_sum).abs() / out_sum.abs());
        }
    }

    let mut zero_ok = true;
    for _ in 0..20 {
        let net = random_residual_net(&mut rng, false, true);
        let x = random_input(&mut rng, &net);
        let (_, trace) = net.forward(&x).unwrap();
        let LayerSpec::Residual(block) = &net.layers()[2] else { unreachable!() };
        let res = trace.residual(2).unwrap();
        let z_out = random_tensor(&mut rng, res.skip_output.shape(), -1.0, 1.0);
        let r = backward_residual(block, trace.input(2), res, &z_out, &cfg).unwrap();
        zero_ok &= r.branch_raw.data().iter().all(|&v| v == 0.0) && r.z_in == z_out;
    }
    outcome(
        worst <= 1e-9 && checked >= 100 && zero_ok,
        format!("{checked} blocks ({degenerate} degenerate excluded), worst path-sum gap {worst:.2e}; zero branch reduces to skip: {zero_ok}"),
    )
}

struct Protocol {
    full_mask: Outcome,
    pointing: Outcome,
    versus_random: Outcome,
}

fn protocol() -> Protocol {
    let start = Instant::now();
    let net = fixture("square_detector");
    let dataset = Dataset::load(fixtures().join("squares/dataset.json")).unwrap();
    assert_eq!(dataset.records.len(), 1000);
    let opts = EvalOptions {
        percentages: Some(vec![10.0, 20.0, 100.0]),
        mode: MaskMode::PixelAbs,
        workers: 0,
        seed: SEED,
    };
    let rlrp = EvalMethod::Attribution(MethodConfig::rlrp());
    let curve = accuracy_curve(&net, &dataset, &rlrp, &opts).unwrap();
    let random = accuracy_curve(&net, &dataset, &EvalMethod::Random, &opts).unwrap();
    let loc = localization(&net, &dataset, &rlrp, &opts).unwrap();
    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(120);

    let at100 = curve.value("rlrp", "accuracy", Some(100.0)).unwrap();
    let label100 = curve.value("rlrp", "label_accuracy", Some(100.0)).unwrap();
    let unmasked_label = curve.value("rlrp", "unmasked_label_accuracy", None).unwrap();
    let full_mask = outcome(
        at100 == 1.0 && label100 == unmasked_label && in_time,
        format!(
            "accuracy at 100% = {at100} (unmasked 1), label accuracy {label100} vs unmasked {unmasked_label}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );

    let baseline = 16.0 / 256.0;
    let score = loc.value("rlrp", "pointing_game", Some(10.0)).unwrap();
    let pointing = outcome(
        score >= 2.0 * baseline && in_time,
        format!("pointing game at 10% = {score:.4} vs area baseline {baseline} (bar {})", 2.0 * baseline),
    );

    let ours = curve.value("rlrp", "accuracy", Some(20.0)).unwrap();
    let theirs = random.value("random", "accuracy", Some(20.0)).unwrap();
    let versus_random = outcome(
        ours >= theirs && curve.rows[0].n_images == random.rows[0].n_images && in_time,
        format!(
            "accuracy at 20%: rlrp {ours} vs random {theirs} over {} images",
            curve.rows[0].n_images
        ),
    );
    Protocol {
        full_mask,
        pointing,
        versus_random,
    }
}

fn brute_force(object: &Mask) -> Vec<f64> {
    let (h, w) = (object.shape()[0], object.shape()[1]);
    let sites: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| object.selected()[i])
        .map(|i| (i / w, i % w))
        .collect();
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            sites
                .iter()
                .map(|&(a, b)| ((r.abs_diff(a).pow(2) + c.abs_diff(b).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn distance_metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut masks = Vec::new();
    for (h, w) in [(1, 1), (1, 64), (64, 1), (64, 64), (2, 3)] {
        for corner in [0, h * w - 1] {
            let mut sel = vec![false; h * w];
            sel[corner] = true;
            masks.push(Mask::new(vec![h, w], sel).unwrap());
        }
        masks.push(Mask::new(vec![h, w], vec![true; h * w]).unwrap());
    }
    for _ in 0..300 {
        let (h, w) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let density: f64 = rng.gen_range(0.0..0.5);
        let mut sel: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density * density)).collect();
        sel[rng.gen_range(0..h * w)] = true;
        masks.push(Mask::new(vec![h, w], sel).unwrap());
    }
    let dataset = Dataset::load(fixtures().join("squares/dataset.json")).unwrap();
    for r in dataset.records.iter().take(200) {
        masks.push(load_object_mask(r.mask.as_ref().unwrap()).unwrap());
    }
    let mismatched = masks
        .iter()
        .filter(|m| distance_transform(m).unwrap() != brute_force(m))
        .count();
    outcome(
        mismatched == 0,
        format!("{} grids up to 64x64, {mismatched} differ from brute force", masks.len()),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, workers: &str| -> Vec<u8> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_relprop"))
            .args(["eval", "--model"])
            .arg(fixtures().join("square_detector.json"))
            .arg("--dataset")
            .arg(fixtures().join("squares/dataset.json"))
            .args(["--method", "rlrp,random", "--percentages", "5,20,60", "--seed", "7", "--workers", workers])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out).unwrap()
    };
    let a = run("a.csv", "2");
    let b = run("b.csv", "2");
    let c = run("c.csv", "1");
    outcome(
        a == b && a == c && !a.is_empty(),
        format!("3 runs (2, 2 and 1 workers), {} bytes, identical: {}", a.len(), a == b && a == c),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("oracle equivalence", oracle_equivalence()),
        ("conservation", conservation()),
        ("rlrp robustness", rlrp_robustness()),
        ("homogeneity", homogeneity()),
        ("pooling", pooling()),
        ("residual normalization", residual_normalization()),
    ];
    let p = protocol();
    results.push(("protocol (a) full mask", p.full_mask));
    results.push(("protocol (b) pointing game", p.pointing));
    results.push(("protocol (c) versus random", p.versus_random));
    results.push(("distance transform", distance_metric()));
    results.push(("determinism", determinism()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
