//! Seeded random networks and the self-checks run by `relprop verify`:
//! engine against the edge oracle, and conservation of LRP-0 and LRP-αβ.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{argmax, Conv2D, Dense, ForwardTrace, LayerSpec, Network, Pool2D, ResidualBlock, Skip};
use crate::oracle::{explode, oracle_attribute, OracleRule};
use crate::relevance::{attribute, MethodConfig, Rule, SumTag};
use crate::tensor::{conv2d, Padding, Tensor};

/// Denominator magnitude below which random samples are rejected for LRP-0 and LRP-αβ.
pub const SAMPLE_DENOMINATOR_FLOOR: f64 = 0.1;

/// `max |a - b| / max |b|`, or the plain maximum difference when `b` is all zeros.
pub fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_difference on slices of different length");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches length")
}

fn random_dense(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, zero_bias: bool) -> Dense {
    let bound = (3.0 / n_in as f64).sqrt();
    Dense {
        weights: random_tensor(rng, &[n_out, n_in], -bound, bound),
        bias: if zero_bias {
            Tensor::zeros(&[n_out])
        } else {
            random_tensor(rng, &[n_out], -0.2, 0.2)
        },
    }
}

fn random_conv(
    rng: &mut ChaCha8Rng,
    cin: usize,
    cout: usize,
    k: (usize, usize),
    strides: (usize, usize),
    padding: Padding,
    zero_bias: bool,
) -> Conv2D {
    let bound = (3.0 / (k.0 * k.1 * cin) as f64).sqrt();
    Conv2D {
        kernel: random_tensor(rng, &[cout, k.0, k.1, cin], -bound, bound),
        bias: if zero_bias {
            Tensor::zeros(&[cout])
        } else {
            random_tensor(rng, &[cout], -0.2, 0.2)
        },
        strides,
        padding,
    }
}

/// Dense ReLU network with 2 to 4 dense layers of at most 64 units.
pub fn random_dense_net(rng: &mut ChaCha8Rng, zero_bias: bool) -> Network {
    let depth = rng.gen_range(2..=4);
    let mut widths = vec![rng.gen_range(2..=64)];
    for _ in 1..depth {
        widths.push(rng.gen_range(2..=64));
    }
    widths.push(rng.gen_range(2..=6));
    let mut layers = Vec::new();
    for l in 0..depth {
        layers.push(LayerSpec::Dense(random_dense(rng, widths[l], widths[l + 1], zero_bias)));
        if l + 1 < depth {
            layers.push(LayerSpec::ReLU);
        }
    }
    Network::new("random-dense", vec![widths[0]], layers).expect("generated dense shapes are consistent")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolChoice {
    None,
    Max,
    Avg,
    /// Max or average at random, or no pool.
    Any,
}

/// Convolutional network on an input of at most 8x8, with one or two
/// convolutions, at most one pooling layer and a dense read-out.
pub fn random_conv_net(rng: &mut ChaCha8Rng, zero_bias: bool, pool: PoolChoice) -> Network {
    loop {
        let h = rng.gen_range(3..=8);
        let w = rng.gen_range(3..=8);
        let cin = rng.gen_range(1..=3);
        let n_conv = rng.gen_range(1..=2);
        let pool = match pool {
            PoolChoice::Any => [PoolChoice::None, PoolChoice::Max, PoolChoice::Avg][rng.gen_range(0..3)],
            p => p,
        };
        let pool_after = rng.gen_range(0..n_conv);
        let mut layers = Vec::new();
        let mut c = cin;
        for i in 0..n_conv {
            let k = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let strides = (rng.gen_range(1..=k.0), rng.gen_range(1..=k.1));
            let padding = if rng.gen_bool(0.5) { Padding::Valid } else { Padding::Same };
            let cout = rng.gen_range(1..=4);
            layers.push(LayerSpec::Conv2D(random_conv(rng, c, cout, k, strides, padding, zero_bias)));
            layers.push(LayerSpec::ReLU);
            c = cout;
            if i == pool_after && pool != PoolChoice::None {
                let window = (rng.gen_range(1..=2), rng.gen_range(1..=2));
                let strides = (rng.gen_range(1..=window.0), rng.gen_range(1..=window.1));
                let p = Pool2D { pool: window, strides };
                layers.push(if pool == PoolChoice::Max {
                    LayerSpec::MaxPool2D(p)
                } else {
                    LayerSpec::AvgPool2D(p)
                });
            }
        }
        layers.push(LayerSpec::Flatten);
        let Ok(probe) = Network::new("probe", vec![h, w, cin], layers.clone()) else {
            continue;
        };
        let (_, trace) = probe
            .forward(&Tensor::zeros(&[h, w, cin]))
            .expect("zero input is finite");
        // every input must feed some neuron, as in a graph without isolated vertices
        if explode(&probe, &trace).is_err() {
            continue;
        }
        let flat = trace.output().len();
        let n_out = rng.gen_range(2..=5);
        layers.push(LayerSpec::Dense(random_dense(rng, flat, n_out, zero_bias)));
        return Network::new("random-conv", vec![h, w, cin], layers).expect("probe validated the shapes");
    }
}

/// One residual block on an `[h, w, c]` input, with an identity or a strided
/// projection skip. A zero branch has all-zero weights and biases.
pub fn random_residual_block(
    rng: &mut ChaCha8Rng,
    c: usize,
    projection: bool,
    zero_branch: bool,
    zero_bias: bool,
) -> ResidualBlock {
    let stride = if projection { (2, 2) } else { (1, 1) };
    let cout = if projection { rng.gen_range(1..=4) } else { c };
    let mut first = random_conv(rng, c, cout, (3, 3), stride, Padding::Same, zero_bias);
    let mut second = random_conv(rng, cout, cout, (3, 3), (1, 1), Padding::Same, zero_bias);
    if zero_branch {
        for conv in [&mut first, &mut second] {
            conv.kernel = Tensor::zeros(conv.kernel.shape());
            conv.bias = Tensor::zeros(conv.bias.shape());
        }
    }
    let skip = if projection {
        let mut p = random_conv(rng, c, cout, (1, 1), (2, 2), Padding::Same, true);
        p.bias = Tensor::zeros(&[cout]);
        Skip::Projection(p)
    } else {
        Skip::Identity
    };
    ResidualBlock {
        branch: vec![LayerSpec::Conv2D(first), LayerSpec::ReLU, LayerSpec::Conv2D(second)],
        skip,
    }
}

/// Conv stem, one residual block, then a dense read-out.
pub fn random_residual_net(rng: &mut ChaCha8Rng, projection: bool, zero_branch: bool) -> Network {
    let h = rng.gen_range(4..=8);
    let w = rng.gen_range(4..=8);
    let cin = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=4);
    let stem = random_conv(rng, cin, c, (3, 3), (1, 1), Padding::Same, false);
    let block = random_residual_block(rng, c, projection, zero_branch, false);
    let mut layers = vec![LayerSpec::Conv2D(stem), LayerSpec::ReLU, LayerSpec::Residual(block), LayerSpec::ReLU, LayerSpec::Flatten];
    let probe = Network::new("probe", vec![h, w, cin], layers.clone()).expect("residual shapes are consistent");
    let flat = probe.forward(&Tensor::zeros(&[h, w, cin])).expect("zero input is finite").1.output().len();
    let n_out = rng.gen_range(2..=5);
    layers.push(LayerSpec::Dense(random_dense(rng, flat, n_out, false)));
    Network::new("random-residual", vec![h, w, cin], layers).expect("probe validated the shapes")
}

pub fn random_input(rng: &mut ChaCha8Rng, net: &Network) -> Tensor {
    random_tensor(rng, net.input_shape(), -1.0, 1.0)
}

/// Outcome of comparing the engine with the oracle on one network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Comparison {
    Compared(f64),
    /// LRP-0 hit a denominator under the sampling floor.
    Rejected,
}

/// Engine vs oracle on `input`, explaining the predicted class.
pub fn compare_with_oracle(net: &Network, input: &Tensor, rule: OracleRule) -> Result<Comparison> {
    let (logits, trace) = net.forward(input)?;
    let k = argmax(logits.data());
    let cfg = match rule {
        OracleRule::Rlrp => MethodConfig::rlrp(),
        OracleRule::Lrp0 => MethodConfig::lrp0().with_guard(SAMPLE_DENOMINATOR_FLOOR),
    };
    let engine = match attribute(net, &trace, k, &cfg) {
        Ok(map) => map.values,
        Err(Error::GuardedDenominator { .. }) if rule == OracleRule::Lrp0 => return Ok(Comparison::Rejected),
        Err(e) => return Err(e),
    };
    let graph = explode(net, &trace)?;
    let activations = graph.evaluate(input.data())?;
    let oracle = oracle_attribute(&graph, &activations, k, rule)?;
    Ok(Comparison::Compared(relative_difference(engine.data(), &oracle)))
}

/// Largest relative gap between the seed and any per-layer input-side sum.
pub fn conservation_gap(net: &Network, trace: &ForwardTrace, k: usize, cfg: &MethodConfig) -> Result<f64> {
    let map = attribute(net, trace, k, cfg)?;
    let seed = trace.output().data()[k];
    Ok(map
        .layer_sums
        .iter()
        .filter(|s| s.tag == SumTag::Input)
        .map(|s| (s.sum - seed).abs() / seed.abs())
        .fold(0.0, f64::max))
}

fn split_denominators(layer: &LayerSpec, x: &Tensor) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let pos = |v: f64| v.max(0.0);
    let neg = |v: f64| v.min(0.0);
    let (xp, xn) = (x.map(pos), x.map(neg));
    let (d_pos, d_neg) = match layer {
        LayerSpec::Dense(d) => {
            let n_in = d.weights.shape()[1];
            let mut dp = vec![0.0; d.weights.shape()[0]];
            let mut dn = dp.clone();
            for (j, row) in d.weights.data().chunks_exact(n_in).enumerate() {
                for (&w, &xi) in row.iter().zip(x.data()) {
                    let c = w * xi;
                    if c > 0.0 {
                        dp[j] += c;
                    } else {
                        dn[j] += c;
                    }
                }
            }
            (dp, dn)
        }
        LayerSpec::Conv2D(c) => {
            let (kp, kn) = (c.kernel.map(pos), c.kernel.map(neg));
            let conv = |input: &Tensor, k: &Tensor| conv2d(input, k, None, c.strides, c.padding);
            let dp = conv(&xp, &kp)?.add(&conv(&xn, &kn)?)?;
            let dn = conv(&xn, &kp)?.add(&conv(&xp, &kn)?)?;
            (dp.into_data(), dn.into_data())
        }
        _ => return Ok(None),
    };
    Ok(Some((d_pos, d_neg)))
}

/// Whether every neuron that can carry αβ relevance has both split
/// denominators at least `floor` in magnitude. Only neurons with a positive
/// post-activation output (or the selected logit) are checked.
pub fn alpha_beta_well_posed(net: &Network, trace: &ForwardTrace, k: usize, floor: f64) -> Result<bool> {
    let layers = net.layers();
    for (i, layer) in layers.iter().enumerate() {
        let Some((dp, dn)) = split_denominators(layer, trace.input(i))? else {
            if matches!(layer, LayerSpec::MaxPool2D(_) | LayerSpec::AvgPool2D(_) | LayerSpec::Residual(_)) {
                return Ok(false);
            }
            continue;
        };
        let live: Vec<bool> = if i + 1 == layers.len() {
            (0..dp.len()).map(|j| j == k).collect()
        } else if matches!(layers[i + 1], LayerSpec::ReLU) {
            trace.output_of(i + 1).data().iter().map(|&v| v > 0.0).collect()
        } else {
            vec![true; dp.len()]
        };
        if live
            .iter()
            .zip(dp.iter().zip(&dn))
            .any(|(&l, (p, n))| l && (p.abs() < floor || n.abs() < floor))
        {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSummary {
    pub name: String,
    pub compared: usize,
    pub rejected: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.compared > 0 && self.worst <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} compared, {} rejected, worst {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.compared,
            self.rejected,
            self.worst,
            self.tolerance
        )
    }
}

fn summary(name: &str, results: &[Comparison], tolerance: f64) -> SuiteSummary {
    let compared: Vec<f64> = results
        .iter()
        .filter_map(|c| match c {
            Comparison::Compared(d) => Some(*d),
            Comparison::Rejected => None,
        })
        .collect();
    SuiteSummary {
        name: name.into(),
        compared: compared.len(),
        rejected: results.len() - compared.len(),
        worst: compared.iter().copied().fold(0.0, f64::max),
        tolerance,
    }
}

fn compared(results: &[Comparison]) -> usize {
    results.iter().filter(|c| matches!(c, Comparison::Compared(_))).count()
}

/// Engine vs oracle on random networks, alternating dense and convolutional,
/// under relative LRP and LRP-0. Networks are drawn until each rule has been
/// compared on at least `min_nets` of them (or 50 times that many were drawn).
pub fn oracle_suite(seed: u64, min_nets: usize) -> Result<Vec<SuiteSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rlrp = Vec::new();
    let mut lrp0 = Vec::new();
    let mut i = 0;
    while compared(&lrp0) < min_nets && i < 50 * min_nets {
        let zero_bias = rng.gen_bool(0.3);
        let net = if i % 2 == 0 {
            random_dense_net(&mut rng, zero_bias)
        } else {
            random_conv_net(&mut rng, zero_bias, PoolChoice::Any)
        };
        let input = random_input(&mut rng, &net);
        rlrp.push(compare_with_oracle(&net, &input, OracleRule::Rlrp)?);
        lrp0.push(compare_with_oracle(&net, &input, OracleRule::Lrp0)?);
        i += 1;
    }
    Ok(vec![
        summary("oracle equivalence (rlrp)", &rlrp, 1e-8),
        summary("oracle equivalence (lrp0)", &lrp0, 1e-8),
    ])
}

/// Per-layer sums against the selected logit on zero-bias random networks,
/// for LRP-0 and LRP-αβ with α + β = 1. Networks are drawn until every rule
/// has at least `min_nets` well-posed samples (or 50 times that many were drawn).
pub fn conservation_suite(seed: u64, min_nets: usize) -> Result<Vec<SuiteSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rules = [
        Rule::Lrp0,
        Rule::LrpAlphaBeta { alpha: 2.0, beta: -1.0 },
        Rule::LrpAlphaBeta { alpha: 0.5, beta: 0.5 },
    ];
    let mut results = vec![Vec::new(); rules.len()];
    let mut i = 0;
    while results.iter().any(|r| compared(r) < min_nets) && i < 50 * min_nets {
        let net = if i % 2 == 0 {
            random_dense_net(&mut rng, true)
        } else {
            random_conv_net(&mut rng, true, PoolChoice::None)
        };
        i += 1;
        let input = random_input(&mut rng, &net);
        let (logits, trace) = net.forward(&input)?;
        let k = argmax(logits.data());
        if logits.data()[k].abs() < SAMPLE_DENOMINATOR_FLOOR {
            results.iter_mut().for_each(|r| r.push(Comparison::Rejected));
            continue;
        }
        for (rule, out) in rules.iter().zip(results.iter_mut()) {
            let cfg = MethodConfig::new(*rule).with_guard(SAMPLE_DENOMINATOR_FLOOR);
            let posed = match rule {
                Rule::LrpAlphaBeta { .. } => alpha_beta_well_posed(&net, &trace, k, SAMPLE_DENOMINATOR_FLOOR)?,
                _ => true,
            };
            if !posed {
                out.push(Comparison::Rejected);
                continue;
            }
            out.push(match conservation_gap(&net, &trace, k, &cfg) {
                Ok(gap) => Comparison::Compared(gap),
                Err(Error::GuardedDenominator { .. }) => Comparison::Rejected,
                Err(e) => return Err(e),
            });
        }
    }
    Ok(rules
        .iter()
        .zip(&results)
        .map(|(rule, r)| summary(&format!("conservation ({rule})"), r, 1e-6))
        .collect())
}

/// Engine vs oracle on a given network with `n_inputs` random inputs.
/// Networks the oracle cannot represent yield `Ok(None)`.
pub fn fixture_oracle_check(net: &Network, seed: u64, n_inputs: usize) -> Result<Option<SuiteSummary>> {
    if net.layers().iter().any(|l| matches!(l, LayerSpec::Residual(_))) {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::with_capacity(n_inputs);
    for _ in 0..n_inputs {
        let input = random_tensor(&mut rng, net.input_shape(), 0.0, 1.0);
        let x = net.preprocessing.apply(&input)?;
        results.push(match compare_with_oracle(net, &x, OracleRule::Rlrp) {
            Err(Error::SizeCap { .. }) => return Ok(None),
            other => other?,
        });
    }
    Ok(Some(summary(&format!("oracle equivalence on {}", net.name), &results, 1e-8)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_difference_scales_by_reference() {
        assert_eq!(relative_difference(&[1.0, 2.0], &[1.0, 4.0]), 0.5);
        assert_eq!(relative_difference(&[0.5], &[0.0]), 0.5);
    }

    #[test]
    fn generators_are_deterministic() {
        let a = random_conv_net(&mut ChaCha8Rng::seed_from_u64(9), false, PoolChoice::Any);
        let b = random_conv_net(&mut ChaCha8Rng::seed_from_u64(9), false, PoolChoice::Any);
        assert_eq!(a, b);
        let r = random_residual_net(&mut ChaCha8Rng::seed_from_u64(1), true, false);
        assert!(r.layers().iter().any(|l| matches!(l, LayerSpec::Residual(_))));
    }

    #[test]
    fn small_oracle_suite_passes() {
        for s in oracle_suite(5, 10).unwrap() {
            assert!(s.passed(), "{}", s.line());
        }
    }

    #[test]
    fn small_conservation_suite_passes() {
        for s in conservation_suite(5, 12).unwrap() {
            assert!(s.passed(), "{}", s.line());
        }
    }
}
