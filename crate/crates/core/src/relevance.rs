//! Backward relevance propagation.
//!
//! Every linear layer (dense, convolution, pooling) is treated as a linear map
//! `A` with a transpose `Aᵀ`. The rules then reduce to a few vector operations:
//!
//! * LRP-0 / ε / γ: `z_in = x ⊙ Aᵀ(z_out ⊘ A(x))` with the rule's weights and
//!   stabilised denominator.
//! * LRP-αβ: the same, once for positive and once for negative contributions.
//! * Relative LRP: `z_in = x ⊙ card / N_out ⊙ Aᵀ(z_out ⊘ fan_in)` where `fan_in`
//!   counts the inputs wired to each output neuron and `card` counts the output
//!   neurons wired to each input. There is no data-dependent denominator.
//!
//! Biases never enter the denominators. ReLU and Flatten pass relevance through.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Conv2D, Dense, ForwardTrace, LayerSpec, Network, Pool2D, ResidualBlock, ResidualTrace, Skip};
use crate::tensor::{self, Padding, Tensor, WindowGeometry};

pub const DEFAULT_DENOMINATOR_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Rule {
    Lrp0,
    LrpEpsilon { epsilon: f64 },
    LrpGamma { gamma: f64 },
    LrpAlphaBeta { alpha: f64, beta: f64 },
    Rlrp,
}

impl Rule {
    pub fn name(&self) -> &'static str {
        match self {
            Rule::Lrp0 => "lrp0",
            Rule::LrpEpsilon { .. } => "lrp-eps",
            Rule::LrpGamma { .. } => "lrp-gamma",
            Rule::LrpAlphaBeta { .. } => "lrp-ab",
            Rule::Rlrp => "rlrp",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rule::Lrp0 | Rule::Rlrp => f.write_str(self.name()),
            Rule::LrpEpsilon { epsilon } => write!(f, "lrp-eps[eps={epsilon}]"),
            Rule::LrpGamma { gamma } => write!(f, "lrp-gamma[gamma={gamma}]"),
            Rule::LrpAlphaBeta { alpha, beta } => write!(f, "lrp-ab[alpha={alpha};beta={beta}]"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    #[serde(flatten)]
    pub rule: Rule,
    /// Absolute threshold under which an LRP denominator is treated as zero.
    pub denominator_guard: f64,
}

impl MethodConfig {
    pub fn new(rule: Rule) -> Self {
        Self {
            rule,
            denominator_guard: DEFAULT_DENOMINATOR_GUARD,
        }
    }

    pub fn rlrp() -> Self {
        Self::new(Rule::Rlrp)
    }

    pub fn lrp0() -> Self {
        Self::new(Rule::Lrp0)
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.denominator_guard = guard;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if !(self.denominator_guard >= 0.0 && self.denominator_guard.is_finite()) {
            return bad(format!("denominator guard {} must be finite and >= 0", self.denominator_guard));
        }
        match self.rule {
            Rule::LrpEpsilon { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                bad(format!("epsilon {epsilon} must be > 0"))
            }
            Rule::LrpGamma { gamma } if !(gamma >= 0.0 && gamma.is_finite()) => {
                bad(format!("gamma {gamma} must be >= 0"))
            }
            Rule::LrpAlphaBeta { alpha, beta } if !(alpha.is_finite() && beta.is_finite()) => {
                bad(format!("alpha {alpha} and beta {beta} must be finite"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MethodConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.rule.fmt(f)
    }
}

/// Where a recorded relevance sum was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SumTag {
    /// The seed at the network output.
    Output,
    /// Input side of a layer.
    Input,
    /// Skip path of a residual block, before path normalisation.
    SkipRaw,
    /// Branch path of a residual block, before path normalisation.
    BranchRaw,
    SkipScaled,
    BranchScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSum {
    pub layer: usize,
    pub tag: SumTag,
    pub sum: f64,
}

/// Per-input relevance for one selected output.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMap {
    pub values: Tensor,
    pub selected_output: usize,
    pub method: MethodConfig,
    /// Sums recorded on the way back, ordered from the output towards the input.
    pub layer_sums: Vec<LayerSum>,
    /// Notes about degenerate cases that were handled without failing.
    pub diagnostics: Vec<String>,
}

impl ContributionMap {
    /// Sums with tag [`SumTag::Input`] or [`SumTag::Output`], i.e. one per top-level layer boundary.
    pub fn boundary_sums(&self) -> impl Iterator<Item = &LayerSum> {
        self.layer_sums
            .iter()
            .filter(|s| matches!(s.tag, SumTag::Input | SumTag::Output))
    }
}

/// Attributes output `k` of `net`, seeding it with its own logit.
pub fn attribute(net: &Network, trace: &ForwardTrace, k: usize, cfg: &MethodConfig) -> Result<ContributionMap> {
    let logits = trace.output();
    if k >= logits.len() {
        return Err(Error::Domain(format!(
            "selected output {k} out of range for {} outputs",
            logits.len()
        )));
    }
    attribute_with_seed(net, trace, k, cfg, logits.data()[k])
}

/// Attributes output `k` starting from an arbitrary seed value instead of the logit.
pub fn attribute_with_seed(
    net: &Network,
    trace: &ForwardTrace,
    k: usize,
    cfg: &MethodConfig,
    seed: f64,
) -> Result<ContributionMap> {
    cfg.validate()?;
    if trace.len() != net.layers().len() {
        return Err(Error::Dimension(format!(
            "trace has {} layers, network has {}",
            trace.len(),
            net.layers().len()
        )));
    }
    if k >= net.num_outputs() {
        return Err(Error::Domain(format!(
            "selected output {k} out of range for {} outputs",
            net.num_outputs()
        )));
    }
    if !seed.is_finite() {
        return Err(Error::NonFinite {
            location: "relevance seed".into(),
        });
    }
    let mut z = Tensor::zeros(trace.output().shape());
    z.data_mut()[k] = seed;

    let mut layer_sums = vec![LayerSum {
        layer: net.layers().len(),
        tag: SumTag::Output,
        sum: seed,
    }];
    let mut diagnostics = Vec::new();
    let mut record = Recorder {
        sums: Some(&mut layer_sums),
        diagnostics: &mut diagnostics,
    };
    let values = backward_layers(net.layers(), trace, z, cfg, "", &mut record)?;
    Ok(ContributionMap {
        values,
        selected_output: k,
        method: *cfg,
        layer_sums,
        diagnostics,
    })
}

struct Recorder<'a> {
    sums: Option<&'a mut Vec<LayerSum>>,
    diagnostics: &'a mut Vec<String>,
}

impl Recorder<'_> {
    fn sum(&mut self, layer: usize, tag: SumTag, sum: f64) {
        if let Some(s) = self.sums.as_deref_mut() {
            s.push(LayerSum { layer, tag, sum });
        }
    }
}

fn backward_layers(
    layers: &[LayerSpec],
    trace: &ForwardTrace,
    mut z: Tensor,
    cfg: &MethodConfig,
    prefix: &str,
    rec: &mut Recorder<'_>,
) -> Result<Tensor> {
    for (i, layer) in layers.iter().enumerate().rev() {
        let x = trace.input(i);
        let label = format!("{prefix}layer {i} ({})", layer.kind());
        z = match layer {
            LayerSpec::Dense(d) => linear_backward(&LinearMap::dense(d), x, &z, cfg, &label)?,
            LayerSpec::Conv2D(c) => linear_backward(&LinearMap::conv(c, x)?, x, &z, cfg, &label)?,
            LayerSpec::MaxPool2D(p) => linear_backward(&LinearMap::max_pool(p, x)?, x, &z, cfg, &label)?,
            LayerSpec::AvgPool2D(p) => linear_backward(&LinearMap::avg_pool(p, x)?, x, &z, cfg, &label)?,
            LayerSpec::Flatten => z.reshape(x.shape().to_vec())?,
            LayerSpec::ReLU => z,
            LayerSpec::Residual(block) => {
                let res_trace = trace.residual(i).ok_or_else(|| {
                    Error::Dimension(format!("{label}: trace holds no residual record"))
                })?;
                let r = residual_backward(block, x, res_trace, &z, cfg, &label)?;
                rec.sum(i, SumTag::SkipRaw, r.skip_raw.sum());
                rec.sum(i, SumTag::BranchRaw, r.branch_raw.sum());
                rec.sum(i, SumTag::SkipScaled, r.skip_raw.sum() * r.skip_factor);
                rec.sum(i, SumTag::BranchScaled, r.branch_raw.sum() * r.branch_factor);
                rec.diagnostics.extend(r.diagnostics);
                r.z_in
            }
        };
        if !z.is_finite() {
            return Err(Error::NonFinite {
                location: format!("{label} relevance under {}", cfg.rule),
            });
        }
        rec.sum(i, SumTag::Input, z.sum());
    }
    Ok(z)
}

/// Result of propagating through one residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRelevance {
    pub z_in: Tensor,
    /// Skip-path relevance at the block input, before normalisation.
    pub skip_raw: Tensor,
    /// Branch-path relevance at the block input, before normalisation.
    pub branch_raw: Tensor,
    pub skip_factor: f64,
    pub branch_factor: f64,
    pub diagnostics: Vec<String>,
}

/// Backward pass through `branch(x) + skip(x)`.
///
/// Under relative LRP both paths are seeded with the full `z_out` and each is
/// rescaled so its input-side sum equals its output-side sum before the two are
/// added. A path whose input-side sum is below `guard * max(1, |out_sum|)` is
/// left unscaled and a diagnostic is recorded. Under the other rules the sum node
/// splits `z_out` between the paths with the rule itself and no rescaling occurs.
pub fn backward_residual(
    block: &ResidualBlock,
    x_in: &Tensor,
    trace: &ResidualTrace,
    z_out: &Tensor,
    cfg: &MethodConfig,
) -> Result<ResidualRelevance> {
    cfg.validate()?;
    if z_out.shape() != trace.skip_output.shape() {
        return Err(Error::Dimension(format!(
            "relevance {:?} does not match block output {:?}",
            z_out.shape(),
            trace.skip_output.shape()
        )));
    }
    residual_backward(block, x_in, trace, z_out, cfg, "residual block")
}

fn residual_backward(
    block: &ResidualBlock,
    x_in: &Tensor,
    trace: &ResidualTrace,
    z_out: &Tensor,
    cfg: &MethodConfig,
    label: &str,
) -> Result<ResidualRelevance> {
    let mut diagnostics = Vec::new();
    let (seed_branch, seed_skip) = match cfg.rule {
        Rule::Rlrp => (z_out.clone(), z_out.clone()),
        _ => split_sum_node(trace.branch.output(), &trace.skip_output, z_out, cfg, label)?,
    };
    let skip_raw = match &block.skip {
        Skip::Identity => seed_skip,
        Skip::Projection(conv) => {
            let map = LinearMap::conv(conv, x_in)?;
            linear_backward(&map, x_in, &seed_skip, cfg, &format!("{label} skip"))?
        }
    };
    let mut inner = Recorder {
        sums: None,
        diagnostics: &mut diagnostics,
    };
    let branch_raw = backward_layers(
        &block.branch,
        &trace.branch,
        seed_branch,
        cfg,
        &format!("{label} branch "),
        &mut inner,
    )?;

    let (skip_factor, branch_factor) = match cfg.rule {
        Rule::Rlrp => {
            let out_sum = z_out.sum();
            let mut factor = |raw: &Tensor, path: &str| {
                let in_sum = raw.sum();
                if in_sum.abs() < cfg.denominator_guard * out_sum.abs().max(1.0) {
                    diagnostics.push(format!(
                        "{label}: {path} path input sum {in_sum:e} is degenerate; left unscaled"
                    ));
                    1.0
                } else {
                    out_sum / in_sum
                }
            };
            (factor(&skip_raw, "skip"), factor(&branch_raw, "branch"))
        }
        _ => (1.0, 1.0),
    };
    let z_in = skip_raw.scale(skip_factor).add(&branch_raw.scale(branch_factor))?;
    Ok(ResidualRelevance {
        z_in,
        skip_raw,
        branch_raw,
        skip_factor,
        branch_factor,
        diagnostics,
    })
}

/// Splits relevance at `y = a + b` between the two summands with a baseline rule,
/// treating each element as a neuron with two unit-weight inputs.
fn split_sum_node(
    a: &Tensor,
    b: &Tensor,
    z: &Tensor,
    cfg: &MethodConfig,
    label: &str,
) -> Result<(Tensor, Tensor)> {
    let n = z.len();
    let mut za = vec![0.0; n];
    let mut zb = vec![0.0; n];
    for j in 0..n {
        let (av, bv, zj) = (a.data()[j], b.data()[j], z.data()[j]);
        if zj == 0.0 {
            continue;
        }
        match cfg.rule {
            Rule::Lrp0 | Rule::LrpGamma { .. } => {
                let d = guarded(av + bv, cfg, label, j)?;
                za[j] = av / d * zj;
                zb[j] = bv / d * zj;
            }
            Rule::LrpEpsilon { epsilon } => {
                let d = epsilon + av + bv;
                za[j] = av / d * zj;
                zb[j] = bv / d * zj;
            }
            Rule::LrpAlphaBeta { alpha, beta } => {
                let (ap, an) = (av.max(0.0), av.min(0.0));
                let (bp, bn) = (bv.max(0.0), bv.min(0.0));
                let dp = ap + bp;
                let dn = an + bn;
                if dp != 0.0 {
                    za[j] += alpha * ap / dp * zj;
                    zb[j] += alpha * bp / dp * zj;
                }
                if dn != 0.0 {
                    za[j] += beta * an / dn * zj;
                    zb[j] += beta * bn / dn * zj;
                }
            }
            Rule::Rlrp => unreachable!(),
        }
    }
    Ok((
        Tensor::from_parts(z.shape().to_vec(), za),
        Tensor::from_parts(z.shape().to_vec(), zb),
    ))
}

fn guarded(d: f64, cfg: &MethodConfig, label: &str, neuron: usize) -> Result<f64> {
    if d.abs() < cfg.denominator_guard || d == 0.0 {
        return Err(Error::GuardedDenominator {
            location: label.to_string(),
            rule: cfg.rule.to_string(),
            neuron,
            value: d,
            guard: cfg.denominator_guard,
        });
    }
    Ok(d)
}

fn check_io(x_in: &Tensor, z_out: &Tensor, expected_out: &[usize]) -> Result<()> {
    if z_out.shape() != expected_out {
        return Err(Error::Dimension(format!(
            "relevance {:?} does not match layer output {expected_out:?} for input {:?}",
            z_out.shape(),
            x_in.shape()
        )));
    }
    Ok(())
}

/// Backward step through a dense layer.
pub fn backward_dense(layer: &Dense, x_in: &Tensor, z_out: &Tensor, cfg: &MethodConfig) -> Result<Tensor> {
    cfg.validate()?;
    let out = LayerSpec::Dense(layer.clone())
        .output_shape(x_in.shape())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    check_io(x_in, z_out, &out)?;
    linear_backward(&LinearMap::dense(layer), x_in, z_out, cfg, "dense")
}

/// Backward step through a convolution. Relative LRP uses the transposed convolution.
pub fn backward_conv(layer: &Conv2D, x_in: &Tensor, z_out: &Tensor, cfg: &MethodConfig) -> Result<Tensor> {
    cfg.validate()?;
    let out = LayerSpec::Conv2D(layer.clone())
        .output_shape(x_in.shape())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    check_io(x_in, z_out, &out)?;
    linear_backward(&LinearMap::conv(layer, x_in)?, x_in, z_out, cfg, "conv2d")
}

/// Backward step through max pooling: relevance only reaches the positions that
/// attain their window's maximum, every tied position included.
pub fn backward_maxpool(layer: &Pool2D, x_in: &Tensor, z_out: &Tensor, cfg: &MethodConfig) -> Result<Tensor> {
    cfg.validate()?;
    let map = LinearMap::max_pool(layer, x_in)?;
    check_io(x_in, z_out, &map.out_shape())?;
    linear_backward(&map, x_in, z_out, cfg, "max_pool2d")
}

/// Backward step through average pooling (a convolution with uniform weights).
pub fn backward_avgpool(layer: &Pool2D, x_in: &Tensor, z_out: &Tensor, cfg: &MethodConfig) -> Result<Tensor> {
    cfg.validate()?;
    let map = LinearMap::avg_pool(layer, x_in)?;
    check_io(x_in, z_out, &map.out_shape())?;
    linear_backward(&map, x_in, z_out, cfg, "avg_pool2d")
}

/// Sums relevance over channels of an `[H, W, C]` map; `absolute` takes `|·|` after summing.
pub fn pixel_contributions(values: &Tensor, absolute: bool) -> Result<Tensor> {
    let (h, w, c) = values
        .image_dims()
        .map_err(|_| Error::Domain(format!("pixel sums need an [H, W, C] map, got {:?}", values.shape())))?;
    let out = values
        .data()
        .chunks_exact(c)
        .map(|px| {
            let s: f64 = px.iter().sum();
            if absolute {
                s.abs()
            } else {
                s
            }
        })
        .collect();
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// A bias-free linear layer, viewed as `A` and `Aᵀ`.
#[derive(Debug, Clone)]
enum LinearMap {
    Dense {
        weights: Tensor,
    },
    Conv {
        kernel: Tensor,
        strides: (usize, usize),
        padding: Padding,
        geom: WindowGeometry,
        cin: usize,
        cout: usize,
    },
    /// Depthwise window map: `weights[(j * k_h + a) * k_w + b]` for output element `j`.
    Window {
        geom: WindowGeometry,
        channels: usize,
        weights: Vec<f64>,
    },
}

impl LinearMap {
    fn dense(d: &Dense) -> Self {
        LinearMap::Dense {
            weights: d.weights.clone(),
        }
    }

    fn conv(c: &Conv2D, x: &Tensor) -> Result<Self> {
        let (h, w, cin) = x.image_dims()?;
        let &[cout, kh, kw, _] = c.kernel.shape() else {
            return Err(Error::Dimension(format!("bad kernel shape {:?}", c.kernel.shape())));
        };
        let geom = WindowGeometry::new((h, w), (kh, kw), c.strides, c.padding)?;
        Ok(LinearMap::Conv {
            kernel: c.kernel.clone(),
            strides: c.strides,
            padding: c.padding,
            geom,
            cin,
            cout,
        })
    }

    fn avg_pool(p: &Pool2D, x: &Tensor) -> Result<Self> {
        let (h, w, c) = x.image_dims()?;
        let geom = WindowGeometry::new((h, w), p.pool, p.strides, Padding::Valid)?;
        let taps = p.pool.0 * p.pool.1;
        let n = geom.out_h * geom.out_w * c * taps;
        Ok(LinearMap::Window {
            geom,
            channels: c,
            weights: vec![1.0 / taps as f64; n],
        })
    }

    /// 0/1 weights marking every position that attains its window maximum.
    fn max_pool(p: &Pool2D, x: &Tensor) -> Result<Self> {
        let (h, w, c) = x.image_dims()?;
        let geom = WindowGeometry::new((h, w), p.pool, p.strides, Padding::Valid)?;
        let taps = p.pool.0 * p.pool.1;
        let xd = x.data();
        let mut weights = vec![0.0; geom.out_h * geom.out_w * c * taps];
        for oh in 0..geom.out_h {
            for ow in 0..geom.out_w {
                for ch in 0..c {
                    let j = (oh * geom.out_w + ow) * c + ch;
                    let at = |a: usize, b: usize| xd[((oh * geom.s_h + a) * w + ow * geom.s_w + b) * c + ch];
                    let mut max = f64::NEG_INFINITY;
                    for a in 0..geom.k_h {
                        for b in 0..geom.k_w {
                            max = max.max(at(a, b));
                        }
                    }
                    for a in 0..geom.k_h {
                        for b in 0..geom.k_w {
                            if at(a, b) == max {
                                weights[(j * geom.k_h + a) * geom.k_w + b] = 1.0;
                            }
                        }
                    }
                }
            }
        }
        Ok(LinearMap::Window {
            geom,
            channels: c,
            weights,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        match self {
            LinearMap::Dense { weights } => vec![weights.shape()[0]],
            LinearMap::Conv { geom, cout, .. } => vec![geom.out_h, geom.out_w, *cout],
            LinearMap::Window { geom, channels, .. } => vec![geom.out_h, geom.out_w, *channels],
        }
    }

    fn in_shape(&self) -> Vec<usize> {
        match self {
            LinearMap::Dense { weights } => vec![weights.shape()[1]],
            LinearMap::Conv { geom, cin, .. } => vec![geom.in_h, geom.in_w, *cin],
            LinearMap::Window { geom, channels, .. } => vec![geom.in_h, geom.in_w, *channels],
        }
    }

    fn map_weights(&self, f: impl Fn(f64) -> f64) -> Self {
        match self {
            LinearMap::Dense { weights } => LinearMap::Dense {
                weights: weights.map(f),
            },
            LinearMap::Conv {
                kernel,
                strides,
                padding,
                geom,
                cin,
                cout,
            } => LinearMap::Conv {
                kernel: kernel.map(f),
                strides: *strides,
                padding: *padding,
                geom: *geom,
                cin: *cin,
                cout: *cout,
            },
            LinearMap::Window {
                geom,
                channels,
                weights,
            } => LinearMap::Window {
                geom: *geom,
                channels: *channels,
                weights: weights.iter().map(|&w| f(w)).collect(),
            },
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LinearMap::Dense { weights } => tensor::matvec(weights, x),
            LinearMap::Conv {
                kernel,
                strides,
                padding,
                ..
            } => tensor::conv2d(x, kernel, None, *strides, *padding),
            LinearMap::Window {
                geom,
                channels,
                weights,
            } => {
                let c = *channels;
                let xd = x.data();
                let mut out = vec![0.0; geom.out_h * geom.out_w * c];
                for oh in 0..geom.out_h {
                    for ow in 0..geom.out_w {
                        for ch in 0..c {
                            let j = (oh * geom.out_w + ow) * c + ch;
                            let mut acc = 0.0;
                            for a in 0..geom.k_h {
                                for b in 0..geom.k_w {
                                    let (ih, iw) = (oh * geom.s_h + a, ow * geom.s_w + b);
                                    acc += weights[(j * geom.k_h + a) * geom.k_w + b]
                                        * xd[(ih * geom.in_w + iw) * c + ch];
                                }
                            }
                            out[j] = acc;
                        }
                    }
                }
                Ok(Tensor::from_parts(self.out_shape(), out))
            }
        }
    }

    fn transpose(&self, y: &Tensor) -> Result<Tensor> {
        match self {
            LinearMap::Dense { weights } => tensor::matvec_transpose(weights, y),
            LinearMap::Conv {
                kernel,
                strides,
                padding,
                geom,
                ..
            } => tensor::conv2d_transpose(y, kernel, *strides, *padding, (geom.in_h, geom.in_w)),
            LinearMap::Window {
                geom,
                channels,
                weights,
            } => {
                let c = *channels;
                let yd = y.data();
                let mut out = vec![0.0; geom.in_h * geom.in_w * c];
                for oh in 0..geom.out_h {
                    for ow in 0..geom.out_w {
                        for ch in 0..c {
                            let j = (oh * geom.out_w + ow) * c + ch;
                            if yd[j] == 0.0 {
                                continue;
                            }
                            for a in 0..geom.k_h {
                                for b in 0..geom.k_w {
                                    let (ih, iw) = (oh * geom.s_h + a, ow * geom.s_w + b);
                                    out[(ih * geom.in_w + iw) * c + ch] +=
                                        weights[(j * geom.k_h + a) * geom.k_w + b] * yd[j];
                                }
                            }
                        }
                    }
                }
                Ok(Tensor::from_parts(self.in_shape(), out))
            }
        }
    }

    /// Number of input neurons wired to each output neuron.
    fn fan_in(&self) -> Vec<f64> {
        match self {
            LinearMap::Dense { weights } => vec![weights.shape()[1] as f64; weights.shape()[0]],
            LinearMap::Conv { geom, cin, cout, .. } => {
                let mut out = Vec::with_capacity(geom.out_h * geom.out_w * cout);
                for oh in 0..geom.out_h {
                    for ow in 0..geom.out_w {
                        let m = (geom.taps(oh, ow) * cin) as f64;
                        out.extend(std::iter::repeat_n(m, *cout));
                    }
                }
                out
            }
            LinearMap::Window { geom, channels, .. } => {
                vec![(geom.k_h * geom.k_w) as f64; geom.out_h * geom.out_w * channels]
            }
        }
    }

    /// Number of output neurons wired to each input neuron.
    fn card(&self) -> Vec<f64> {
        match self {
            LinearMap::Dense { weights } => vec![weights.shape()[0] as f64; weights.shape()[1]],
            LinearMap::Conv { geom, cin, cout, .. } => geom
                .coverage()
                .into_iter()
                .flat_map(|n| std::iter::repeat_n((n * cout) as f64, *cin))
                .collect(),
            LinearMap::Window { geom, channels, .. } => geom
                .coverage()
                .into_iter()
                .flat_map(|n| std::iter::repeat_n(n as f64, *channels))
                .collect(),
        }
    }
}

fn linear_backward(map: &LinearMap, x: &Tensor, z_out: &Tensor, cfg: &MethodConfig, label: &str) -> Result<Tensor> {
    match cfg.rule {
        Rule::Rlrp => rlrp_backward(map, x, z_out),
        Rule::Lrp0 => ratio_backward(map, x, z_out, cfg, label, 0.0, true),
        Rule::LrpEpsilon { epsilon } => ratio_backward(map, x, z_out, cfg, label, epsilon, false),
        Rule::LrpGamma { gamma } => {
            let map = map.map_weights(|w| w + gamma * w.max(0.0));
            ratio_backward(&map, x, z_out, cfg, label, 0.0, true)
        }
        Rule::LrpAlphaBeta { alpha, beta } => alpha_beta_backward(map, x, z_out, alpha, beta),
    }
}

fn rlrp_backward(map: &LinearMap, x: &Tensor, z_out: &Tensor) -> Result<Tensor> {
    let fan_in = map.fan_in();
    let n_out = z_out.len() as f64;
    let scaled = Tensor::from_parts(
        z_out.shape().to_vec(),
        z_out.data().iter().zip(&fan_in).map(|(z, m)| z / m).collect(),
    );
    let mut t = map.transpose(&scaled)?;
    let card = map.card();
    for ((v, xi), c) in t.data_mut().iter_mut().zip(x.data()).zip(&card) {
        *v = xi * *v * (c / n_out);
    }
    Ok(t)
}

/// `z_in = x ⊙ Aᵀ(z_out ⊘ (stabiliser + A x))`. With `guard` set, denominators of
/// neurons carrying relevance must clear the configured threshold.
fn ratio_backward(
    map: &LinearMap,
    x: &Tensor,
    z_out: &Tensor,
    cfg: &MethodConfig,
    label: &str,
    stabiliser: f64,
    guard: bool,
) -> Result<Tensor> {
    let denom = map.apply(x)?;
    let mut s = vec![0.0; z_out.len()];
    for (j, (&zj, &dj)) in z_out.data().iter().zip(denom.data()).enumerate() {
        if zj == 0.0 {
            continue;
        }
        let d = if guard {
            guarded(dj, cfg, label, j)?
        } else {
            stabiliser + dj
        };
        s[j] = zj / d;
    }
    let t = map.transpose(&Tensor::from_parts(z_out.shape().to_vec(), s))?;
    x.mul(&t)
}

/// Positive and negative contributions `(w x)±` are redistributed separately. A
/// part whose denominator is exactly zero has all-zero numerators and is dropped.
fn alpha_beta_backward(map: &LinearMap, x: &Tensor, z_out: &Tensor, alpha: f64, beta: f64) -> Result<Tensor> {
    let wp = map.map_weights(|w| w.max(0.0));
    let wn = map.map_weights(|w| w.min(0.0));
    let xp = x.map(|v| v.max(0.0));
    let xn = x.map(|v| v.min(0.0));

    // (wx)+ = w+ x+ + w- x-,  (wx)- = w+ x- + w- x+
    let d_pos = wp.apply(&xp)?.add(&wn.apply(&xn)?)?;
    let d_neg = wp.apply(&xn)?.add(&wn.apply(&xp)?)?;
    let ratio = |d: &Tensor, coef: f64| {
        let data = z_out
            .data()
            .iter()
            .zip(d.data())
            .map(|(&z, &d)| if d == 0.0 || coef == 0.0 { 0.0 } else { coef * z / d })
            .collect();
        Tensor::from_parts(z_out.shape().to_vec(), data)
    };
    let s_pos = ratio(&d_pos, alpha);
    let s_neg = ratio(&d_neg, beta);

    let pos = xp.mul(&wp.transpose(&s_pos)?)?.add(&xn.mul(&wn.transpose(&s_pos)?)?)?;
    let neg = xn.mul(&wp.transpose(&s_neg)?)?.add(&xp.mul(&wn.transpose(&s_neg)?)?)?;
    pos.add(&neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Network;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn dense(w: Tensor) -> Dense {
        let n = w.shape()[0];
        Dense {
            weights: w,
            bias: Tensor::zeros(&[n]),
        }
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
    }

    #[test]
    fn lrp0_single_dense_layer() {
        let net = Network::new("d", vec![2], vec![LayerSpec::Dense(dense(t(&[1, 2], &[3.0, 4.0])))]).unwrap();
        let (logits, trace) = net.forward(&t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(logits.data(), &[11.0]);
        let map = attribute(&net, &trace, 0, &MethodConfig::lrp0()).unwrap();
        assert!(close(map.values.data(), &[3.0, 8.0], 1e-15));
        assert!((map.values.sum() - 11.0).abs() < 1e-12);
    }

    #[test]
    fn rlrp_single_dense_layer() {
        let net = Network::new("d", vec![2], vec![LayerSpec::Dense(dense(t(&[1, 2], &[3.0, 4.0])))]).unwrap();
        let (_, trace) = net.forward(&t(&[2], &[1.0, 2.0])).unwrap();
        let map = attribute(&net, &trace, 0, &MethodConfig::rlrp()).unwrap();
        assert_eq!(map.values.data(), &[16.5, 44.0]);
    }

    #[test]
    fn identity_layer_routes_relevance_to_selected_input() {
        let net = Network::new("i", vec![2], vec![LayerSpec::Dense(dense(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])))]).unwrap();
        let (_, trace) = net.forward(&t(&[2], &[1.0, 2.0])).unwrap();
        let map = attribute(&net, &trace, 1, &MethodConfig::lrp0()).unwrap();
        assert_eq!(map.values.data(), &[0.0, 2.0]);
        let map = attribute(&net, &trace, 1, &MethodConfig::rlrp()).unwrap();
        // (1/2) * 1 * 2 * 2
        assert_eq!(map.values.data(), &[0.0, 2.0]);
    }

    #[test]
    fn rlrp_dense_fan_in_example() {
        let layer = dense(t(&[1, 2], &[5.0, 7.0]));
        let z = backward_dense(&layer, &t(&[2], &[1.0, 1.0]), &t(&[1], &[2.0]), &MethodConfig::rlrp()).unwrap();
        assert_eq!(z.data(), &[5.0, 7.0]);
    }

    #[test]
    fn alpha_one_beta_zero_matches_lrp0_on_positive_layers() {
        let layer = dense(t(&[2, 3], &[0.5, 1.5, 2.0, 0.25, 3.0, 1.0]));
        let x = t(&[3], &[1.0, 0.5, 2.0]);
        let z = t(&[2], &[1.3, -0.7]);
        let a = backward_dense(&layer, &x, &z, &MethodConfig::lrp0()).unwrap();
        let ab = MethodConfig::new(Rule::LrpAlphaBeta { alpha: 1.0, beta: 0.0 });
        let b = backward_dense(&layer, &x, &z, &ab).unwrap();
        assert!(close(a.data(), b.data(), 1e-14));
    }

    #[test]
    fn epsilon_tends_to_lrp0_with_unit_denominator() {
        // Σ w x = 0.5*1 + 0.25*2 = 1
        let layer = dense(t(&[1, 2], &[0.5, 0.25]));
        let x = t(&[2], &[1.0, 2.0]);
        let z = t(&[1], &[3.0]);
        let eps = 1e-9;
        let a = backward_dense(&layer, &x, &z, &MethodConfig::lrp0()).unwrap();
        let b = backward_dense(&layer, &x, &z, &MethodConfig::new(Rule::LrpEpsilon { epsilon: eps })).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= eps * 3.0);
        }
    }

    #[test]
    fn gamma_zero_is_lrp0() {
        let layer = dense(t(&[2, 2], &[0.5, -1.5, 2.0, 0.25]));
        let x = t(&[2], &[1.0, 0.2]);
        let z = t(&[2], &[0.4, 1.1]);
        let a = backward_dense(&layer, &x, &z, &MethodConfig::lrp0()).unwrap();
        let b = backward_dense(&layer, &x, &z, &MethodConfig::new(Rule::LrpGamma { gamma: 0.0 })).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lrp0_zero_denominator_is_an_error() {
        let layer = dense(t(&[1, 2], &[1.0, -1.0]));
        let err = backward_dense(&layer, &t(&[2], &[0.5, 0.5]), &t(&[1], &[1.0]), &MethodConfig::lrp0());
        assert!(matches!(err, Err(Error::GuardedDenominator { .. })));
        // zero relevance on that neuron: nothing to redistribute, no error
        let ok = backward_dense(&layer, &t(&[2], &[0.5, 0.5]), &t(&[1], &[0.0]), &MethodConfig::lrp0()).unwrap();
        assert_eq!(ok.data(), &[0.0, 0.0]);
        // the epsilon rule absorbs it
        let eps = MethodConfig::new(Rule::LrpEpsilon { epsilon: 0.01 });
        let z = backward_dense(&layer, &t(&[2], &[0.5, 0.5]), &t(&[1], &[1.0]), &eps).unwrap();
        assert!(z.is_finite());
    }

    #[test]
    fn rlrp_unit_conv() {
        let conv = Conv2D {
            kernel: t(&[1, 1, 1, 1], &[2.0]),
            bias: Tensor::zeros(&[1]),
            strides: (1, 1),
            padding: Padding::Valid,
        };
        let z = backward_conv(&conv, &t(&[1, 1, 1], &[3.0]), &t(&[1, 1, 1], &[5.0]), &MethodConfig::rlrp()).unwrap();
        assert_eq!(z.data(), &[30.0]);
    }

    #[test]
    fn zero_kernel_gives_zero_relevance() {
        let conv = Conv2D {
            kernel: Tensor::zeros(&[2, 2, 2, 1]),
            bias: Tensor::zeros(&[2]),
            strides: (1, 1),
            padding: Padding::Same,
        };
        let x = Tensor::filled(&[3, 3, 1], 0.7);
        let z = backward_conv(&conv, &x, &Tensor::filled(&[3, 3, 2], 1.0), &MethodConfig::rlrp()).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_routes_to_argmax() {
        let pool = Pool2D { pool: (2, 2), strides: (2, 2) };
        let x = t(&[2, 2, 1], &[1.0, 3.0, 2.0, 0.0]);
        let z = backward_maxpool(&pool, &x, &t(&[1, 1, 1], &[6.0]), &MethodConfig::rlrp()).unwrap();
        // card 1, N_out 1, fan-in 4: 3 * 6 / 4
        assert_eq!(z.data(), &[0.0, 4.5, 0.0, 0.0]);

        let x = Tensor::filled(&[2, 2, 1], 2.0);
        let z = backward_maxpool(&pool, &x, &t(&[1, 1, 1], &[6.0]), &MethodConfig::rlrp()).unwrap();
        assert_eq!(z.data(), &[3.0; 4]);

        let z = backward_maxpool(&pool, &x, &t(&[1, 1, 1], &[0.0]), &MethodConfig::rlrp()).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
    }

    #[test]
    fn maxpool_lrp0_splits_ties_evenly() {
        let pool = Pool2D { pool: (2, 2), strides: (2, 2) };
        let x = t(&[2, 2, 1], &[2.0, 1.0, 2.0, 0.5]);
        let z = backward_maxpool(&pool, &x, &t(&[1, 1, 1], &[6.0]), &MethodConfig::lrp0()).unwrap();
        assert_eq!(z.data(), &[3.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn avgpool_matches_uniform_conv_single_channel() {
        let pool = Pool2D { pool: (2, 2), strides: (1, 1) };
        let x = t(&[3, 3, 1], &[0.1, 0.5, 0.9, 1.3, -0.2, 0.4, 0.8, 0.6, 0.3]);
        let z_out = t(&[2, 2, 1], &[1.0, -2.0, 0.5, 4.0]);
        let conv = Conv2D {
            kernel: Tensor::filled(&[1, 2, 2, 1], 0.25),
            bias: Tensor::zeros(&[1]),
            strides: (1, 1),
            padding: Padding::Valid,
        };
        for cfg in [MethodConfig::rlrp(), MethodConfig::lrp0()] {
            let a = backward_avgpool(&pool, &x, &z_out, &cfg).unwrap();
            let b = backward_conv(&conv, &x, &z_out, &cfg).unwrap();
            assert!(close(a.data(), b.data(), 1e-12));
        }
    }

    #[test]
    fn pixel_sums() {
        let m = t(&[1, 2, 3], &[1.0, -1.0, 0.0, 2.0, 2.0, 2.0]);
        assert_eq!(pixel_contributions(&m, false).unwrap().data(), &[0.0, 6.0]);
        assert_eq!(pixel_contributions(&m, true).unwrap().data(), &[0.0, 6.0]);
        let m = t(&[1, 1, 3], &[-1.0, -1.0, 0.5]);
        assert_eq!(pixel_contributions(&m, true).unwrap().data(), &[1.5]);
        assert!(matches!(pixel_contributions(&t(&[3], &[1.0, 2.0, 3.0]), false), Err(Error::Domain(_))));
    }

    #[test]
    fn config_validation() {
        assert!(MethodConfig::new(Rule::LrpEpsilon { epsilon: 0.0 }).validate().is_err());
        assert!(MethodConfig::new(Rule::LrpGamma { gamma: -0.1 }).validate().is_err());
        assert!(MethodConfig::rlrp().with_guard(-1.0).validate().is_err());
        assert!(MethodConfig::new(Rule::LrpAlphaBeta { alpha: 2.0, beta: -1.0 }).validate().is_ok());
    }

    fn residual_net(branch: Vec<LayerSpec>, n: usize) -> Network {
        Network::new(
            "res",
            vec![n],
            vec![LayerSpec::Residual(ResidualBlock {
                branch,
                skip: Skip::Identity,
            })],
        )
        .unwrap()
    }

    #[test]
    fn zero_branch_reduces_to_skip() {
        let net = residual_net(vec![LayerSpec::Dense(dense(Tensor::zeros(&[3, 3])))], 3);
        let x = t(&[3], &[0.5, 2.0, 1.0]);
        let (_, trace) = net.forward(&x).unwrap();
        let map = attribute(&net, &trace, 1, &MethodConfig::rlrp()).unwrap();
        assert_eq!(map.values.data(), &[0.0, 2.0, 0.0]);
        assert_eq!(map.diagnostics.len(), 1, "{:?}", map.diagnostics);
    }

    #[test]
    fn identity_paths_have_unit_factors() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let block = ResidualBlock {
            branch: vec![LayerSpec::Dense(dense(eye))],
            skip: Skip::Identity,
        };
        let net = Network::new("r", vec![2], vec![LayerSpec::Residual(block.clone())]).unwrap();
        let x = t(&[2], &[3.0, 1.0]);
        let (_, trace) = net.forward(&x).unwrap();
        // R-LRP through the identity dense halves relevance (1/N_in with N_in = 2)
        let z_out = t(&[2], &[4.0, 0.0]);
        let r = backward_residual(&block, &x, trace.residual(0).unwrap(), &z_out, &MethodConfig::rlrp()).unwrap();
        assert_eq!(r.skip_factor, 1.0);
        assert_eq!(r.skip_raw.data(), &[4.0, 0.0]);
        assert_eq!(r.branch_raw.data(), &[6.0, 0.0]);
        assert!((r.branch_factor - 4.0 / 6.0).abs() < 1e-15);
        assert!(close(r.z_in.data(), &[8.0, 0.0], 1e-15));

        // with x = N_in the identity branch copies z_out exactly and both factors are 1
        let x = t(&[2], &[2.0, 2.0]);
        let (_, trace) = net.forward(&x).unwrap();
        let r = backward_residual(&block, &x, trace.residual(0).unwrap(), &z_out, &MethodConfig::rlrp()).unwrap();
        assert_eq!(r.branch_raw, z_out);
        assert_eq!((r.skip_factor, r.branch_factor), (1.0, 1.0));
        assert_eq!(r.z_in.data(), &[8.0, 0.0]);
    }

    #[test]
    fn baseline_rules_split_residual_sum_and_conserve() {
        let w = t(&[2, 2], &[0.8, 0.3, -0.2, 0.6]);
        let block = ResidualBlock {
            branch: vec![LayerSpec::Dense(dense(w))],
            skip: Skip::Identity,
        };
        let net = Network::new("r", vec![2], vec![LayerSpec::Residual(block)]).unwrap();
        let (logits, trace) = net.forward(&t(&[2], &[1.0, 2.0])).unwrap();
        let map = attribute(&net, &trace, 0, &MethodConfig::lrp0()).unwrap();
        assert!((map.values.sum() - logits.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_class() {
        let net = Network::new("d", vec![2], vec![LayerSpec::Dense(dense(t(&[1, 2], &[3.0, 4.0])))]).unwrap();
        let (_, trace) = net.forward(&t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(attribute(&net, &trace, 1, &MethodConfig::rlrp()), Err(Error::Domain(_))));
    }
}
