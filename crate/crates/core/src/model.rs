//! Network description and a forward pass that keeps every activation.
//!
//! A [`Network`] is a sequence of [`LayerSpec`]s, where a layer may itself be a
//! residual block `branch(x) + skip(x)`. ReLU is a layer of its own so the
//! relevance rules only ever see linear maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Padding, Tensor, WindowGeometry};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `[Nout, Nin]`
    pub weights: Tensor,
    /// `[Nout]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2D {
    /// `[Cout, Kh, Kw, Cin]`
    pub kernel: Tensor,
    /// `[Cout]`
    pub bias: Tensor,
    pub strides: (usize, usize),
    pub padding: Padding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2D {
    pub pool: (usize, usize),
    pub strides: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Skip {
    Identity,
    /// 1×1 stride-2 convolution without bias.
    Projection(Conv2D),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub branch: Vec<LayerSpec>,
    pub skip: Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense(Dense),
    Conv2D(Conv2D),
    MaxPool2D(Pool2D),
    AvgPool2D(Pool2D),
    Flatten,
    ReLU,
    Residual(ResidualBlock),
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Conv2D(_) => "conv2d",
            LayerSpec::MaxPool2D(_) => "max_pool2d",
            LayerSpec::AvgPool2D(_) => "avg_pool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::ReLU => "relu",
            LayerSpec::Residual(_) => "residual_block",
        }
    }

    /// Output shape for a given input shape, validating the layer's geometry.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense(d) => {
                let (n_out, n_in) = match d.weights.shape() {
                    &[o, i] => (o, i),
                    s => return Err(Error::Shape(format!("dense weights must be rank 2, got {s:?}"))),
                };
                if d.bias.shape() != [n_out] {
                    return Err(Error::Shape(format!(
                        "dense bias {:?} does not match {n_out} outputs",
                        d.bias.shape()
                    )));
                }
                if input != [n_in] {
                    return Err(Error::Shape(format!(
                        "dense layer expects [{n_in}], receives {input:?}"
                    )));
                }
                Ok(vec![n_out])
            }
            LayerSpec::Conv2D(c) => {
                let (h, w, cin) = image_shape(input, "conv2d")?;
                let (cout, kh, kw, kcin) = match c.kernel.shape() {
                    &[a, b, cc, d] => (a, b, cc, d),
                    s => {
                        return Err(Error::Shape(format!(
                            "conv2d kernel must be [Cout, Kh, Kw, Cin], got {s:?}"
                        )))
                    }
                };
                if kcin != cin {
                    return Err(Error::Shape(format!(
                        "conv2d kernel expects {kcin} input channels, receives {cin}"
                    )));
                }
                if c.bias.shape() != [cout] {
                    return Err(Error::Shape(format!(
                        "conv2d bias {:?} does not match {cout} output channels",
                        c.bias.shape()
                    )));
                }
                let g = WindowGeometry::new((h, w), (kh, kw), c.strides, c.padding)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Ok(vec![g.out_h, g.out_w, cout])
            }
            LayerSpec::MaxPool2D(p) | LayerSpec::AvgPool2D(p) => {
                let (h, w, c) = image_shape(input, self.kind())?;
                let g = WindowGeometry::new((h, w), p.pool, p.strides, Padding::Valid)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                Ok(vec![g.out_h, g.out_w, c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::Residual(block) => {
                let mut shape = input.to_vec();
                for layer in &block.branch {
                    shape = layer.output_shape(&shape)?;
                }
                let skip_shape = match &block.skip {
                    Skip::Identity => input.to_vec(),
                    Skip::Projection(conv) => {
                        check_projection(conv)?;
                        LayerSpec::Conv2D(conv.clone()).output_shape(input)?
                    }
                };
                if shape != skip_shape {
                    return Err(Error::Shape(format!(
                        "residual branch produces {shape:?} but skip produces {skip_shape:?}"
                    )));
                }
                Ok(shape)
            }
        }
    }

    fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            LayerSpec::Dense(d) => tensor::matvec(&d.weights, input)?.add(&d.bias),
            LayerSpec::Conv2D(c) => {
                tensor::conv2d(input, &c.kernel, Some(&c.bias), c.strides, c.padding)
            }
            LayerSpec::MaxPool2D(p) => tensor::max_pool2d(input, p.pool, p.strides),
            LayerSpec::AvgPool2D(p) => tensor::avg_pool2d(input, p.pool, p.strides),
            LayerSpec::Flatten => {
                let n = input.len();
                input.clone().reshape(vec![n])
            }
            LayerSpec::ReLU => Ok(input.map(|v| v.max(0.0))),
            LayerSpec::Residual(_) => unreachable!("residual blocks are traced separately"),
        }
    }
}

fn image_shape(shape: &[usize], kind: &str) -> Result<(usize, usize, usize)> {
    match shape {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::Shape(format!("{kind} expects an [H, W, C] input, receives {s:?}"))),
    }
}

fn check_projection(conv: &Conv2D) -> Result<()> {
    let ok_kernel = matches!(conv.kernel.shape(), &[_, 1, 1, _]);
    let ok_bias = conv.bias.data().iter().all(|&b| b == 0.0);
    if !ok_kernel || conv.strides != (2, 2) || !ok_bias {
        return Err(Error::Unsupported(format!(
            "residual projection must be a bias-free 1x1 convolution with stride 2 \
             (kernel {:?}, strides {:?})",
            conv.kernel.shape(),
            conv.strides
        )));
    }
    Ok(())
}

/// How raw `[0, 1]` image values are turned into network inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Preprocessing {
    /// Values used as read, `byte / 255`.
    #[default]
    Unit,
    /// `byte - mean[c]`, in 0..255 units.
    Centered { means: Vec<f64> },
}

impl Preprocessing {
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        match self {
            Preprocessing::Unit => Ok(image.clone()),
            Preprocessing::Centered { means } => {
                let (_, _, c) = image.image_dims()?;
                if means.len() != c {
                    return Err(Error::Dimension(format!(
                        "{} channel means for a {c}-channel image",
                        means.len()
                    )));
                }
                let mut out = image.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v = *v * 255.0 - means[i % c];
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    input_shape: Vec<usize>,
    num_outputs: usize,
    layers: Vec<LayerSpec>,
    pub preprocessing: Preprocessing,
    pub class_labels: Option<Vec<String>>,
}

impl Network {
    /// Validates every layer's geometry against its predecessor.
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        for (i, layer) in layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| match e {
                    Error::Shape(m) => Error::Shape(format!("layer {i} ({}): {m}", layer.kind())),
                    other => other,
                })?;
        }
        let num_outputs = match shape.as_slice() {
            &[n] => n,
            s => {
                return Err(Error::Shape(format!(
                    "network must end in a rank-1 output, ends in {s:?}"
                )))
            }
        };
        Ok(Self {
            name: name.into(),
            input_shape,
            num_outputs,
            layers,
            preprocessing: Preprocessing::Unit,
            class_labels: None,
        })
    }

    pub fn with_preprocessing(mut self, preprocessing: Preprocessing) -> Self {
        self.preprocessing = preprocessing;
        self
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Runs the network and records every intermediate activation.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::Dimension(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let trace = trace_layers(&self.layers, input.clone(), "")?;
        Ok((trace.output().clone(), trace))
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        self.forward(input).map(|(logits, _)| logits)
    }

    /// Index of the largest logit; the lowest index wins ties.
    pub fn predict_class(&self, input: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(input)?.data()))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Activations recorded by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `activations[i]` is the input of layer `i`; the last entry is the network output.
    activations: Vec<Tensor>,
    residuals: Vec<Option<ResidualTrace>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub branch: ForwardTrace,
    pub skip_output: Tensor,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    pub fn input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn output_of(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace holds at least the input")
    }

    pub fn residual(&self, layer: usize) -> Option<&ResidualTrace> {
        self.residuals[layer].as_ref()
    }
}

fn trace_layers(layers: &[LayerSpec], input: Tensor, prefix: &str) -> Result<ForwardTrace> {
    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut residuals = Vec::with_capacity(layers.len());
    activations.push(input);
    for (i, layer) in layers.iter().enumerate() {
        let x = activations.last().unwrap();
        let label = format!("{prefix}layer {i} ({})", layer.kind());
        let (out, res) = match layer {
            LayerSpec::Residual(block) => {
                let branch = trace_layers(&block.branch, x.clone(), &format!("{label} branch "))?;
                let skip_output = match &block.skip {
                    Skip::Identity => x.clone(),
                    Skip::Projection(conv) => LayerSpec::Conv2D(conv.clone()).apply(x)?,
                };
                let out = branch.output().add(&skip_output)?;
                (out, Some(ResidualTrace { branch, skip_output }))
            }
            other => (other.apply(x)?, None),
        };
        if !out.is_finite() {
            return Err(Error::NonFinite {
                location: format!("forward output of {label}"),
            });
        }
        activations.push(out);
        residuals.push(res);
    }
    Ok(ForwardTrace {
        activations,
        residuals,
    })
}
