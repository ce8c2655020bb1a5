//! Dense row-major `f64` tensors and the handful of kernels the engine needs:
//! matrix-vector products, 2-D convolution and its transpose, and top-fraction
//! selection.
//!
//! Image-shaped tensors are channel-last (`[H, W, C]`); convolution kernels are
//! `[Cout, Kh, Kw, Cin]`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from external data, rejecting bad shapes and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("tensor data at flat index {pos}"),
            });
        }
        Ok(Self { shape, data })
    }

    /// Same as [`Tensor::new`] but without the finiteness scan. Shape is still checked.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "element-wise operands have shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "inner product of shapes {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Unpacks `[H, W, C]`.
    pub fn image_dims(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::Dimension(format!(
                "expected an [H, W, C] tensor, got shape {other:?}"
            ))),
        }
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Dimension(format!(
            "shape {shape:?} must be non-empty with extents >= 1"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Dimension(format!(
            "shape {shape:?} holds {n} values but {len} were given"
        )));
    }
    Ok(())
}

/// `out[j] = Σ_i weights[j, i] * x[i]`. Bias is the caller's business.
pub fn matvec(weights: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = match weights.shape() {
        &[o, i] => (o, i),
        s => {
            return Err(Error::Dimension(format!(
                "matvec weights must be rank 2, got {s:?}"
            )))
        }
    };
    if x.shape() != [n_in] {
        return Err(Error::Dimension(format!(
            "matvec: weights {:?} against vector {:?}",
            weights.shape(),
            x.shape()
        )));
    }
    let w = weights.data();
    let out = (0..n_out)
        .map(|j| {
            let row = &w[j * n_in..(j + 1) * n_in];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x.data()) {
                acc += wi * xi;
            }
            acc
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// `out[i] = Σ_j weights[j, i] * y[j]`.
pub fn matvec_transpose(weights: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = match weights.shape() {
        &[o, i] => (o, i),
        s => {
            return Err(Error::Dimension(format!(
                "matvec weights must be rank 2, got {s:?}"
            )))
        }
    };
    if y.shape() != [n_out] {
        return Err(Error::Dimension(format!(
            "transposed matvec: weights {:?} against vector {:?}",
            weights.shape(),
            y.shape()
        )));
    }
    let w = weights.data();
    let mut out = vec![0.0; n_in];
    for (j, &yj) in y.data().iter().enumerate() {
        let row = &w[j * n_in..(j + 1) * n_in];
        for (o, wi) in out.iter_mut().zip(row) {
            *o += wi * yj;
        }
    }
    Ok(Tensor::vector(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    /// Output extent `ceil(H / s)`; total padding split evenly, the odd pixel
    /// going to the bottom/right.
    Same,
}

/// Spatial geometry of a windowed layer (convolution or pooling).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl WindowGeometry {
    pub fn new(
        input: (usize, usize),
        window: (usize, usize),
        strides: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let (in_h, in_w) = input;
        let (k_h, k_w) = window;
        let (s_h, s_w) = strides;
        if k_h == 0 || k_w == 0 || s_h == 0 || s_w == 0 {
            return Err(Error::Dimension(format!(
                "window {window:?} and strides {strides:?} must be >= 1"
            )));
        }
        let axis = |n: usize, k: usize, s: usize| -> Result<(usize, usize)> {
            match padding {
                Padding::Valid => {
                    if k > n {
                        return Err(Error::Dimension(format!(
                            "window extent {k} exceeds input extent {n}"
                        )));
                    }
                    Ok(((n - k) / s + 1, 0))
                }
                Padding::Same => {
                    let out = n.div_ceil(s);
                    let total = ((out - 1) * s + k).saturating_sub(n);
                    if k > n + total {
                        return Err(Error::Dimension(format!(
                            "window extent {k} exceeds padded input extent {}",
                            n + total
                        )));
                    }
                    Ok((out, total / 2))
                }
            }
        };
        let (out_h, pad_top) = axis(in_h, k_h, s_h)?;
        let (out_w, pad_left) = axis(in_w, k_w, s_w)?;
        Ok(Self {
            in_h,
            in_w,
            k_h,
            k_w,
            s_h,
            s_w,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input row/column covered by window offset `(kh, kw)` of output `(oh, ow)`,
    /// or `None` when it falls in the padding.
    #[inline]
    pub fn source(&self, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.s_h + kh).checked_sub(self.pad_top)?;
        let iw = (ow * self.s_w + kw).checked_sub(self.pad_left)?;
        (ih < self.in_h && iw < self.in_w).then_some((ih, iw))
    }

    /// Number of in-bounds taps of the window at `(oh, ow)`.
    pub fn taps(&self, oh: usize, ow: usize) -> usize {
        let mut n = 0;
        for kh in 0..self.k_h {
            for kw in 0..self.k_w {
                if self.source(oh, ow, kh, kw).is_some() {
                    n += 1;
                }
            }
        }
        n
    }

    /// For every input position, how many windows cover it.
    pub fn coverage(&self) -> Vec<usize> {
        let mut cover = vec![0; self.in_h * self.in_w];
        for oh in 0..self.out_h {
            for ow in 0..self.out_w {
                for kh in 0..self.k_h {
                    for kw in 0..self.k_w {
                        if let Some((ih, iw)) = self.source(oh, ow, kh, kw) {
                            cover[ih * self.in_w + iw] += 1;
                        }
                    }
                }
            }
        }
        cover
    }
}

fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match kernel.shape() {
        &[co, kh, kw, ci] => Ok((co, kh, kw, ci)),
        s => Err(Error::Dimension(format!(
            "convolution kernel must be [Cout, Kh, Kw, Cin], got {s:?}"
        ))),
    }
}

/// Cross-correlation of an `[H, W, Cin]` input with a `[Cout, Kh, Kw, Cin]` kernel,
/// plus an optional per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    strides: (usize, usize),
    padding: Padding,
) -> Result<Tensor> {
    let (h, w, cin) = input.image_dims()?;
    let (cout, kh, kw, kcin) = kernel_dims(kernel)?;
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {cout} output channels",
                b.shape()
            )));
        }
    }
    let g = WindowGeometry::new((h, w), (kh, kw), strides, padding)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.out_h * g.out_w * cout];
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            for co in 0..cout {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for a in 0..kh {
                    for b in 0..kw {
                        let Some((ih, iw)) = g.source(oh, ow, a, b) else {
                            continue;
                        };
                        let xo = (ih * w + iw) * cin;
                        let ko = ((co * kh + a) * kw + b) * cin;
                        for ci in 0..cin {
                            acc += k[ko + ci] * x[xo + ci];
                        }
                    }
                }
                out[(oh * g.out_w + ow) * cout + co] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.out_h, g.out_w, cout], out))
}

/// Linear adjoint of bias-free [`conv2d`]. `input_hw` is the spatial extent of the
/// forward input, which strides > 1 leave ambiguous.
pub fn conv2d_transpose(
    grad_like: &Tensor,
    kernel: &Tensor,
    strides: (usize, usize),
    padding: Padding,
    input_hw: (usize, usize),
) -> Result<Tensor> {
    let (oh_n, ow_n, gc) = grad_like.image_dims()?;
    let (cout, kh, kw, cin) = kernel_dims(kernel)?;
    let g = WindowGeometry::new(input_hw, (kh, kw), strides, padding)?;
    if (g.out_h, g.out_w, cout) != (oh_n, ow_n, gc) {
        return Err(Error::Dimension(format!(
            "transposed convolution: {:?} is not the forward output shape [{}, {}, {cout}] for input {input_hw:?}",
            grad_like.shape(),
            g.out_h,
            g.out_w
        )));
    }
    let y = grad_like.data();
    let k = kernel.data();
    let (h, w) = input_hw;
    let mut out = vec![0.0; h * w * cin];
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            for co in 0..cout {
                let yv = y[(oh * g.out_w + ow) * cout + co];
                if yv == 0.0 {
                    continue;
                }
                for a in 0..kh {
                    for b in 0..kw {
                        let Some((ih, iw)) = g.source(oh, ow, a, b) else {
                            continue;
                        };
                        let xo = (ih * w + iw) * cin;
                        let ko = ((co * kh + a) * kw + b) * cin;
                        for ci in 0..cin {
                            out[xo + ci] += k[ko + ci] * yv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, cin], out))
}

fn pool2d(
    input: &Tensor,
    pool: (usize, usize),
    strides: (usize, usize),
    reduce: impl Fn(&mut dyn Iterator<Item = f64>) -> f64,
) -> Result<Tensor> {
    let (h, w, c) = input.image_dims()?;
    let g = WindowGeometry::new((h, w), pool, strides, Padding::Valid)?;
    let x = input.data();
    let mut out = Vec::with_capacity(g.out_h * g.out_w * c);
    for oh in 0..g.out_h {
        for ow in 0..g.out_w {
            for ch in 0..c {
                let mut taps = (0..g.k_h).flat_map(|a| (0..g.k_w).map(move |b| (a, b))).map(
                    |(a, b)| {
                        let (ih, iw) = (oh * g.s_h + a, ow * g.s_w + b);
                        x[(ih * w + iw) * c + ch]
                    },
                );
                out.push(reduce(&mut taps));
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.out_h, g.out_w, c], out))
}

/// Per-channel max over valid (unpadded) windows.
pub fn max_pool2d(input: &Tensor, pool: (usize, usize), strides: (usize, usize)) -> Result<Tensor> {
    pool2d(input, pool, strides, |it| it.fold(f64::NEG_INFINITY, f64::max))
}

/// Per-channel mean over valid (unpadded) windows.
pub fn avg_pool2d(input: &Tensor, pool: (usize, usize), strides: (usize, usize)) -> Result<Tensor> {
    let area = (pool.0 * pool.1) as f64;
    pool2d(input, pool, strides, |it| it.sum::<f64>() / area)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankOrder {
    /// Largest values first.
    Signed,
    /// Largest magnitudes first.
    Absolute,
}

/// Number of entries selected out of `n` for a fraction in (0, 1]: `ceil(f * n)`,
/// tolerant to the rounding of decimal fractions such as 0.15.
pub fn selection_count(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!(
            "selection fraction {fraction} is outside (0, 1]"
        )));
    }
    let raw = fraction * n as f64;
    let count = (raw - raw * 1e-12).ceil() as usize;
    Ok(count.clamp(1, n))
}

/// Indices of the `ceil(fraction * N)` highest-ranked entries, ordered by rank.
/// Ties go to the lower flat index, so selections are nested as the fraction grows.
pub fn top_fraction_indices(values: &[f64], fraction: f64, order: RankOrder) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(Error::Domain("top-fraction selection on an empty tensor".into()));
    }
    let count = selection_count(fraction, values.len())?;
    let key = |v: f64| match order {
        RankOrder::Signed => v,
        RankOrder::Absolute => v.abs(),
    };
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        key(values[b])
            .total_cmp(&key(values[a]))
            .then_with(|| a.cmp(&b))
    };
    if count < idx.len() {
        idx.select_nth_unstable_by(count - 1, cmp);
        idx.truncate(count);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}
