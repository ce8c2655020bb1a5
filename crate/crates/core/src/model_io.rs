//! Portable model files and netpbm image I/O.
//!
//! A model is a JSON manifest plus a raw weight blob. The blob holds
//! little-endian binary32 values, row-major, concatenated in manifest order;
//! every tensor in the manifest names its byte `offset` and `length` in the
//! blob. Weights are promoted to `f64` on load.
//!
//! Contribution maps are written as raw little-endian `f64` with a JSON
//! sidecar describing shape and method.
//!
//! Images are binary PPM (`P6`, maxval 255) or PGM (`P5`); values are scaled
//! to `[0, 1]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Mask;
use crate::relevance::{ContributionMap, LayerSum, MethodConfig};
use crate::model::{Conv2D, Dense, LayerSpec, Network, Pool2D, Preprocessing, ResidualBlock, Skip};
use crate::tensor::{Padding, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub preprocessing: Preprocessing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_labels: Option<Vec<String>>,
    pub layers: Vec<LayerDescriptor>,
}

/// Byte range of one tensor inside the weight blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRange {
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvDescriptor {
    pub kernel_shape: Vec<usize>,
    pub strides: [usize; 2],
    pub padding: Padding,
    pub kernel: BlobRange,
    pub bias: BlobRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerDescriptor {
    Dense {
        weights_shape: Vec<usize>,
        weights: BlobRange,
        bias: BlobRange,
    },
    Conv2d(ConvDescriptor),
    MaxPool2d {
        pool: [usize; 2],
        strides: [usize; 2],
    },
    AvgPool2d {
        pool: [usize; 2],
        strides: [usize; 2],
    },
    Flatten,
    Relu,
    ResidualBlock {
        branch: Vec<LayerDescriptor>,
        skip: SkipDescriptor,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SkipDescriptor {
    Identity,
    Projection { conv: ConvDescriptor },
}

/// Reads and fully validates a manifest/blob pair.
pub fn load_model(manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<Network> {
    let manifest_path = manifest_path.as_ref();
    let blob_path = blob_path.as_ref();
    let manifest = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    parse_model(&manifest, &blob)
}

pub fn parse_model(manifest: &[u8], blob: &[u8]) -> Result<Network> {
    let manifest: ModelManifest = serde_json::from_slice(manifest)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let mut ranges = Vec::new();
    collect_ranges(&manifest.layers, "", &mut ranges)?;
    check_ranges(&mut ranges, blob.len())?;

    let layers = decode_layers(&manifest.layers, blob, "")?;
    let mut net = Network::new(manifest.name, manifest.input_shape, layers)?
        .with_preprocessing(manifest.preprocessing);
    net.class_labels = manifest.class_labels;
    if let Some(labels) = &net.class_labels {
        if labels.len() != net.num_outputs() {
            return Err(Error::Shape(format!(
                "{} class labels for {} outputs",
                labels.len(),
                net.num_outputs()
            )));
        }
    }
    Ok(net)
}

struct NamedRange {
    name: String,
    range: BlobRange,
}

fn expect_len(name: &str, range: BlobRange, shape: &[usize]) -> Result<()> {
    let n: usize = shape.iter().product();
    if shape.is_empty() || shape.contains(&0) || range.length != n * 4 {
        return Err(Error::Shape(format!(
            "{name}: declared shape {shape:?} needs {} bytes, range holds {}",
            n * 4,
            range.length
        )));
    }
    Ok(())
}

fn collect_conv(c: &ConvDescriptor, name: &str, out: &mut Vec<NamedRange>) -> Result<()> {
    if c.kernel_shape.len() != 4 {
        return Err(Error::Shape(format!("{name}: kernel shape {:?} is not rank 4", c.kernel_shape)));
    }
    expect_len(&format!("{name} kernel"), c.kernel, &c.kernel_shape)?;
    expect_len(&format!("{name} bias"), c.bias, &c.kernel_shape[..1])?;
    out.push(NamedRange { name: format!("{name} kernel"), range: c.kernel });
    out.push(NamedRange { name: format!("{name} bias"), range: c.bias });
    Ok(())
}

fn collect_ranges(layers: &[LayerDescriptor], prefix: &str, out: &mut Vec<NamedRange>) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        let name = format!("{prefix}layer {i}");
        match layer {
            LayerDescriptor::Dense { weights_shape, weights, bias } => {
                if weights_shape.len() != 2 {
                    return Err(Error::Shape(format!("{name}: dense shape {weights_shape:?} is not rank 2")));
                }
                expect_len(&format!("{name} weights"), *weights, weights_shape)?;
                expect_len(&format!("{name} bias"), *bias, &weights_shape[..1])?;
                out.push(NamedRange { name: format!("{name} weights"), range: *weights });
                out.push(NamedRange { name: format!("{name} bias"), range: *bias });
            }
            LayerDescriptor::Conv2d(c) => collect_conv(c, &name, out)?,
            LayerDescriptor::ResidualBlock { branch, skip } => {
                collect_ranges(branch, &format!("{name} branch "), out)?;
                if let SkipDescriptor::Projection { conv } = skip {
                    collect_conv(conv, &format!("{name} skip"), out)?;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn check_ranges(ranges: &mut [NamedRange], blob_len: usize) -> Result<()> {
    let mut needed = 0;
    let mut declared = 0;
    for r in ranges.iter() {
        let end = r.range.offset.checked_add(r.range.length).ok_or_else(|| {
            Error::Shape(format!("{}: range overflows", r.name))
        })?;
        needed = needed.max(end);
        declared += r.range.length;
    }
    if needed > blob_len {
        return Err(Error::TruncatedBlob {
            needed,
            actual: blob_len,
        });
    }
    ranges.sort_by_key(|r| r.range.offset);
    for pair in ranges.windows(2) {
        if pair[0].range.offset + pair[0].range.length > pair[1].range.offset {
            return Err(Error::OverlappingRanges(format!("{} and {}", pair[0].name, pair[1].name)));
        }
    }
    if declared != blob_len {
        return Err(Error::BlobLength {
            declared,
            actual: blob_len,
        });
    }
    Ok(())
}

fn read_tensor(blob: &[u8], range: BlobRange, shape: &[usize], name: &str) -> Result<Tensor> {
    let bytes = &blob[range.offset..range.offset + range.length];
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteWeight(name.to_string()));
    }
    Tensor::new(shape.to_vec(), data)
}

fn decode_conv(c: &ConvDescriptor, blob: &[u8], name: &str) -> Result<Conv2D> {
    Ok(Conv2D {
        kernel: read_tensor(blob, c.kernel, &c.kernel_shape, &format!("{name} kernel"))?,
        bias: read_tensor(blob, c.bias, &c.kernel_shape[..1], &format!("{name} bias"))?,
        strides: (c.strides[0], c.strides[1]),
        padding: c.padding,
    })
}

fn decode_layers(layers: &[LayerDescriptor], blob: &[u8], prefix: &str) -> Result<Vec<LayerSpec>> {
    layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            let name = format!("{prefix}layer {i}");
            Ok(match layer {
                LayerDescriptor::Dense { weights_shape, weights, bias } => LayerSpec::Dense(Dense {
                    weights: read_tensor(blob, *weights, weights_shape, &format!("{name} weights"))?,
                    bias: read_tensor(blob, *bias, &weights_shape[..1], &format!("{name} bias"))?,
                }),
                LayerDescriptor::Conv2d(c) => LayerSpec::Conv2D(decode_conv(c, blob, &name)?),
                LayerDescriptor::MaxPool2d { pool, strides } => LayerSpec::MaxPool2D(Pool2D {
                    pool: (pool[0], pool[1]),
                    strides: (strides[0], strides[1]),
                }),
                LayerDescriptor::AvgPool2d { pool, strides } => LayerSpec::AvgPool2D(Pool2D {
                    pool: (pool[0], pool[1]),
                    strides: (strides[0], strides[1]),
                }),
                LayerDescriptor::Flatten => LayerSpec::Flatten,
                LayerDescriptor::Relu => LayerSpec::ReLU,
                LayerDescriptor::ResidualBlock { branch, skip } => LayerSpec::Residual(ResidualBlock {
                    branch: decode_layers(branch, blob, &format!("{name} branch "))?,
                    skip: match skip {
                        SkipDescriptor::Identity => Skip::Identity,
                        SkipDescriptor::Projection { conv } => {
                            Skip::Projection(decode_conv(conv, blob, &format!("{name} skip"))?)
                        }
                    },
                }),
            })
        })
        .collect()
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, t: &Tensor) -> BlobRange {
        let offset = self.bytes.len();
        for &v in t.data() {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        BlobRange {
            offset,
            length: self.bytes.len() - offset,
        }
    }

    fn conv(&mut self, c: &Conv2D) -> ConvDescriptor {
        ConvDescriptor {
            kernel_shape: c.kernel.shape().to_vec(),
            strides: [c.strides.0, c.strides.1],
            padding: c.padding,
            kernel: self.push(&c.kernel),
            bias: self.push(&c.bias),
        }
    }

    fn layers(&mut self, layers: &[LayerSpec]) -> Vec<LayerDescriptor> {
        layers
            .iter()
            .map(|layer| match layer {
                LayerSpec::Dense(d) => LayerDescriptor::Dense {
                    weights_shape: d.weights.shape().to_vec(),
                    weights: self.push(&d.weights),
                    bias: self.push(&d.bias),
                },
                LayerSpec::Conv2D(c) => LayerDescriptor::Conv2d(self.conv(c)),
                LayerSpec::MaxPool2D(p) => LayerDescriptor::MaxPool2d {
                    pool: [p.pool.0, p.pool.1],
                    strides: [p.strides.0, p.strides.1],
                },
                LayerSpec::AvgPool2D(p) => LayerDescriptor::AvgPool2d {
                    pool: [p.pool.0, p.pool.1],
                    strides: [p.strides.0, p.strides.1],
                },
                LayerSpec::Flatten => LayerDescriptor::Flatten,
                LayerSpec::ReLU => LayerDescriptor::Relu,
                LayerSpec::Residual(block) => LayerDescriptor::ResidualBlock {
                    branch: self.layers(&block.branch),
                    skip: match &block.skip {
                        Skip::Identity => SkipDescriptor::Identity,
                        Skip::Projection(c) => SkipDescriptor::Projection { conv: self.conv(c) },
                    },
                },
            })
            .collect()
    }
}

/// Serializes a network. Weights are narrowed to binary32.
pub fn save_model(net: &Network) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut w = BlobWriter { bytes: Vec::new() };
    let layers = w.layers(net.layers());
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        name: net.name.clone(),
        input_shape: net.input_shape().to_vec(),
        preprocessing: net.preprocessing.clone(),
        class_labels: net.class_labels.clone(),
        layers,
    };
    let mut text = serde_json::to_vec_pretty(&manifest)?;
    text.push(b'\n');
    Ok((text, w.bytes))
}

pub fn write_model(net: &Network, manifest_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<()> {
    let (manifest, blob) = save_model(net)?;
    write_file(manifest_path.as_ref(), &manifest)?;
    write_file(blob_path.as_ref(), &blob)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A decoded netpbm raster: 1 channel for P5, 3 for P6.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::MalformedHeader(format!("unsupported magic {other:?}"))),
    };
    let mut number = |what: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut pos)?;
        tok.parse::<usize>()
            .map_err(|_| Error::MalformedHeader(format!("bad {what} {tok:?}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("empty raster {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval.min(u32::MAX as usize) as u32));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::MalformedHeader("missing raster separator".into())),
    }
    let n = width * height * channels;
    let pixels = bytes
        .get(pos..pos + n)
        .ok_or_else(|| Error::MalformedHeader(format!("raster needs {n} bytes, {} present", bytes.len() - pos)))?
        .to_vec();
    Ok(Raster {
        width,
        height,
        channels,
        pixels,
    })
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::MalformedHeader("unexpected end of header".into())),
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() || *b == b'#' {
            break;
        }
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn encode_netpbm(raster: &Raster) -> Vec<u8> {
    let magic = if raster.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    out.extend_from_slice(&raster.pixels);
    out
}

/// Reads a P6 (or P5) image as an `[H, W, C]` tensor with values `byte / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let r = decode_netpbm(&bytes)?;
    Ok(Tensor::from_parts(
        vec![r.height, r.width, r.channels],
        r.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    ))
}

/// Writes a `[0, 1]` image (1 or 3 channels), rounding to the nearest byte.
pub fn save_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w, c) = image.image_dims()?;
    if c != 1 && c != 3 {
        return Err(Error::Dimension(format!("cannot write a {c}-channel image")));
    }
    let raster = Raster {
        width: w,
        height: h,
        channels: c,
        pixels: image
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    };
    write_file(path.as_ref(), &encode_netpbm(&raster))
}

/// Encodes a mask as black (0) and white (255). Pixel masks become P5; masks over
/// individual channels of a 3-channel input become P6.
pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let (h, w, c) = match mask.shape() {
        &[h, w] => (h, w, 1),
        &[h, w, c] if c == 1 || c == 3 => (h, w, c),
        s => return Err(Error::Dimension(format!("cannot encode a mask of shape {s:?}"))),
    };
    Ok(encode_netpbm(&Raster {
        width: w,
        height: h,
        channels: c,
        pixels: mask.selected().iter().map(|&s| if s { 255 } else { 0 }).collect(),
    }))
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_mask(mask)?)
}

/// Reads an object mask from a P5 file; gray levels above 127 are object.
pub fn load_object_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let r = decode_netpbm(&bytes)?;
    if r.channels != 1 {
        return Err(Error::MalformedHeader(format!(
            "{}: object masks must be P5 grayscale",
            path.display()
        )));
    }
    Mask::new(vec![r.height, r.width], r.pixels.iter().map(|&p| p > 127).collect())
}

/// Metadata written next to a contribution blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionSidecar {
    pub shape: Vec<usize>,
    /// Always `"f64-le"`.
    pub dtype: String,
    pub method: MethodConfig,
    pub selected_output: usize,
    pub layer_sums: Vec<LayerSum>,
    pub diagnostics: Vec<String>,
}

pub fn encode_contributions(values: &Tensor) -> Vec<u8> {
    values.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes the map as raw little-endian `f64` plus a pretty JSON sidecar.
pub fn write_contributions(map: &ContributionMap, blob_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<()> {
    let sidecar = ContributionSidecar {
        shape: map.values.shape().to_vec(),
        dtype: "f64-le".into(),
        method: map.method,
        selected_output: map.selected_output,
        layer_sums: map.layer_sums.clone(),
        diagnostics: map.diagnostics.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    write_file(blob_path.as_ref(), &encode_contributions(&map.values))?;
    write_file(sidecar_path.as_ref(), &json)
}

/// Reads a contribution blob back using the shape from its sidecar.
pub fn read_contributions(blob_path: impl AsRef<Path>, sidecar_path: impl AsRef<Path>) -> Result<(Tensor, ContributionSidecar)> {
    let sidecar_path = sidecar_path.as_ref();
    let blob_path = blob_path.as_ref();
    let meta: ContributionSidecar =
        serde_json::from_slice(&fs::read(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?)?;
    let bytes = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::BlobLength {
            declared: n * 8,
            actual: bytes.len(),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((Tensor::from_vec(meta.shape.clone(), data)?, meta))
}
