//! Student network definition, shape inference, weight files and the
//! floating-point reference forward pass.
//!
//! Tensors are stored row-major in `H x W x C` order, matching the raw image
//! file layout. Flattening keeps that order, so the first dense layer sees the
//! input index `(y * W + x) * C + c`.

use std::collections::HashSet;
use std::fmt;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Spatial shape of an activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TensorShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Schema(format!(
                "tensor dimensions must be >= 1, got {height}x{width}x{channels}"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    /// Number of scalar elements.
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_vector(&self) -> bool {
        self.height == 1 && self.width == 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Same-padded, stride-1 cross-correlation.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        bias: bool,
    },
    /// Non-overlapping max pooling (stride = window).
    MaxPool { window: usize },
    Relu,
    Flatten,
    Dense { out_features: usize, bias: bool },
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
}

/// A validated student network description.
///
/// Construct through [`ModelConfig::new`] or [`parse_model_config`]; both run
/// shape inference and cache the per-layer output shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    pub input_shape: TensorShape,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    shapes: Vec<TensorShape>,
}

impl ModelConfig {
    pub fn new(
        name: impl Into<String>,
        input_shape: TensorShape,
        layers: Vec<LayerSpec>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut config = Self {
            name: name.into(),
            input_shape,
            layers,
            num_classes,
            shapes: Vec::new(),
        };
        config.shapes = validate(&config)?;
        Ok(config)
    }

    /// The two-conv, dense-tail reference student (5,682 parameters).
    pub fn reference() -> Self {
        parse_model_config(REFERENCE_MODEL_JSON).expect("bundled reference model is valid")
    }

    /// Output shape of every layer, in order.
    pub fn output_shapes(&self) -> &[TensorShape] {
        &self.shapes
    }

    /// Input shape seen by layer `index`.
    pub fn input_shape_of(&self, index: usize) -> TensorShape {
        if index == 0 {
            self.input_shape
        } else {
            self.shapes[index - 1]
        }
    }

    pub fn output_shape(&self) -> TensorShape {
        self.shapes.last().copied().unwrap_or(self.input_shape)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Count of conv, pool and dense layers (activations, flatten and
    /// softmax excluded).
    pub fn compute_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l.kind,
                    LayerKind::Conv2d { .. } | LayerKind::MaxPool { .. } | LayerKind::Dense { .. }
                )
            })
            .count()
    }

    /// Parameters held by layer `index`.
    pub fn layer_param_count(&self, index: usize) -> usize {
        let input = self.input_shape_of(index);
        match self.layers[index].kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                bias,
            } => out_channels * (input.channels * kernel * kernel + usize::from(bias)),
            LayerKind::Dense { out_features, bias } => {
                out_features * (input.len() + usize::from(bias))
            }
            _ => 0,
        }
    }
}

pub const REFERENCE_MODEL_JSON: &str = include_str!("../data/student2.json");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    name: String,
    input: RawShape,
    num_classes: usize,
    layers: Vec<RawLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShape {
    h: usize,
    w: usize,
    c: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    kind: String,
    name: Option<String>,
    out_channels: Option<usize>,
    kernel: Option<usize>,
    padding: Option<String>,
    stride: Option<usize>,
    bias: Option<bool>,
    window: Option<usize>,
    out_features: Option<usize>,
}

fn required(value: Option<usize>, field: &str, layer: &str) -> Result<usize> {
    value.ok_or_else(|| Error::Schema(format!("layer `{layer}` is missing `{field}`")))
}

impl RawLayer {
    fn into_spec(self, index: usize) -> Result<LayerSpec> {
        let name = self
            .name
            .clone()
            .unwrap_or_else(|| format!("{}_{index}", self.kind));
        let kind = match self.kind.as_str() {
            "conv2d" => {
                if let Some(p) = self.padding.as_deref() {
                    if p != "same" {
                        return Err(Error::Schema(format!(
                            "layer `{name}`: only same padding is supported, got `{p}`"
                        )));
                    }
                }
                if let Some(s) = self.stride {
                    if s != 1 {
                        return Err(Error::Schema(format!(
                            "layer `{name}`: only stride 1 is supported, got {s}"
                        )));
                    }
                }
                LayerKind::Conv2d {
                    out_channels: required(self.out_channels, "out_channels", &name)?,
                    kernel: required(self.kernel, "kernel", &name)?,
                    bias: self.bias.unwrap_or(true),
                }
            }
            "maxpool" => LayerKind::MaxPool {
                window: required(self.window, "window", &name)?,
            },
            "relu" => LayerKind::Relu,
            "flatten" => LayerKind::Flatten,
            "dense" => LayerKind::Dense {
                out_features: required(self.out_features, "out_features", &name)?,
                bias: self.bias.unwrap_or(true),
            },
            "softmax" => LayerKind::Softmax,
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        };
        Ok(LayerSpec { name, kind })
    }
}

/// Parses and validates a model document.
pub fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let raw: RawModel = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let input = TensorShape::new(raw.input.h, raw.input.w, raw.input.c)?;
    let layers = raw
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.into_spec(i))
        .collect::<Result<Vec<_>>>()?;
    ModelConfig::new(raw.name, input, layers, raw.num_classes)
}

/// Output shape of every layer of `config`.
pub fn infer_shapes(config: &ModelConfig) -> Vec<TensorShape> {
    config.shapes.clone()
}

fn validate(config: &ModelConfig) -> Result<Vec<TensorShape>> {
    if config.num_classes == 0 {
        return Err(Error::Schema("num_classes must be >= 1".into()));
    }
    let mut names = HashSet::new();
    for layer in &config.layers {
        if !names.insert(layer.name.as_str()) {
            return Err(Error::Schema(format!("duplicate layer name `{}`", layer.name)));
        }
    }

    let mut shape = config.input_shape;
    let mut flattened = false;
    let mut shapes = Vec::with_capacity(config.layers.len());
    let last = config.layers.len().saturating_sub(1);
    for (i, layer) in config.layers.iter().enumerate() {
        let name = &layer.name;
        let overflow = || Error::DimensionOverflow(name.clone());
        shape = match layer.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                ..
            } => {
                if kernel % 2 == 0 {
                    return Err(Error::Schema(format!(
                        "layer `{name}`: conv kernel side must be odd, got {kernel}"
                    )));
                }
                if out_channels == 0 {
                    return Err(Error::Schema(format!(
                        "layer `{name}`: out_channels must be >= 1"
                    )));
                }
                if flattened {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d `{name}` after flatten"
                    )));
                }
                shape.height.checked_mul(shape.width).ok_or_else(overflow)?;
                TensorShape {
                    channels: out_channels,
                    ..shape
                }
            }
            LayerKind::MaxPool { window } => {
                if window < 2 {
                    return Err(Error::Schema(format!(
                        "layer `{name}`: pool window must be >= 2, got {window}"
                    )));
                }
                if flattened {
                    return Err(Error::ShapeMismatch(format!(
                        "maxpool `{name}` after flatten"
                    )));
                }
                if !shape.height.is_multiple_of(window) || !shape.width.is_multiple_of(window) {
                    return Err(Error::NonDivisiblePool {
                        layer: name.clone(),
                        window,
                        height: shape.height,
                        width: shape.width,
                    });
                }
                TensorShape {
                    height: shape.height / window,
                    width: shape.width / window,
                    channels: shape.channels,
                }
            }
            LayerKind::Relu => shape,
            LayerKind::Flatten => {
                if flattened {
                    return Err(Error::Schema(format!(
                        "flatten may appear only once (layer `{name}`)"
                    )));
                }
                flattened = true;
                let n = shape
                    .height
                    .checked_mul(shape.width)
                    .and_then(|hw| hw.checked_mul(shape.channels))
                    .ok_or_else(overflow)?;
                TensorShape {
                    height: 1,
                    width: 1,
                    channels: n,
                }
            }
            LayerKind::Dense { out_features, .. } => {
                if out_features == 0 {
                    return Err(Error::Schema(format!(
                        "layer `{name}`: out_features must be >= 1"
                    )));
                }
                if !flattened {
                    return Err(Error::DenseBeforeFlatten(name.clone()));
                }
                shape
                    .channels
                    .checked_mul(out_features)
                    .ok_or_else(overflow)?;
                TensorShape {
                    height: 1,
                    width: 1,
                    channels: out_features,
                }
            }
            LayerKind::Softmax => {
                if i != last {
                    return Err(Error::Schema(format!(
                        "softmax `{name}` must be the final layer"
                    )));
                }
                shape
            }
        };
        shapes.push(shape);
    }

    let out = shapes.last().copied().unwrap_or(config.input_shape);
    if !out.is_vector() || out.channels != config.num_classes {
        return Err(Error::ShapeMismatch(format!(
            "final shape {out} does not match 1x1x{}",
            config.num_classes
        )));
    }
    Ok(shapes)
}

/// Total trainable parameters.
pub fn param_count(config: &ModelConfig) -> usize {
    (0..config.layers.len())
        .map(|i| config.layer_param_count(i))
        .sum()
}

/// Parameters of one conv or dense layer.
///
/// Conv kernels are `out x in x k x k`, dense matrices `out x in`; both
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub layer: usize,
    pub out: usize,
    /// Weights feeding one output (`in * k * k` for conv, `in` for dense).
    pub fan_in: usize,
    pub kernel: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl LayerWeights {
    pub fn len(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Real-valued parameters for every parameterized layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub layers: Vec<LayerWeights>,
}

pub const WEIGHT_MAGIC: [u8; 4] = *b"SNN1";

impl WeightSet {
    /// Splits a flat parameter vector (file order) into per-layer tensors.
    pub fn from_flat(config: &ModelConfig, values: &[f32]) -> Result<Self> {
        let expected = param_count(config);
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight(i));
        }
        let mut layers = Vec::new();
        let mut cursor = 0;
        for (index, layer) in config.layers.iter().enumerate() {
            let input = config.input_shape_of(index);
            let (out, fan_in, has_bias) = match layer.kind {
                LayerKind::Conv2d {
                    out_channels,
                    kernel,
                    bias,
                } => (out_channels, input.channels * kernel * kernel, bias),
                LayerKind::Dense { out_features, bias } => (out_features, input.len(), bias),
                _ => continue,
            };
            let n = out * fan_in;
            let kernel = values[cursor..cursor + n].to_vec();
            cursor += n;
            let bias = has_bias.then(|| {
                let b = values[cursor..cursor + out].to_vec();
                cursor += out;
                b
            });
            layers.push(LayerWeights {
                layer: index,
                out,
                fan_in,
                kernel,
                bias,
            });
        }
        debug_assert_eq!(cursor, expected);
        Ok(Self { layers })
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        Self::from_flat(config, &vec![0.0; param_count(config)]).expect("zero weights are valid")
    }

    /// Flat parameter vector in file order.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.kernel);
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerWeights::len).sum()
    }

    /// Weights of the layer at config index `layer`, if it has any.
    pub fn for_layer(&self, layer: usize) -> Option<&LayerWeights> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Serializes into the `SNN1` weight-file layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let flat = self.to_flat();
        let mut bytes = Vec::with_capacity(8 + 4 * flat.len());
        bytes.extend_from_slice(&WEIGHT_MAGIC);
        bytes.extend_from_slice(&(flat.len() as u32).to_le_bytes());
        for v in flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }
}

/// Reads a weight file for `config`.
pub fn load_weights(config: &ModelConfig, blob: &[u8]) -> Result<WeightSet> {
    if blob.len() < 8 {
        let mut found = [0u8; 4];
        let n = blob.len().min(4);
        found[..n].copy_from_slice(&blob[..n]);
        if found != WEIGHT_MAGIC {
            return Err(Error::MagicMismatch(found));
        }
        return Err(Error::LengthMismatch {
            expected: param_count(config),
            found: 0,
        });
    }
    let magic: [u8; 4] = blob[..4].try_into().unwrap();
    if magic != WEIGHT_MAGIC {
        return Err(Error::MagicMismatch(magic));
    }
    let declared = u32::from_le_bytes(blob[4..8].try_into().unwrap()) as usize;
    let payload = &blob[8..];
    let expected = param_count(config);
    if declared != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: declared,
        });
    }
    if payload.len() != 4 * declared {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len() / 4,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    WeightSet::from_flat(config, &values)
}

/// Decodes a raw little-endian `f32` image for `shape`.
pub fn parse_image(shape: TensorShape, bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() != 4 * shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "image file holds {} bytes, {shape} needs {}",
            bytes.len(),
            4 * shape.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn image_to_bytes(image: &[f32]) -> Vec<u8> {
    image.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn check_input(config: &ModelConfig, image: &[f32]) -> Result<()> {
    if image.len() != config.input_shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "image has {} values, model input {} needs {}",
            image.len(),
            config.input_shape,
            config.input_shape.len()
        )));
    }
    if let Some(i) = image.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(i));
    }
    Ok(())
}

pub(crate) fn check_weights(config: &ModelConfig, weights: &WeightSet) -> Result<()> {
    let expected = param_count(config);
    if weights.param_count() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: weights.param_count(),
        });
    }
    Ok(())
}

/// Floating-point forward pass. Returns the logits (a trailing softmax layer
/// is not applied).
pub fn forward_float(config: &ModelConfig, weights: &WeightSet, image: &[f32]) -> Result<Vec<f32>> {
    check_input(config, image)?;
    check_weights(config, weights)?;

    let mut act = image.to_vec();
    for (index, layer) in config.layers.iter().enumerate() {
        let input = config.input_shape_of(index);
        act = match layer.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                ..
            } => {
                let w = weights.for_layer(index).expect("checked weight layout");
                conv2d_f32(&act, input, out_channels, kernel, w)
            }
            LayerKind::MaxPool { window } => maxpool_f32(&act, input, window),
            LayerKind::Relu => act.into_iter().map(|v| v.max(0.0)).collect(),
            LayerKind::Flatten | LayerKind::Softmax => act,
            LayerKind::Dense { out_features, .. } => {
                let w = weights.for_layer(index).expect("checked weight layout");
                (0..out_features)
                    .map(|o| {
                        let row = &w.kernel[o * w.fan_in..(o + 1) * w.fan_in];
                        let b = w.bias.as_ref().map_or(0.0, |b| b[o]);
                        row.iter().zip(&act).fold(b, |s, (a, x)| s + a * x)
                    })
                    .collect()
            }
        };
    }
    Ok(act)
}

fn conv2d_f32(
    input: &[f32],
    shape: TensorShape,
    out_channels: usize,
    k: usize,
    w: &LayerWeights,
) -> Vec<f32> {
    let TensorShape {
        height,
        width,
        channels,
    } = shape;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f32; height * width * out_channels];
    for y in 0..height {
        for x in 0..width {
            for o in 0..out_channels {
                let mut acc = w.bias.as_ref().map_or(0.0, |b| b[o]);
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - pad;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let base = (iy as usize * width + ix as usize) * channels;
                        for c in 0..channels {
                            acc += w.kernel[((o * channels + c) * k + ky) * k + kx] * input[base + c];
                        }
                    }
                }
                out[(y * width + x) * out_channels + o] = acc;
            }
        }
    }
    out
}

fn maxpool_f32(input: &[f32], shape: TensorShape, window: usize) -> Vec<f32> {
    let (oh, ow, c) = (shape.height / window, shape.width / window, shape.channels);
    let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
    for y in 0..shape.height {
        for x in 0..shape.width {
            let dst = ((y / window) * ow + x / window) * c;
            let src = (y * shape.width + x) * c;
            for ch in 0..c {
                out[dst + ch] = out[dst + ch].max(input[src + ch]);
            }
        }
    }
    out
}

/// Numerically stable softmax in `f64`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_only(input: usize, out: usize, bias: bool) -> ModelConfig {
        ModelConfig::new(
            "d",
            TensorShape::new(1, 1, input).unwrap(),
            vec![
                LayerSpec {
                    name: "flat".into(),
                    kind: LayerKind::Flatten,
                },
                LayerSpec {
                    name: "fc".into(),
                    kind: LayerKind::Dense {
                        out_features: out,
                        bias,
                    },
                },
            ],
            out,
        )
        .unwrap()
    }

    #[test]
    fn reference_shapes_by_hand() {
        let cfg = ModelConfig::reference();
        let dims: Vec<(usize, usize, usize)> = cfg
            .output_shapes()
            .iter()
            .map(|s| (s.height, s.width, s.channels))
            .collect();
        assert_eq!(
            dims,
            vec![
                (48, 48, 2),
                (24, 24, 2),
                (24, 24, 2),
                (24, 24, 4),
                (12, 12, 4),
                (12, 12, 4),
                (6, 6, 4),
                (1, 1, 144),
                (1, 1, 38),
                (1, 1, 38),
                (1, 1, 2),
                (1, 1, 2),
            ]
        );
        assert_eq!(cfg.compute_layer_count(), 7);
        assert_eq!(cfg.input_shape, TensorShape::new(48, 48, 1).unwrap());
    }

    #[test]
    fn reference_param_count() {
        let cfg = ModelConfig::reference();
        let per_layer: Vec<usize> = (0..cfg.layers.len())
            .map(|i| cfg.layer_param_count(i))
            .filter(|&n| n > 0)
            .collect();
        assert_eq!(per_layer, vec![20, 76, 5510, 76]);
        assert_eq!(param_count(&cfg), 5682);
    }

    #[test]
    fn small_param_counts() {
        assert_eq!(param_count(&dense_only(3, 2, true)), 8);
        let cfg = ModelConfig::new(
            "none",
            TensorShape::new(2, 2, 1).unwrap(),
            vec![
                LayerSpec {
                    name: "p".into(),
                    kind: LayerKind::MaxPool { window: 2 },
                },
                LayerSpec {
                    name: "r".into(),
                    kind: LayerKind::Relu,
                },
            ],
            1,
        )
        .unwrap();
        assert_eq!(param_count(&cfg), 0);
    }

    #[test]
    fn dense_before_flatten_rejected() {
        let doc = r#"{"name":"bad","input":{"h":4,"w":4,"c":1},"num_classes":2,
            "layers":[{"kind":"dense","name":"fc","out_features":2}]}"#;
        let err = parse_model_config(doc).unwrap_err();
        assert!(err.to_string().contains("dense before flatten"), "{err}");
    }

    #[test]
    fn unknown_kind_rejected() {
        let doc = r#"{"name":"bad","input":{"h":4,"w":4,"c":1},"num_classes":2,
            "layers":[{"kind":"lstm"}]}"#;
        assert!(matches!(
            parse_model_config(doc),
            Err(Error::UnknownLayerKind(k)) if k == "lstm"
        ));
    }

    #[test]
    fn empty_layer_list() {
        let ok = r#"{"name":"id","input":{"h":1,"w":1,"c":2},"num_classes":2,"layers":[]}"#;
        assert_eq!(parse_model_config(ok).unwrap().layers.len(), 0);
        let bad = r#"{"name":"id","input":{"h":2,"w":1,"c":2},"num_classes":2,"layers":[]}"#;
        assert!(matches!(
            parse_model_config(bad),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn schema_errors() {
        assert!(matches!(
            parse_model_config(r#"{"name":"x"}"#),
            Err(Error::Schema(_))
        ));
        let even = r#"{"name":"x","input":{"h":4,"w":4,"c":1},"num_classes":2,
            "layers":[{"kind":"conv2d","out_channels":2,"kernel":2}]}"#;
        assert!(matches!(parse_model_config(even), Err(Error::Schema(_))));
        let pool = r#"{"name":"x","input":{"h":5,"w":4,"c":1},"num_classes":2,
            "layers":[{"kind":"maxpool","window":2}]}"#;
        assert!(matches!(
            parse_model_config(pool),
            Err(Error::NonDivisiblePool { .. })
        ));
        let twice = r#"{"name":"x","input":{"h":1,"w":1,"c":2},"num_classes":2,
            "layers":[{"kind":"flatten"},{"kind":"flatten"}]}"#;
        assert!(matches!(parse_model_config(twice), Err(Error::Schema(_))));
    }

    #[test]
    fn dimension_overflow_detected() {
        let doc = format!(
            r#"{{"name":"x","input":{{"h":{},"w":{},"c":4}},"num_classes":2,
            "layers":[{{"kind":"flatten"}}]}}"#,
            usize::MAX / 2,
            4
        );
        assert!(matches!(
            parse_model_config(&doc),
            Err(Error::DimensionOverflow(_))
        ));
    }

    #[test]
    fn same_padding_and_pool_shapes() {
        let doc = r#"{"name":"x","input":{"h":48,"w":48,"c":1},"num_classes":1152,
            "layers":[{"kind":"conv2d","out_channels":2,"kernel":3},
                      {"kind":"maxpool","window":2},{"kind":"flatten"}]}"#;
        let cfg = parse_model_config(doc).unwrap();
        assert_eq!(cfg.output_shapes()[0], TensorShape::new(48, 48, 2).unwrap());
        assert_eq!(cfg.output_shapes()[1], TensorShape::new(24, 24, 2).unwrap());
    }

    #[test]
    fn dense_hand_case() {
        let cfg = dense_only(1, 2, true);
        let w = WeightSet::from_flat(&cfg, &[2.0, -1.0, 0.5, 0.5]).unwrap();
        assert_eq!(forward_float(&cfg, &w, &[1.0]).unwrap(), vec![2.5, -0.5]);
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let cfg = ModelConfig::reference();
        let w = WeightSet::zeros(&cfg);
        let image: Vec<f32> = (0..48 * 48).map(|i| (i % 7) as f32 * 0.3).collect();
        assert_eq!(forward_float(&cfg, &w, &image).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn conv_is_cross_correlation() {
        // 3x3 single-channel image, asymmetric kernel: no flip means the
        // top-left tap reads the up-left neighbour.
        let doc = r#"{"name":"c","input":{"h":3,"w":3,"c":1},"num_classes":9,
            "layers":[{"kind":"conv2d","out_channels":1,"kernel":3,"bias":false},
                      {"kind":"flatten"}]}"#;
        let cfg = parse_model_config(doc).unwrap();
        let mut k = vec![0.0f32; 9];
        k[0] = 1.0;
        let w = WeightSet::from_flat(&cfg, &k).unwrap();
        let img: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let out = forward_float(&cfg, &w, &img).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let cfg = ModelConfig::reference();
        let flat: Vec<f32> = (0..5682).map(|i| (i as f32 * 0.37).sin()).collect();
        let w = WeightSet::from_flat(&cfg, &flat).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(bytes.len(), 8 + 4 * 5682);
        let back = load_weights(&cfg, &bytes).unwrap();
        assert_eq!(back.to_flat(), flat);

        let mut short = b"SNN1".to_vec();
        short.extend_from_slice(&5681u32.to_le_bytes());
        short.extend(flat[..5681].iter().flat_map(|v| v.to_le_bytes()));
        let err = load_weights(&cfg, &short).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            load_weights(&cfg, &bad_magic),
            Err(Error::MagicMismatch(_))
        ));

        let mut nan = bytes.clone();
        nan[8 + 4 * 10..8 + 4 * 11].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = load_weights(&cfg, &nan).unwrap_err();
        assert!(err.to_string().contains("non-finite weight"), "{err}");
    }

    #[test]
    fn forward_rejects_bad_input() {
        let cfg = ModelConfig::reference();
        let w = WeightSet::zeros(&cfg);
        assert!(matches!(
            forward_float(&cfg, &w, &[0.0; 10]),
            Err(Error::ShapeMismatch(_))
        ));
        let mut img = vec![0.0; 48 * 48];
        img[3] = f32::INFINITY;
        assert!(matches!(
            forward_float(&cfg, &w, &img),
            Err(Error::NonFiniteInput(3))
        ));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2.0, 0.0]);
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.880797).abs() < 1e-6);
        assert!((p[1] - 0.119203).abs() < 1e-6);
        let p = softmax(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 1e-300);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
