//! Layer-granular fixed-point emulation.
//!
//! Values are held as integer codes `v = code * 2^-F`. Products are formed
//! exactly, accumulated in a saturating accumulator that carries the full
//! product precision plus `acc_headroom` extra integer bits above the layer's
//! activation format, then rounded half-to-even back into that activation
//! format.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{
    argmax, check_input, check_weights, forward_float, LayerKind, ModelConfig, TensorShape,
    WeightSet,
};

/// Signed fixed-point format: `total_bits` wide, `integer_bits` of which are
/// integer bits including the sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantFormat {
    total_bits: u32,
    integer_bits: u32,
}

impl QuantFormat {
    pub fn new(total_bits: u32, integer_bits: u32) -> Result<Self> {
        if !(2..=32).contains(&total_bits) || integer_bits < 1 || integer_bits > total_bits {
            return Err(Error::InvalidFormat {
                total: total_bits,
                integer: integer_bits,
            });
        }
        Ok(Self {
            total_bits,
            integer_bits,
        })
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn integer_bits(&self) -> u32 {
        self.integer_bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.total_bits - self.integer_bits
    }

    pub fn step(&self) -> f64 {
        (-(self.frac_bits() as f64)).exp2()
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.total_bits - 1))
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.total_bits - 1)) - 1
    }

    pub fn min_value(&self) -> f64 {
        self.decode(self.min_code())
    }

    pub fn max_value(&self) -> f64 {
        self.decode(self.max_code())
    }

    /// Nearest code (ties to even), saturated to the format range.
    pub fn encode(&self, x: f64) -> i64 {
        let scaled = (x * (self.frac_bits() as f64).exp2()).round_ties_even();
        if scaled >= self.max_code() as f64 {
            self.max_code()
        } else if scaled <= self.min_code() as f64 {
            self.min_code()
        } else {
            scaled as i64
        }
    }

    pub fn decode(&self, code: i64) -> f64 {
        code as f64 * self.step()
    }

    /// Moves a code carrying `from_frac` fractional bits into this format.
    fn requantize(&self, code: i128, from_frac: u32) -> i64 {
        let (min, max) = (self.min_code() as i128, self.max_code() as i128);
        let to_frac = self.frac_bits();
        let moved = if to_frac >= from_frac {
            let shift = to_frac - from_frac;
            if code > (max >> shift) {
                max
            } else if code < (min >> shift) {
                min
            } else {
                code << shift
            }
        } else {
            shift_round_half_even(code, from_frac - to_frac)
        };
        moved.clamp(min, max) as i64
    }
}

impl fmt::Display for QuantFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fmt({},{})", self.total_bits, self.integer_bits)
    }
}

/// Arithmetic right shift rounding half to even.
fn shift_round_half_even(code: i128, shift: u32) -> i128 {
    if shift == 0 {
        return code;
    }
    if shift >= 127 {
        return 0;
    }
    let q = code >> shift;
    let r = code - (q << shift);
    let half = 1i128 << (shift - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Rounds `x` half-to-even onto the grid of `fmt` and saturates.
pub fn quantize_value(x: f64, fmt: QuantFormat) -> f64 {
    fmt.decode(fmt.encode(x))
}

/// Formats used for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerQuant {
    /// Required for conv and dense layers.
    pub weight: Option<QuantFormat>,
    pub act: QuantFormat,
}

/// Per-layer weight/activation formats plus accumulator headroom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantPlan {
    pub layers: BTreeMap<String, LayerQuant>,
    /// Format for the raw input image; defaults to the first layer's
    /// activation format.
    pub input: Option<QuantFormat>,
    pub acc_headroom: u32,
}

pub const DEFAULT_ACC_HEADROOM: u32 = 6;

impl QuantPlan {
    /// Same formats on every layer.
    pub fn uniform(
        config: &ModelConfig,
        weight: QuantFormat,
        act: QuantFormat,
        acc_headroom: u32,
    ) -> Self {
        let layers = config
            .layers
            .iter()
            .map(|l| {
                let w = l.kind.is_parameterized().then_some(weight);
                (l.name.clone(), LayerQuant { weight: w, act })
            })
            .collect();
        Self {
            layers,
            input: None,
            acc_headroom,
        }
    }

    /// Weights fmt(8,3), activations fmt(10,4), headroom 6.
    pub fn reference(config: &ModelConfig) -> Self {
        Self::uniform(
            config,
            QuantFormat::new(8, 3).unwrap(),
            QuantFormat::new(10, 4).unwrap(),
            DEFAULT_ACC_HEADROOM,
        )
    }

    pub fn entry(&self, config: &ModelConfig, index: usize) -> Result<&LayerQuant> {
        let layer = &config.layers[index];
        let entry = self
            .layers
            .get(&layer.name)
            .ok_or_else(|| Error::MissingPlanEntry(layer.name.clone()))?;
        if layer.kind.is_parameterized() && entry.weight.is_none() {
            return Err(Error::MissingPlanEntry(format!("{} (weight format)", layer.name)));
        }
        Ok(entry)
    }

    fn input_format(&self, config: &ModelConfig) -> Result<QuantFormat> {
        match (self.input, config.layers.is_empty()) {
            (Some(f), _) => Ok(f),
            (None, false) => Ok(self.entry(config, 0)?.act),
            (None, true) => Err(Error::MissingPlanEntry("input".into())),
        }
    }

    /// Checks that every layer of `config` is covered.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for i in 0..config.layers.len() {
            self.entry(config, i)?;
        }
        self.input_format(config)?;
        Ok(())
    }
}

fn parse_format(v: &Value, ctx: &str) -> Result<QuantFormat> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| Error::Schema(format!("{ctx}: expected [total, int]")))?;
    let get = |i: usize| {
        arr[i]
            .as_u64()
            .and_then(|n| u32::try_from(n).ok())
            .ok_or_else(|| Error::Schema(format!("{ctx}: bit counts must be small integers")))
    };
    QuantFormat::new(get(0)?, get(1)?)
}

/// Parses a quant-plan document:
/// `{layer_name: {w: [total,int], a: [total,int]}, acc_headroom: n}`.
/// An optional `input: {a: [total,int]}` entry sets the image format.
pub fn parse_quant_plan(text: &str) -> Result<QuantPlan> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::Schema("quant plan must be an object".into()))?;
    let mut plan = QuantPlan {
        layers: BTreeMap::new(),
        input: None,
        acc_headroom: DEFAULT_ACC_HEADROOM,
    };
    for (key, value) in obj {
        if key == "acc_headroom" {
            plan.acc_headroom = value
                .as_u64()
                .and_then(|n| u32::try_from(n).ok())
                .filter(|&n| n <= 32)
                .ok_or_else(|| Error::Schema("acc_headroom must be an integer in 0..=32".into()))?;
            continue;
        }
        let entry = value
            .as_object()
            .ok_or_else(|| Error::Schema(format!("entry `{key}` must be an object")))?;
        if let Some(extra) = entry.keys().find(|k| *k != "w" && *k != "a") {
            return Err(Error::Schema(format!("entry `{key}`: unknown field `{extra}`")));
        }
        let act = entry
            .get("a")
            .ok_or_else(|| Error::Schema(format!("entry `{key}` is missing `a`")))
            .and_then(|v| parse_format(v, key))?;
        if key == "input" {
            plan.input = Some(act);
            continue;
        }
        let weight = entry.get("w").map(|v| parse_format(v, key)).transpose()?;
        plan.layers.insert(key.clone(), LayerQuant { weight, act });
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub layer: usize,
    pub out: usize,
    pub fan_in: usize,
    pub format: QuantFormat,
    pub kernel: Vec<i64>,
    pub bias: Option<Vec<i64>>,
}

/// Integer-coded weights; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeightSet {
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedWeightSet {
    pub fn for_layer(&self, layer: usize) -> Option<&QuantizedLayer> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Exact real-valued view of the coded weights.
    pub fn decode(&self) -> WeightSet {
        use crate::model::LayerWeights;
        WeightSet {
            layers: self
                .layers
                .iter()
                .map(|q| LayerWeights {
                    layer: q.layer,
                    out: q.out,
                    fan_in: q.fan_in,
                    kernel: q.kernel.iter().map(|&c| q.format.decode(c) as f32).collect(),
                    bias: q
                        .bias
                        .as_ref()
                        .map(|b| b.iter().map(|&c| q.format.decode(c) as f32).collect()),
                })
                .collect(),
        }
    }
}

/// Element-wise [`quantize_value`] with each layer's weight format.
pub fn quantize_weights(
    config: &ModelConfig,
    weights: &WeightSet,
    plan: &QuantPlan,
) -> Result<QuantizedWeightSet> {
    check_weights(config, weights)?;
    let layers = weights
        .layers
        .iter()
        .map(|w| {
            let format = plan
                .entry(config, w.layer)?
                .weight
                .expect("entry() checks weight formats");
            let enc = |v: &f32| format.encode(f64::from(*v));
            Ok(QuantizedLayer {
                layer: w.layer,
                out: w.out,
                fan_in: w.fan_in,
                format,
                kernel: w.kernel.iter().map(enc).collect(),
                bias: w.bias.as_ref().map(|b| b.iter().map(enc).collect()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedWeightSet { layers })
}

/// Saturating accumulator with `frac` fractional bits.
#[derive(Clone, Copy)]
struct Accumulator {
    frac: u32,
    min: i128,
    max: i128,
}

impl Accumulator {
    fn new(out: QuantFormat, headroom: u32, frac: u32) -> Self {
        // integer bits (incl. sign) = out.integer_bits + headroom
        let magnitude_bits = out.integer_bits() + headroom - 1 + frac;
        let limit = 1i128 << magnitude_bits.min(125);
        Self {
            frac,
            min: -limit,
            max: limit - 1,
        }
    }

    #[inline]
    fn add(&self, acc: i128, term: i128) -> i128 {
        (acc + term).clamp(self.min, self.max)
    }
}

/// Bit-exact fixed-point forward pass. Returns decoded logits.
pub fn forward_fixed(
    config: &ModelConfig,
    qweights: &QuantizedWeightSet,
    image: &[f32],
    plan: &QuantPlan,
) -> Result<Vec<f64>> {
    check_input(config, image)?;
    let in_fmt = plan.input_format(config)?;
    let mut fmt = in_fmt;
    let mut act: Vec<i64> = image.iter().map(|&v| in_fmt.encode(f64::from(v))).collect();

    for (index, layer) in config.layers.iter().enumerate() {
        let input = config.input_shape_of(index);
        let entry = plan.entry(config, index)?;
        let out_fmt = entry.act;
        act = match layer.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                ..
            } => {
                let w = quantized_layer(qweights, index, &layer.name)?;
                conv2d_fixed(&act, fmt, input, out_channels, kernel, w, out_fmt, plan.acc_headroom)
            }
            LayerKind::Dense { out_features, .. } => {
                let w = quantized_layer(qweights, index, &layer.name)?;
                dense_fixed(&act, fmt, out_features, w, out_fmt, plan.acc_headroom)
            }
            LayerKind::MaxPool { window } => {
                let pooled = maxpool_codes(&act, input, window);
                pooled
                    .into_iter()
                    .map(|c| out_fmt.requantize(c as i128, fmt.frac_bits()))
                    .collect()
            }
            LayerKind::Relu => act
                .iter()
                .map(|&c| out_fmt.requantize(c.max(0) as i128, fmt.frac_bits()))
                .collect(),
            LayerKind::Flatten => act
                .iter()
                .map(|&c| out_fmt.requantize(c as i128, fmt.frac_bits()))
                .collect(),
            LayerKind::Softmax => break,
        };
        fmt = out_fmt;
    }
    Ok(act.iter().map(|&c| fmt.decode(c)).collect())
}

fn quantized_layer<'a>(
    qweights: &'a QuantizedWeightSet,
    index: usize,
    name: &str,
) -> Result<&'a QuantizedLayer> {
    qweights
        .for_layer(index)
        .ok_or_else(|| Error::MissingPlanEntry(format!("{name} (quantized weights)")))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_fixed(
    input: &[i64],
    in_fmt: QuantFormat,
    shape: TensorShape,
    out_channels: usize,
    k: usize,
    w: &QuantizedLayer,
    out_fmt: QuantFormat,
    headroom: u32,
) -> Vec<i64> {
    let TensorShape {
        height,
        width,
        channels,
    } = shape;
    let frac = in_fmt.frac_bits() + w.format.frac_bits();
    let acc = Accumulator::new(out_fmt, headroom, frac);
    let bias_shift = in_fmt.frac_bits();
    let pad = (k / 2) as isize;
    let mut out = vec![0i64; height * width * out_channels];
    for y in 0..height {
        for x in 0..width {
            for o in 0..out_channels {
                let mut sum = w
                    .bias
                    .as_ref()
                    .map_or(0, |b| acc.add(0, (b[o] as i128) << bias_shift));
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
                            let wc = w.kernel[((o * channels + c) * k + ky) * k + kx] as i128;
                            sum = acc.add(sum, wc * input[base + c] as i128);
                        }
                    }
                }
                out[(y * width + x) * out_channels + o] = out_fmt.requantize(sum, acc.frac);
            }
        }
    }
    out
}

fn dense_fixed(
    input: &[i64],
    in_fmt: QuantFormat,
    out_features: usize,
    w: &QuantizedLayer,
    out_fmt: QuantFormat,
    headroom: u32,
) -> Vec<i64> {
    let frac = in_fmt.frac_bits() + w.format.frac_bits();
    let acc = Accumulator::new(out_fmt, headroom, frac);
    (0..out_features)
        .map(|o| {
            let row = &w.kernel[o * w.fan_in..(o + 1) * w.fan_in];
            let init = w
                .bias
                .as_ref()
                .map_or(0, |b| acc.add(0, (b[o] as i128) << in_fmt.frac_bits()));
            let sum = row
                .iter()
                .zip(input)
                .fold(init, |s, (&wc, &xc)| acc.add(s, wc as i128 * xc as i128));
            out_fmt.requantize(sum, acc.frac)
        })
        .collect()
}

fn maxpool_codes(input: &[i64], shape: TensorShape, window: usize) -> Vec<i64> {
    let (oh, ow, c) = (shape.height / window, shape.width / window, shape.channels);
    let mut out = vec![i64::MIN; oh * ow * c];
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

/// Fraction of `inputs` on which the fixed and float paths pick the same
/// class (ties to the lower index in both).
pub fn agreement_rate(
    config: &ModelConfig,
    weights: &WeightSet,
    plan: &QuantPlan,
    inputs: &[Vec<f32>],
    exec: Exec,
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyInputSet);
    }
    plan.validate(config)?;
    let qweights = quantize_weights(config, weights, plan)?;
    let agree = exec.try_map(inputs, |image| -> Result<bool> {
        let float = forward_float(config, weights, image)?;
        let fixed = forward_fixed(config, &qweights, image, plan)?;
        Ok(argmax(&float) == argmax(&fixed))
    })?;
    Ok(agree.iter().filter(|&&a| a).count() as f64 / inputs.len() as f64)
}
