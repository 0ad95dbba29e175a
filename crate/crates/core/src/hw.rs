//! Analytic FPGA latency and resource model driven by per-layer reuse factors.
//!
//! Each parameterized layer gets `ceil(mults / R)` physical multipliers and
//! needs `iterations * R` cycles. Layers stream into each other, so network
//! latency is the slowest layer's iteration time plus the sum of every
//! layer's pipeline fill.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{LayerKind, LayerSpec, ModelConfig, TensorShape};
use crate::quant::{QuantFormat, QuantPlan};

/// Bits in one BRAM36 block.
pub const BRAM36_BITS: u64 = 36 * 1024;
pub const DEFAULT_CLOCK_MHZ: f64 = 250.0;
/// Multipliers whose operand widths sum above this map to DSP slices.
pub const DEFAULT_DSP_LUT_THRESHOLD: u32 = 10;
pub const DENSE_CTRL_LUTS: u64 = 200;

pub const KU035_JSON: &str = include_str!("../data/ku035.json");
pub const REFERENCE_HW_PLAN_JSON: &str = include_str!("../data/student2_hw.json");

/// Per-layer hardware knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerHwConfig {
    pub reuse_factor: usize,
    pub weight: Option<QuantFormat>,
    pub act: QuantFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceBudget {
    pub name: String,
    pub dsp: u64,
    pub lut: u64,
    pub ff: u64,
    pub bram36: u64,
    pub max_clock_mhz: f64,
}

impl DeviceBudget {
    /// Kintex UltraScale KU035.
    pub fn ku035() -> Self {
        parse_device(KU035_JSON).expect("bundled device file is valid")
    }
}

pub fn parse_device(text: &str) -> Result<DeviceBudget> {
    let d: DeviceBudget = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    if d.dsp == 0 || d.lut == 0 || d.ff == 0 || d.bram36 == 0 || d.max_clock_mhz.is_nan() || d.max_clock_mhz <= 0.0 {
        return Err(Error::Schema(format!(
            "device `{}`: all capacities must be positive",
            d.name
        )));
    }
    Ok(d)
}

/// Clock, calibration and per-layer reuse factors.
#[derive(Debug, Clone, PartialEq)]
pub struct HwPlan {
    pub clock_mhz: f64,
    /// Multiplies total cycles; 1.0 leaves the analytic model untouched.
    pub calibration: f64,
    pub reuse: BTreeMap<String, usize>,
    pub dsp_lut_threshold: u32,
}

impl HwPlan {
    pub fn uniform(config: &ModelConfig, reuse: usize, clock_mhz: f64) -> Self {
        Self {
            clock_mhz,
            calibration: 1.0,
            reuse: config
                .layers
                .iter()
                .filter(|l| l.kind.is_parameterized())
                .map(|l| (l.name.clone(), reuse))
                .collect(),
            dsp_lut_threshold: DEFAULT_DSP_LUT_THRESHOLD,
        }
    }

    /// conv1 R=1, conv2 R=2, both dense layers R=25 at 250 MHz.
    pub fn reference() -> Self {
        parse_hw_plan(REFERENCE_HW_PLAN_JSON).expect("bundled hardware plan is valid")
    }

    fn layer_config(
        &self,
        config: &ModelConfig,
        qplan: &QuantPlan,
        index: usize,
    ) -> Result<LayerHwConfig> {
        let layer = &config.layers[index];
        let q = qplan.entry(config, index)?;
        let reuse_factor = if layer.kind.is_parameterized() {
            *self
                .reuse
                .get(&layer.name)
                .ok_or_else(|| Error::MissingPlanEntry(format!("{} (reuse factor)", layer.name)))?
        } else {
            1
        };
        Ok(LayerHwConfig {
            reuse_factor,
            weight: q.weight,
            act: q.act,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHwPlan {
    clock_mhz: Option<f64>,
    calibration: Option<f64>,
    dsp_lut_threshold: Option<u32>,
    layers: BTreeMap<String, RawReuse>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReuse {
    reuse: usize,
}

/// Parses `{clock_mhz, calibration, layers: {name: {reuse: R}}}`.
pub fn parse_hw_plan(text: &str) -> Result<HwPlan> {
    let raw: RawHwPlan = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let clock_mhz = raw.clock_mhz.unwrap_or(DEFAULT_CLOCK_MHZ);
    let calibration = raw.calibration.unwrap_or(1.0);
    if clock_mhz.is_nan() || clock_mhz <= 0.0 || calibration.is_nan() || calibration <= 0.0 {
        return Err(Error::Schema("clock_mhz and calibration must be positive".into()));
    }
    if let Some((name, _)) = raw.layers.iter().find(|(_, r)| r.reuse == 0) {
        return Err(Error::Schema(format!("layer `{name}`: reuse must be >= 1")));
    }
    Ok(HwPlan {
        clock_mhz,
        calibration,
        reuse: raw.layers.into_iter().map(|(k, v)| (k, v.reuse)).collect(),
        dsp_lut_threshold: raw.dsp_lut_threshold.unwrap_or(DEFAULT_DSP_LUT_THRESHOLD),
    })
}

/// Multiplies available per output cycle, and how many output cycles a
/// layer iterates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerWorkload {
    pub mults: u64,
    pub iterations: u64,
}

pub fn layer_workload(layer: &LayerSpec, in_shape: TensorShape, out_shape: TensorShape) -> LayerWorkload {
    let spatial = |s: TensorShape| (s.height * s.width) as u64;
    match layer.kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            ..
        } => LayerWorkload {
            mults: (kernel * kernel * in_shape.channels * out_channels) as u64,
            iterations: spatial(out_shape),
        },
        LayerKind::Dense { out_features, .. } => LayerWorkload {
            mults: (in_shape.len() * out_features) as u64,
            iterations: 1,
        },
        LayerKind::MaxPool { .. } | LayerKind::Relu => LayerWorkload {
            mults: 0,
            iterations: spatial(in_shape),
        },
        // pure rewiring, and the class decision is taken from the logits
        LayerKind::Flatten | LayerKind::Softmax => LayerWorkload {
            mults: 0,
            iterations: 0,
        },
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Resources {
    pub dsp: u64,
    pub lut: u64,
    pub ff: u64,
    pub bram36: u64,
}

impl std::ops::Add for Resources {
    type Output = Resources;

    fn add(self, o: Resources) -> Resources {
        Resources {
            dsp: self.dsp + o.dsp,
            lut: self.lut + o.lut,
            ff: self.ff + o.ff,
            bram36: self.bram36 + o.bram36,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerEstimate {
    pub name: String,
    pub kind: &'static str,
    /// Reuse factor after clamping to `[1, mults]`.
    pub reuse: usize,
    pub multipliers: u64,
    pub resources: Resources,
    pub iteration_cycles: u64,
    pub fill_cycles: u64,
    pub ii_cycles: u64,
}

fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        64 - u64::from((n - 1).leading_zeros())
    }
}

/// Per-layer cycles and resources.
pub fn estimate_layer(
    layer: &LayerSpec,
    in_shape: TensorShape,
    out_shape: TensorShape,
    hw: &LayerHwConfig,
    dsp_lut_threshold: u32,
) -> LayerEstimate {
    let work = layer_workload(layer, in_shape, out_shape);
    let reuse = if work.mults == 0 {
        1
    } else {
        hw.reuse_factor.clamp(1, work.mults as usize)
    };
    let r = reuse as u64;
    let multipliers = work.mults.div_ceil(r);

    let mut res = Resources::default();
    if let Some(w) = hw.weight {
        let operand_bits = w.total_bits() + hw.act.total_bits();
        if operand_bits > dsp_lut_threshold {
            res.dsp = multipliers;
        } else {
            let per_mult = u64::from(w.total_bits() * hw.act.total_bits()).div_ceil(2);
            res.lut += multipliers * per_mult;
        }
    }

    let w_in = in_shape.width as u64;
    let fill_cycles = match layer.kind {
        LayerKind::Conv2d {
            kernel,
            out_channels,
            bias,
        } => {
            let k = kernel as u64;
            let c_in = in_shape.channels as u64;
            let ctrl = 40 * k * c_in + 8 * w_in;
            res.lut += ctrl;
            res.ff += 2 * ctrl;
            let weight_bits = (out_channels as u64) * (c_in * k * k + u64::from(bias)) * weight_bits(hw);
            let row_bits = w_in * c_in * u64::from(hw.act.total_bits());
            res.bram36 += weight_bits.div_ceil(BRAM36_BITS) + k * row_bits.div_ceil(BRAM36_BITS);
            k * w_in + k
        }
        LayerKind::Dense { out_features, bias } => {
            res.lut += DENSE_CTRL_LUTS;
            res.ff += 2 * DENSE_CTRL_LUTS;
            let params = (out_features * (in_shape.len() + usize::from(bias))) as u64;
            res.bram36 += (params * weight_bits(hw)).div_ceil(BRAM36_BITS);
            ceil_log2(in_shape.len() as u64) + 3
        }
        LayerKind::MaxPool { .. } => w_in,
        LayerKind::Relu => 1,
        LayerKind::Flatten | LayerKind::Softmax => 0,
    };

    LayerEstimate {
        name: layer.name.clone(),
        kind: layer.kind.tag(),
        reuse,
        multipliers,
        resources: res,
        iteration_cycles: work.iterations * r,
        fill_cycles,
        ii_cycles: r,
    }
}

fn weight_bits(hw: &LayerHwConfig) -> u64 {
    hw.weight.map_or(0, |w| u64::from(w.total_bits()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Utilization {
    pub dsp: f64,
    pub lut: f64,
    pub ff: f64,
    pub bram36: f64,
}

impl Utilization {
    pub fn of(r: &Resources, d: &DeviceBudget) -> Self {
        Self {
            dsp: r.dsp as f64 / d.dsp as f64,
            lut: r.lut as f64 / d.lut as f64,
            ff: r.ff as f64 / d.ff as f64,
            bram36: r.bram36 as f64 / d.bram36 as f64,
        }
    }

    pub fn get(&self, kind: ResourceKind) -> f64 {
        match kind {
            ResourceKind::Dsp => self.dsp,
            ResourceKind::Lut => self.lut,
            ResourceKind::Ff => self.ff,
            ResourceKind::Bram36 => self.bram36,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ResourceKind {
    Dsp,
    Lut,
    Ff,
    Bram36,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 4] = [
        ResourceKind::Dsp,
        ResourceKind::Lut,
        ResourceKind::Ff,
        ResourceKind::Bram36,
    ];
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResourceKind::Dsp => "dsp",
            ResourceKind::Lut => "lut",
            ResourceKind::Ff => "ff",
            ResourceKind::Bram36 => "bram36",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResourceLatencyEstimate {
    pub layers: Vec<LayerEstimate>,
    pub totals: Resources,
    pub total_multipliers: u64,
    /// Uncalibrated: bottleneck iteration cycles plus all fills.
    pub raw_cycles: u64,
    pub latency_cycles: f64,
    pub latency_us: f64,
    /// Throughput-limiting initiation interval.
    pub ii_cycles: u64,
    pub clock_mhz: f64,
    pub utilization: Utilization,
    pub notes: Vec<String>,
}

impl ResourceLatencyEstimate {
    pub fn layer(&self, name: &str) -> Option<&LayerEstimate> {
        self.layers.iter().find(|l| l.name == name)
    }
}

pub const NETWORK_ONLY_NOTE: &str =
    "budget covers the network only; camera/frame-grabber IP is not included";

pub fn estimate_network(
    config: &ModelConfig,
    qplan: &QuantPlan,
    hw: &HwPlan,
    device: &DeviceBudget,
) -> Result<ResourceLatencyEstimate> {
    if hw.clock_mhz.is_nan() || hw.clock_mhz <= 0.0 {
        return Err(Error::InvalidArgument("clock_mhz must be positive".into()));
    }
    let layers = (0..config.layers.len())
        .map(|i| {
            let cfg = hw.layer_config(config, qplan, i)?;
            Ok(estimate_layer(
                &config.layers[i],
                config.input_shape_of(i),
                config.output_shapes()[i],
                &cfg,
                hw.dsp_lut_threshold,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let totals = layers
        .iter()
        .fold(Resources::default(), |acc, l| acc + l.resources);
    let ii_cycles = layers.iter().map(|l| l.iteration_cycles).max().unwrap_or(0);
    let fills: u64 = layers.iter().map(|l| l.fill_cycles).sum();
    let raw_cycles = ii_cycles + fills;
    let latency_cycles = raw_cycles as f64 * hw.calibration;

    let mut notes = vec![NETWORK_ONLY_NOTE.to_string()];
    if hw.clock_mhz > device.max_clock_mhz {
        notes.push(format!(
            "clock {} MHz exceeds device maximum {} MHz",
            hw.clock_mhz, device.max_clock_mhz
        ));
    }

    Ok(ResourceLatencyEstimate {
        total_multipliers: layers.iter().map(|l| l.multipliers).sum(),
        utilization: Utilization::of(&totals, device),
        totals,
        raw_cycles,
        latency_cycles,
        latency_us: latency_cycles / hw.clock_mhz,
        ii_cycles,
        clock_mhz: hw.clock_mhz,
        layers,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub reuse: usize,
    pub latency_us: f64,
    pub utilization: Utilization,
}

/// Evaluates a uniform reuse factor per point; points are returned sorted
/// by R with duplicates removed.
pub fn pareto_sweep(
    config: &ModelConfig,
    qplan: &QuantPlan,
    reuse_set: &[usize],
    clock_mhz: f64,
    device: &DeviceBudget,
    exec: Exec,
) -> Result<Vec<ParetoPoint>> {
    if reuse_set.is_empty() {
        return Err(Error::InvalidArgument("empty reuse set".into()));
    }
    if reuse_set.contains(&0) {
        return Err(Error::InvalidArgument("reuse factors must be >= 1".into()));
    }
    let mut rs = reuse_set.to_vec();
    rs.sort_unstable();
    rs.dedup();
    exec.try_map(&rs, |&r| {
        let est = estimate_network(config, qplan, &HwPlan::uniform(config, r, clock_mhz), device)?;
        Ok(ParetoPoint {
            reuse: r,
            latency_us: est.latency_us,
            utilization: est.utilization,
        })
    })
}

/// Powers of two from 2 to 1024.
pub fn default_reuse_set() -> Vec<usize> {
    (1..=10).map(|p| 1usize << p).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub utilization: Utilization,
    pub pass: bool,
    pub limiting: ResourceKind,
    pub notes: Vec<String>,
}

pub fn check_budget(estimate: &ResourceLatencyEstimate, device: &DeviceBudget) -> FeasibilityReport {
    let utilization = Utilization::of(&estimate.totals, device);
    let mut limiting = ResourceKind::Dsp;
    for kind in ResourceKind::ALL {
        if utilization.get(kind) > utilization.get(limiting) {
            limiting = kind;
        }
    }
    FeasibilityReport {
        pass: ResourceKind::ALL.iter().all(|&k| utilization.get(k) <= 1.0),
        utilization,
        limiting,
        notes: estimate.notes.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MulticlassDelta {
    pub layer: String,
    pub old_classes: usize,
    pub new_classes: usize,
    pub old_params: usize,
    pub new_params: usize,
    pub added_params: usize,
    pub old_mults: u64,
    pub new_mults: u64,
    pub added_mults: u64,
    pub param_factor: f64,
    pub mult_factor: f64,
}

/// Growth of the final dense layer when widening the classifier head.
pub fn multiclass_scaling(config: &ModelConfig, new_num_classes: usize) -> Result<MulticlassDelta> {
    if new_num_classes < 2 {
        return Err(Error::InvalidArgument("new_num_classes must be >= 2".into()));
    }
    let index = config
        .layers
        .iter()
        .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
        .ok_or_else(|| Error::InvalidArgument("model has no dense layer".into()))?;

    let mut layers = config.layers.clone();
    if let LayerKind::Dense { out_features, .. } = &mut layers[index].kind {
        *out_features = new_num_classes;
    }
    let widened = ModelConfig::new(
        config.name.clone(),
        config.input_shape,
        layers,
        new_num_classes,
    )?;

    let mults = |c: &ModelConfig| {
        layer_workload(&c.layers[index], c.input_shape_of(index), c.output_shapes()[index]).mults
    };
    let old_params = config.layer_param_count(index);
    let new_params = widened.layer_param_count(index);
    let (old_mults, new_mults) = (mults(config), mults(&widened));
    Ok(MulticlassDelta {
        layer: config.layers[index].name.clone(),
        old_classes: config.num_classes,
        new_classes: new_num_classes,
        old_params,
        new_params,
        added_params: new_params.saturating_sub(old_params),
        old_mults,
        new_mults,
        added_mults: new_mults.saturating_sub(old_mults),
        param_factor: new_params as f64 / old_params as f64,
        mult_factor: new_mults as f64 / old_mults as f64,
    })
}
