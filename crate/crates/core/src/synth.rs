//! Seeded synthetic weights, images and prediction logs.
//!
//! Everything here is deterministic in its seed (ChaCha8).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calib::{Condition, PredictionLog, PredictionRow};
use crate::error::{Error, Result};
use crate::model::{
    forward_float, param_count, softmax, LayerKind, ModelConfig, TensorShape, WeightSet,
};

/// Images used to estimate the mean hidden activation in [`balance_head`].
pub const BALANCE_IMAGES: usize = 200;
const BIAS_LIMIT: f32 = 0.1;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Glorot-uniform kernels (unit activation variance) and small uniform
/// biases.
pub fn glorot_weights(config: &ModelConfig, seed: u64) -> WeightSet {
    weights_with(config, seed, |fan_in, fan_out| {
        (6.0 / (fan_in + fan_out) as f64).sqrt() as f32
    })
}

/// Kernels uniform in `[-limit, limit)`, small uniform biases.
pub fn uniform_weights(config: &ModelConfig, seed: u64, limit: f32) -> WeightSet {
    weights_with(config, seed, |_, _| limit)
}

fn weights_with(config: &ModelConfig, seed: u64, limit: impl Fn(usize, usize) -> f32) -> WeightSet {
    let mut rng = rng(seed);
    let mut flat = Vec::with_capacity(param_count(config));
    for (i, layer) in config.layers.iter().enumerate() {
        let input = config.input_shape_of(i);
        let (out, fan_in, fan_out, bias) = match layer.kind {
            LayerKind::Conv2d {
                out_channels,
                kernel,
                bias,
            } => (
                out_channels,
                input.channels * kernel * kernel,
                out_channels * kernel * kernel,
                bias,
            ),
            LayerKind::Dense { out_features, bias } => {
                (out_features, input.len(), out_features, bias)
            }
            _ => continue,
        };
        let lim = limit(fan_in, fan_out);
        flat.extend((0..out * fan_in).map(|_| rng.gen_range(-lim..lim)));
        if bias {
            flat.extend((0..out).map(|_| rng.gen_range(-BIAS_LIMIT..BIAS_LIMIT)));
        }
    }
    WeightSet::from_flat(config, &flat).expect("generated weights match the config")
}

/// Images with pixels uniform in `[-1, 1)`.
pub fn random_images(shape: TensorShape, count: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = rng(seed);
    (0..count)
        .map(|_| (0..shape.len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect()
}

/// Makes the final dense layer orthogonal to the mean activation it sees
/// over `calibration`, so random inputs spread across classes instead of
/// all landing on the class favoured by the common mode. For two classes
/// the rows are also made antisymmetric.
pub fn balance_head(
    config: &ModelConfig,
    weights: &WeightSet,
    calibration: &[Vec<f32>],
) -> Result<WeightSet> {
    let head = config
        .layers
        .iter()
        .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
        .ok_or_else(|| Error::InvalidArgument("model has no dense layer".into()))?;
    if calibration.is_empty() {
        return Err(Error::EmptyInputSet);
    }
    let hidden = config.input_shape_of(head).len();
    let trunk = ModelConfig::new(
        format!("{}-trunk", config.name),
        config.input_shape,
        config.layers[..head].to_vec(),
        hidden,
    )?;
    let flat = weights.to_flat();
    let trunk_weights = WeightSet::from_flat(&trunk, &flat[..param_count(&trunk)])?;

    let mut mean = vec![0.0f64; hidden];
    for image in calibration {
        let h = forward_float(&trunk, &trunk_weights, image)?;
        for (m, v) in mean.iter_mut().zip(h) {
            *m += f64::from(v) / calibration.len() as f64;
        }
    }
    let norm2: f64 = mean.iter().map(|m| m * m).sum();

    let mut out = weights.clone();
    let layer = out
        .layers
        .iter_mut()
        .find(|l| l.layer == head)
        .expect("head layer has weights");
    let fan_in = layer.fan_in;
    if norm2 > 0.0 {
        for row in layer.kernel.chunks_mut(fan_in) {
            let dot: f64 = row.iter().zip(&mean).map(|(w, m)| f64::from(*w) * m).sum();
            for (w, m) in row.iter_mut().zip(&mean) {
                *w = (f64::from(*w) - dot / norm2 * m) as f32;
            }
        }
    }
    if layer.out == 2 {
        let (first, second) = layer.kernel.split_at_mut(fan_in);
        for (a, b) in first.iter().zip(second.iter_mut()) {
            *b = -*a;
        }
        if let Some(bias) = &mut layer.bias {
            bias[1] = -bias[0];
        }
    }
    Ok(out)
}

/// Glorot weights with a balanced head, calibrated on images drawn from
/// `seed + 1`.
pub fn balanced_weights(config: &ModelConfig, seed: u64) -> Result<WeightSet> {
    let w = glorot_weights(config, seed);
    let calibration = random_images(config.input_shape, BALANCE_IMAGES, seed.wrapping_add(1));
    balance_head(config, &w, &calibration)
}

/// A log whose labels are drawn from `softmax(logits)`, so it is calibrated
/// in expectation. Logits are uniform in `[-logit_range, logit_range)`.
pub fn calibrated_log(rows: usize, classes: usize, logit_range: f64, seed: u64) -> Result<PredictionLog> {
    let mut rng = rng(seed);
    let rows = (0..rows)
        .map(|_| {
            let logits: Vec<f64> = (0..classes)
                .map(|_| rng.gen_range(-logit_range..logit_range))
                .collect();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let probs = softmax(&logits);
            let label = probs
                .iter()
                .position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(classes - 1);
            PredictionRow {
                logits,
                label,
                condition: Condition::Unspecified,
            }
        })
        .collect();
    PredictionLog::new(classes, rows)
}

/// Multiplies every logit by `factor`.
pub fn scale_log(log: &PredictionLog, factor: f64) -> Result<PredictionLog> {
    PredictionLog::new(
        log.classes(),
        log.rows()
            .iter()
            .map(|r| PredictionRow {
                logits: r.logits.iter().map(|l| l * factor).collect(),
                ..r.clone()
            })
            .collect(),
    )
}

/// Unstructured log: logits uniform in `[-4, 4)`, uniform labels and, when
/// `tagged`, random clean/shift tags.
pub fn random_log(rows: usize, classes: usize, tagged: bool, seed: u64) -> Result<PredictionLog> {
    let mut rng = rng(seed);
    let rows = (0..rows)
        .map(|_| PredictionRow {
            logits: (0..classes).map(|_| rng.gen_range(-4.0..4.0)).collect(),
            label: rng.gen_range(0..classes),
            condition: if !tagged {
                Condition::Unspecified
            } else if rng.gen_bool(0.5) {
                Condition::Clean
            } else {
                Condition::Shift
            },
        })
        .collect();
    PredictionLog::new(classes, rows)
}
