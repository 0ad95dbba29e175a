use proptest::prelude::*;
use sortpipe_core::model::*;
use sortpipe_core::synth::{glorot_weights, random_images};
use sortpipe_core::Error;

fn count_params(layers: &[(usize, usize, bool)]) -> usize {
    layers.iter().map(|&(fan_in, out, bias)| out * (fan_in + usize::from(bias))).sum()
}

#[test]
fn reference_counts() {
    let cfg = ModelConfig::reference();
    let want = count_params(&[(9, 2, true), (18, 4, true), (144, 38, true), (38, 2, false)]);
    assert_eq!(param_count(&cfg), want);
    assert_eq!(want, 5682);
    assert_eq!(cfg.compute_layer_count(), 7);
    assert_eq!(cfg.output_shape(), TensorShape::new(1, 1, 2).unwrap());
    let ratio = want as f64 / 28e6;
    assert!((ratio * 100.0 - 0.0203).abs() < 5e-5, "{ratio}");
}

#[test]
fn weight_file_round_trip() {
    let cfg = ModelConfig::reference();
    let w = glorot_weights(&cfg, 1);
    let bytes = w.to_bytes();
    assert_eq!(bytes.len(), 8 + 4 * 5682);
    assert_eq!(load_weights(&cfg, &bytes).unwrap(), w);

    let mut short = bytes.clone();
    short.truncate(bytes.len() - 4);
    assert!(matches!(load_weights(&cfg, &short), Err(Error::LengthMismatch { .. })));
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(matches!(load_weights(&cfg, &bad), Err(Error::MagicMismatch(_))));
}

#[test]
fn dense_before_flatten_is_rejected() {
    let text = r#"{"name":"bad","input":{"h":4,"w":4,"c":1},"num_classes":2,
        "layers":[{"kind":"dense","out_features":2}]}"#;
    assert!(matches!(parse_model_config(text), Err(Error::DenseBeforeFlatten(_))));
}

/// Random conv/pool/dense stacks described as JSON.
fn arb_config() -> impl Strategy<Value = (String, usize)> {
    (
        1usize..4,
        prop::collection::vec((1usize..5, prop::sample::select(vec![1usize, 3, 5]), any::<bool>(), any::<bool>()), 0..3),
        prop::collection::vec((1usize..20, any::<bool>()), 0..3),
        2usize..5,
        any::<bool>(),
    )
        .prop_map(|(c_in, convs, denses, classes, head_bias)| {
            let side = 16usize;
            let mut layers = Vec::new();
            let (mut h, mut c) = (side, c_in);
            let mut params = 0;
            for (out, k, bias, pool) in convs {
                layers.push(format!(
                    r#"{{"kind":"conv2d","out_channels":{out},"kernel":{k},"padding":"same","stride":1,"bias":{bias}}}"#
                ));
                params += out * (c * k * k + usize::from(bias));
                c = out;
                layers.push(r#"{"kind":"relu"}"#.to_string());
                if pool {
                    layers.push(r#"{"kind":"maxpool","window":2}"#.to_string());
                    h /= 2;
                }
            }
            layers.push(r#"{"kind":"flatten"}"#.to_string());
            let mut n = h * h * c;
            for (out, bias) in denses {
                layers.push(format!(r#"{{"kind":"dense","out_features":{out},"bias":{bias}}}"#));
                params += out * (n + usize::from(bias));
                n = out;
            }
            layers.push(format!(r#"{{"kind":"dense","out_features":{classes},"bias":{head_bias}}}"#));
            params += classes * (n + usize::from(head_bias));
            layers.push(r#"{"kind":"softmax"}"#.to_string());
            let json = format!(
                r#"{{"name":"rand","input":{{"h":{side},"w":{side},"c":{c_in}}},"num_classes":{classes},"layers":[{}]}}"#,
                layers.join(",")
            );
            (json, params)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn param_count_matches_formula((json, params) in arb_config()) {
        let cfg = parse_model_config(&json).unwrap();
        prop_assert_eq!(param_count(&cfg), params);
        let w = WeightSet::zeros(&cfg);
        prop_assert_eq!(w.param_count(), params);
        let logits = forward_float(&cfg, &w, &vec![0.5; cfg.input_shape.len()]).unwrap();
        prop_assert_eq!(logits.len(), cfg.num_classes);
    }

    #[test]
    fn softmax_is_shift_invariant(logits in prop::collection::vec(-50.0f64..50.0, 1..8), shift in -500.0f64..500.0) {
        let a = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let b = softmax(&shifted);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert_eq!(argmax(&a), argmax(&logits));
    }

    #[test]
    fn head_permutation_permutes_logits(seed in any::<u64>()) {
        let cfg = ModelConfig::reference();
        let w = glorot_weights(&cfg, seed);
        let mut swapped = w.clone();
        let head = swapped.layers.last_mut().unwrap();
        let fan_in = head.fan_in;
        let (a, b) = head.kernel.split_at_mut(fan_in);
        a.swap_with_slice(b);
        let image = &random_images(cfg.input_shape, 1, seed)[0];
        let l = forward_float(&cfg, &w, image).unwrap();
        let m = forward_float(&cfg, &swapped, image).unwrap();
        prop_assert_eq!(l[0], m[1]);
        prop_assert_eq!(l[1], m[0]);
    }

    #[test]
    fn float_path_is_deterministic(seed in any::<u64>()) {
        let cfg = ModelConfig::reference();
        let w = glorot_weights(&cfg, seed);
        let image = &random_images(cfg.input_shape, 1, seed ^ 1)[0];
        let bytes = image_to_bytes(image);
        let back = parse_image(cfg.input_shape, &bytes).unwrap();
        prop_assert_eq!(forward_float(&cfg, &w, image).unwrap(), forward_float(&cfg, &w, &back).unwrap());
    }
}
