use proptest::prelude::*;
use sortpipe_core::hw::*;
use sortpipe_core::model::{LayerKind, ModelConfig};
use sortpipe_core::quant::{QuantFormat, QuantPlan};
use sortpipe_core::Exec;

/// Hand-tabulated reference network: (name, mults, iterations, fill).
const TABLE: [(&str, u64, u64, u64); 12] = [
    ("conv1", 18, 2304, 3 * 48 + 3),
    ("pool1", 0, 2304, 48),
    ("relu1", 0, 576, 1),
    ("conv2", 72, 576, 3 * 24 + 3),
    ("pool2", 0, 576, 24),
    ("relu2", 0, 144, 1),
    ("pool3", 0, 144, 12),
    ("flatten", 0, 0, 0),
    ("fc1", 144 * 38, 1, 8 + 3),
    ("relu3", 0, 1, 1),
    ("fc2", 38 * 2, 1, 6 + 3),
    ("softmax", 0, 0, 0),
];

fn oracle_cycles(reuse: &dyn Fn(&str) -> u64) -> u64 {
    let slowest = TABLE
        .iter()
        .map(|&(name, mults, iters, _)| {
            let r = if mults == 0 { 1 } else { reuse(name).clamp(1, mults) };
            iters * r
        })
        .max()
        .unwrap();
    slowest + TABLE.iter().map(|t| t.3).sum::<u64>()
}

fn reference_estimate() -> ResourceLatencyEstimate {
    let cfg = ModelConfig::reference();
    estimate_network(&cfg, &QuantPlan::reference(&cfg), &HwPlan::reference(), &DeviceBudget::ku035()).unwrap()
}

#[test]
fn reference_plan_matches_table() {
    let est = reference_estimate();
    let want = oracle_cycles(&|name| match name {
        "conv1" => 1,
        "conv2" => 2,
        _ => 25,
    });
    assert_eq!(est.raw_cycles, want);
    assert_eq!(want, 2633);
    assert!((est.latency_us - 2633.0 / 250.0).abs() < 1e-12);
    assert!((7.25..=21.75).contains(&est.latency_us));
}

#[test]
fn reference_resource_split() {
    let est = reference_estimate();
    let l = |n: &str| est.layer(n).unwrap().resources;
    // 8 + 10 operand bits exceed the DSP threshold, so every multiplier is a DSP
    assert_eq!(l("conv1").dsp, 18);
    assert_eq!(l("conv2").dsp, 36);
    assert_eq!(l("fc1").dsp, (144u64 * 38).div_ceil(25));
    assert_eq!(l("fc2").dsp, 76u64.div_ceil(25));
    assert!(l("conv2").dsp > l("conv1").dsp);
    let conv_lut = l("conv1").lut + l("conv2").lut;
    let dense_lut = l("fc1").lut + l("fc2").lut;
    assert!(conv_lut > dense_lut, "{conv_lut} vs {dense_lut}");
    let report = check_budget(&est, &DeviceBudget::ku035());
    assert!(report.pass);
    assert_eq!(report.limiting, ResourceKind::Dsp);
}

#[test]
fn pareto_paths_agree() {
    let cfg = ModelConfig::reference();
    let q = QuantPlan::reference(&cfg);
    let dev = DeviceBudget::ku035();
    let rs = default_reuse_set();
    let a = pareto_sweep(&cfg, &q, &rs, 250.0, &dev, Exec::Sequential).unwrap();
    let b = pareto_sweep(&cfg, &q, &rs, 250.0, &dev, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    for p in &a {
        let want = oracle_cycles(&|_| p.reuse as u64) as f64 / 250.0;
        assert!((p.latency_us - want).abs() < 1e-9, "R={}", p.reuse);
    }
}

#[test]
fn lut_mapping_below_threshold() {
    let cfg = ModelConfig::reference();
    let narrow = QuantFormat::new(4, 2).unwrap();
    let q = QuantPlan::uniform(&cfg, narrow, QuantFormat::new(6, 3).unwrap(), 6);
    let est = estimate_network(&cfg, &q, &HwPlan::uniform(&cfg, 1, 250.0), &DeviceBudget::ku035()).unwrap();
    assert_eq!(est.totals.dsp, 0);
    let conv1 = est.layer("conv1").unwrap();
    assert_eq!(conv1.resources.lut, 18 * 12 + 40 * 3 + 8 * 48);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn multiplier_count_is_ceiling(r in 1usize..6000) {
        let cfg = ModelConfig::reference();
        let est = estimate_network(&cfg, &QuantPlan::reference(&cfg), &HwPlan::uniform(&cfg, r, 250.0), &DeviceBudget::ku035()).unwrap();
        for (i, layer) in cfg.layers.iter().enumerate() {
            if !matches!(layer.kind, LayerKind::Conv2d { .. } | LayerKind::Dense { .. }) {
                continue;
            }
            let mults = TABLE[i].1;
            let m = est.layers[i].multipliers;
            let r_eff = est.layers[i].reuse as u64;
            prop_assert!(r_eff >= 1 && r_eff <= mults);
            // smallest m with m * R >= mults, found by scanning
            let brute = (1..=mults).find(|k| k * r_eff >= mults).unwrap();
            prop_assert_eq!(m, brute);
        }
        prop_assert_eq!(est.raw_cycles, oracle_cycles(&|_| r as u64));
    }

    #[test]
    fn pareto_is_monotone(mut rs in prop::collection::vec(1usize..4096, 2..12), clock in 50.0f64..500.0) {
        let cfg = ModelConfig::reference();
        rs.sort_unstable();
        let pts = pareto_sweep(&cfg, &QuantPlan::reference(&cfg), &rs, clock, &DeviceBudget::ku035(), Exec::default()).unwrap();
        for w in pts.windows(2) {
            prop_assert!(w[0].reuse < w[1].reuse);
            prop_assert!(w[1].latency_us >= w[0].latency_us);
            prop_assert!(w[1].utilization.dsp <= w[0].utilization.dsp);
            prop_assert!(w[1].utilization.lut <= w[0].utilization.lut);
            prop_assert!(w[1].utilization.ff <= w[0].utilization.ff);
            prop_assert!(w[1].utilization.bram36 <= w[0].utilization.bram36);
        }
    }

    #[test]
    fn latency_scales_with_clock_and_calibration(clock in 10.0f64..800.0, cal in 0.5f64..3.0) {
        let cfg = ModelConfig::reference();
        let mut plan = HwPlan::reference();
        plan.clock_mhz = clock;
        plan.calibration = cal;
        let a = estimate_network(&cfg, &QuantPlan::reference(&cfg), &plan, &DeviceBudget::ku035()).unwrap();
        let b = estimate_network(&cfg, &QuantPlan::reference(&cfg), &plan, &DeviceBudget::ku035()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!((a.latency_us - 2633.0 * cal / clock).abs() < 1e-9 * a.latency_us.max(1.0));
        prop_assert_eq!(a.notes.len() > 1, clock > 500.0);
    }
}
