use proptest::prelude::*;
use sortpipe_core::calib::*;
use sortpipe_core::synth::{calibrated_log, random_log, scale_log};
use sortpipe_core::Exec;

/// Direct enumeration: each bin scans the whole log for members.
mod brute {
    use sortpipe_core::calib::PredictionLog;

    pub fn confidence(logits: &[f64]) -> f64 {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        1.0 / logits.iter().map(|l| (l - m).exp()).sum::<f64>()
    }

    pub fn correct(logits: &[f64], label: usize) -> bool {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        logits.iter().position(|&l| l == m) == Some(label)
    }

    pub struct Bin {
        pub count: usize,
        pub conf: f64,
        pub acc: f64,
    }

    pub fn bins(log: &PredictionLog, n: usize) -> Vec<Bin> {
        (0..n)
            .map(|b| {
                let lo = b as f64 / n as f64;
                let hi = (b + 1) as f64 / n as f64;
                let (mut count, mut conf, mut hits) = (0usize, 0.0f64, 0usize);
                for r in log.rows() {
                    let c = confidence(&r.logits);
                    if c > lo && c <= hi {
                        count += 1;
                        conf += c;
                        hits += usize::from(correct(&r.logits, r.label));
                    }
                }
                if count == 0 {
                    Bin {
                        count,
                        conf: 0.0,
                        acc: 0.0,
                    }
                } else {
                    Bin {
                        count,
                        conf: conf / count as f64,
                        acc: hits as f64 / count as f64,
                    }
                }
            })
            .collect()
    }

    pub fn ece_mce(bins: &[Bin]) -> (f64, f64) {
        let total: usize = bins.iter().map(|b| b.count).sum();
        let mut ece = 0.0;
        let mut mce = 0.0f64;
        for b in bins.iter().filter(|b| b.count > 0) {
            let gap = (b.acc - b.conf).abs();
            ece += (b.count as f64 / total as f64) * gap;
            mce = mce.max(gap);
        }
        (ece, mce)
    }

    /// (coverage, accuracy among accepted)
    pub fn reject(log: &PredictionLog, tau: f64) -> (f64, Option<f64>) {
        let accepted: Vec<_> = log
            .rows()
            .iter()
            .filter(|r| confidence(&r.logits) >= tau)
            .collect();
        let coverage = accepted.len() as f64 / log.len() as f64;
        let acc = (!accepted.is_empty()).then(|| {
            accepted
                .iter()
                .filter(|r| correct(&r.logits, r.label))
                .count() as f64
                / accepted.len() as f64
        });
        (coverage, acc)
    }
}

#[test]
fn brute_force_equivalence_on_seeded_logs() {
    for seed in 0..100u64 {
        let rows = 1 + (seed as usize * 37) % 200;
        let classes = 2 + (seed as usize % 4);
        let log = random_log(rows, classes, seed % 2 == 0, seed).unwrap();

        let bins = reliability_bins(&log, 5).unwrap();
        let want = brute::bins(&log, 5);
        for (got, want) in bins.iter().zip(&want) {
            assert_eq!(got.count, want.count, "seed {seed}");
            assert_eq!(got.mean_confidence, want.conf, "seed {seed}");
            assert_eq!(got.accuracy, want.acc, "seed {seed}");
        }
        let (e, m) = brute::ece_mce(&want);
        assert_eq!(ece(&bins).unwrap(), e, "seed {seed}");
        assert_eq!(mce(&bins).unwrap(), m, "seed {seed}");

        let sweep = rejection_sweep(&log, &DEFAULT_THRESHOLDS, Exec::Parallel).unwrap();
        for row in &sweep {
            let (cov, acc) = brute::reject(&log, row.threshold);
            assert_eq!(row.overall.coverage, cov, "seed {seed}");
            assert_eq!(row.overall.accuracy_accepted, acc, "seed {seed}");
        }
    }
}

#[test]
fn hand_log_matches_oracle() {
    let text = "logit_0,logit_1,label\n2,0,0\n0,1,0\n3,0,0\n0,3,1\n";
    let log = load_prediction_log(text.as_bytes()).unwrap();
    let (e, m) = brute::ece_mce(&brute::bins(&log, 5));
    assert!((e - 0.2363).abs() < 1e-4);
    assert!((m - 0.7311).abs() < 1e-4);
    let bins = reliability_bins(&log, 5).unwrap();
    assert_eq!(ece(&bins).unwrap(), e);
    assert_eq!(mce(&bins).unwrap(), m);
    let row = &rejection_sweep(&log, &[0.9], Exec::Sequential).unwrap()[0];
    assert_eq!(row.overall.coverage, 0.5);
}

#[test]
fn perfectly_calibrated_bins() {
    // two rows with confidence 0.75 in the same bin, one right and one wrong,
    // plus two rows at 0.5 (a coin flip) split the same way
    let l = 3f64.ln();
    let text = format!(
        "logit_0,logit_1,label\n{l},0,0\n{l},0,0\n{l},0,0\n{l},0,1\n0,0,0\n0,0,1\n"
    );
    let log = load_prediction_log(text.as_bytes()).unwrap();
    let bins = reliability_bins(&log, 5).unwrap();
    for b in bins.iter().filter(|b| b.count > 0) {
        assert!(b.gap() < 1e-12, "{b:?}");
    }
    assert!(ece(&bins).unwrap() < 1e-12);
    assert!(mce(&bins).unwrap() < 1e-12);
}

#[test]
fn temperature_recovers_identity_and_scale() {
    let base = calibrated_log(50_000, 2, 4.0, 2024).unwrap();
    let fit = fit_temperature(&base).unwrap();
    assert!((fit.temperature - 1.0).abs() <= 0.05, "{fit:?}");
    assert!(!fit.boundary);

    let scaled = scale_log(&base, 2.0).unwrap();
    let fit = fit_temperature(&scaled).unwrap();
    assert!((fit.temperature - 2.0).abs() <= 0.05, "{fit:?}");
    assert!(fit.nll_after <= fit.nll_before + 1e-9);
}

#[test]
fn all_correct_log_is_a_boundary_solution() {
    let text = "logit_0,logit_1,label\n2,0,0\n0,1,1\n3,0,0\n0,3,1\n";
    let log = load_prediction_log(text.as_bytes()).unwrap();
    let fit = fit_temperature(&log).unwrap();
    assert!(fit.boundary);
    assert_eq!(fit.temperature, T_MIN);
}

fn arb_log() -> impl Strategy<Value = PredictionLog> {
    (2usize..5, 1usize..60, any::<u64>(), any::<bool>())
        .prop_map(|(c, n, seed, tagged)| random_log(n, c, tagged, seed).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ece_bounded_by_mce(log in arb_log(), n_bins in 1usize..12) {
        let bins = reliability_bins(&log, n_bins).unwrap();
        let (e, m) = (ece(&bins).unwrap(), mce(&bins).unwrap());
        prop_assert!(e <= m + 1e-15);
        prop_assert!((0.0..=1.0).contains(&e) && (0.0..=1.0).contains(&m));
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), log.len());
    }

    #[test]
    fn metrics_ignore_row_order(log in arb_log(), rot in 0usize..60) {
        let mut rows = log.rows().to_vec();
        let k = rot % rows.len();
        rows.rotate_left(k);
        rows.reverse();
        let shuffled = PredictionLog::new(log.classes(), rows).unwrap();
        let a = reliability_bins(&log, 5).unwrap();
        let b = reliability_bins(&shuffled, 5).unwrap();
        prop_assert!((ece(&a).unwrap() - ece(&b).unwrap()).abs() < 1e-12);
        prop_assert!((mce(&a).unwrap() - mce(&b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn temperature_preserves_argmax(log in arb_log(), t in 0.01f64..100.0) {
        let scaled = apply_temperature(&log, t).unwrap();
        for (a, b) in log.rows().iter().zip(scaled.rows()) {
            prop_assert_eq!(a.predicted(), b.predicted());
        }
    }

    #[test]
    fn fitted_temperature_never_worse(log in arb_log()) {
        let fit = fit_temperature(&log).unwrap();
        prop_assert!(fit.nll_after <= nll(&log, 1.0).unwrap() + 1e-9);
        prop_assert!((T_MIN..=T_MAX).contains(&fit.temperature));
    }

    #[test]
    fn rejection_invariants(log in arb_log(), mut taus in prop::collection::vec(0.0f64..=1.0, 1..10)) {
        taus.push(0.0);
        taus.sort_by(f64::total_cmp);
        let rows = rejection_sweep(&log, &taus, Exec::Sequential).unwrap();
        prop_assert_eq!(rows[0].overall.coverage, 1.0);
        for w in rows.windows(2) {
            prop_assert!(w[1].overall.coverage <= w[0].overall.coverage);
        }
        for r in &rows {
            let stats = std::iter::once(&r.overall).chain(r.by_condition.iter().map(|(_, s)| s));
            for s in stats {
                if s.coverage > 0.0 {
                    let sum = s.accuracy_accepted.unwrap() + s.false_route_rate.unwrap();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                } else {
                    prop_assert!(s.accuracy_accepted.is_none());
                }
            }
        }
    }

    #[test]
    fn binary_logs_fully_covered_at_half(n in 1usize..100, seed in any::<u64>()) {
        let log = random_log(n, 2, true, seed).unwrap();
        let rows = rejection_sweep(&log, &[0.5], Exec::Sequential).unwrap();
        prop_assert_eq!(rows[0].overall.coverage, 1.0);
    }

    #[test]
    fn comparator_matches_sweep(probs in prop::collection::vec(0.0f64..1.0, 2..6), tau in 0.0f64..=1.0) {
        let d = comparator_decision(&probs, tau);
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(d.accept, max >= tau);
        prop_assert_eq!(probs[d.class], max);
        prop_assert!(probs[..d.class].iter().all(|&p| p < max));
    }
}
