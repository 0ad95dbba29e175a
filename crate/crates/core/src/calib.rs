//! Calibration metrics, temperature scaling and confidence-threshold
//! rejection over prediction logs.

use std::fmt;
use std::io::Read;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{argmax, softmax};
use crate::report::sig6;

pub const DEFAULT_BINS: usize = 5;
pub const DEFAULT_THRESHOLDS: [f64; 7] = [0.50, 0.70, 0.80, 0.85, 0.90, 0.95, 0.99];
/// Temperature search bracket.
pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;
/// Golden-section stopping width, in `ln T`.
pub const T_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    Clean,
    Shift,
    Unspecified,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Clean, Condition::Shift, Condition::Unspecified];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Shift => "shift",
            Condition::Unspecified => "unspecified",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "clean" => Ok(Condition::Clean),
            "shift" => Ok(Condition::Shift),
            "" | "unspecified" => Ok(Condition::Unspecified),
            other => Err(Error::Schema(format!("unknown condition `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub logits: Vec<f64>,
    pub label: usize,
    pub condition: Condition,
}

impl PredictionRow {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Maximum softmax probability.
    pub fn confidence(&self) -> f64 {
        self.probabilities().into_iter().fold(0.0, f64::max)
    }

    pub fn predicted(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn is_correct(&self) -> bool {
        self.predicted() == self.label
    }
}

/// Logits, labels and condition tags for a fixed number of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionLog {
    classes: usize,
    rows: Vec<PredictionRow>,
}

impl PredictionLog {
    pub fn new(classes: usize, rows: Vec<PredictionRow>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Schema(format!("need at least 2 classes, got {classes}")));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.logits.len() != classes {
                return Err(Error::RaggedRow {
                    row: i,
                    expected: classes,
                    found: r.logits.len(),
                });
            }
            if let Some(c) = r.logits.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonNumericLogit { row: i, column: c });
            }
            if r.label >= classes {
                return Err(Error::LabelOutOfRange {
                    row: i,
                    label: r.label,
                    classes,
                });
            }
        }
        Ok(Self { classes, rows })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_conditions(&self) -> bool {
        self.rows.iter().any(|r| r.condition != Condition::Unspecified)
    }

    /// `logit_0,...,logit_{C-1},label,condition`
    pub fn to_csv(&self) -> String {
        let mut out: Vec<String> = (0..self.classes).map(|i| format!("logit_{i}")).collect();
        out.push("label".into());
        out.push("condition".into());
        let mut text = out.join(",");
        text.push('\n');
        for r in &self.rows {
            for l in &r.logits {
                // shortest round-trip representation
                text.push_str(&format!("{l:?},"));
            }
            text.push_str(&format!("{},{}\n", r.label, r.condition));
        }
        text
    }
}

/// Reads a prediction-log CSV. The header must be exactly
/// `logit_0,...,logit_{C-1},label` optionally followed by `condition`.
pub fn load_prediction_log<R: Read>(reader: R) -> Result<PredictionLog> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::EmptyLog);
    }
    let has_condition = header.last().map(String::as_str) == Some("condition");
    let label_col = header.len() - 1 - usize::from(has_condition);
    if header.get(label_col).map(String::as_str) != Some("label") {
        return Err(Error::Schema("header must end with `label[,condition]`".into()));
    }
    let classes = label_col;
    for (i, name) in header[..classes].iter().enumerate() {
        if *name != format!("logit_{i}") {
            return Err(Error::Schema(format!(
                "header column {i} must be `logit_{i}`, found `{name}`"
            )));
        }
    }
    if classes < 2 {
        return Err(Error::Schema(format!("need at least 2 logit columns, got {classes}")));
    }

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row: i,
                expected: header.len(),
                found: record.len(),
            });
        }
        let logits = (0..classes)
            .map(|c| {
                record[c]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or(Error::NonNumericLogit { row: i, column: c })
            })
            .collect::<Result<Vec<_>>>()?;
        let label: usize = record[label_col]
            .parse()
            .map_err(|_| Error::Schema(format!("row {i}: label must be a class index")))?;
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                row: i,
                label,
                classes,
            });
        }
        let condition = if has_condition {
            record[label_col + 1].parse()?
        } else {
            Condition::Unspecified
        };
        rows.push(PredictionRow {
            logits,
            label,
            condition,
        });
    }
    PredictionLog::new(classes, rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin {
    /// Exclusive lower bound.
    pub lower: f64,
    /// Inclusive upper bound.
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

impl ReliabilityBin {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.mean_confidence).abs()
    }
}

fn bin_edge(i: usize, n: usize) -> f64 {
    i as f64 / n as f64
}

/// Index of the `(lo, hi]` bin holding `conf`.
fn bin_index(conf: f64, n: usize) -> usize {
    let mut idx = ((conf * n as f64).ceil() as usize).clamp(1, n) - 1;
    // settle rounding at the edges against the reported bounds
    while idx + 1 < n && conf > bin_edge(idx + 1, n) {
        idx += 1;
    }
    while idx > 0 && conf <= bin_edge(idx, n) {
        idx -= 1;
    }
    idx
}

/// Equal-width reliability bins over max-softmax confidence, `(lo, hi]`
/// convention. Empty bins are kept with zero statistics.
pub fn reliability_bins(log: &PredictionLog, n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
    }
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut correct = vec![0usize; n_bins];
    for row in log.rows() {
        let conf = row.confidence();
        let b = bin_index(conf, n_bins);
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += usize::from(row.is_correct());
    }
    Ok((0..n_bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                (
                    conf_sum[b] / count[b] as f64,
                    correct[b] as f64 / count[b] as f64,
                )
            };
            ReliabilityBin {
                lower: bin_edge(b, n_bins),
                upper: bin_edge(b + 1, n_bins),
                count: count[b],
                mean_confidence,
                accuracy,
            }
        })
        .collect())
}

/// Expected calibration error: count-weighted mean gap over non-empty bins.
pub fn ece(bins: &[ReliabilityBin]) -> Result<f64> {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return Err(Error::EmptyLog);
    }
    Ok(bins
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / n as f64) * b.gap())
        .sum())
}

/// Maximum calibration error over non-empty bins.
pub fn mce(bins: &[ReliabilityBin]) -> Result<f64> {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(ReliabilityBin::gap)
        .reduce(f64::max)
        .ok_or(Error::EmptyLog)
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(t))
    }
}

/// Mean negative log-likelihood of the labels under `softmax(logits / T)`.
pub fn nll(log: &PredictionLog, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let total: f64 = log
        .rows()
        .iter()
        .map(|r| {
            let max = r.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = r
                .logits
                .iter()
                .map(|l| ((l - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            lse - (r.logits[r.label] - max) / temperature
        })
        .sum();
    Ok(total / log.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    /// The optimum sits on the edge of the search bracket.
    pub boundary: bool,
}

/// NLL-optimal temperature by golden-section search on `ln T` over
/// `[T_MIN, T_MAX]`.
pub fn fit_temperature(log: &PredictionLog) -> Result<TemperatureFit> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let f = |u: f64| nll(log, u.exp());
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (T_MIN.ln(), T_MAX.ln());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > T_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    let mut best_t = ((a + b) / 2.0).exp();
    let mut best = nll(log, best_t)?;
    let mut boundary = false;
    for edge in [T_MIN, T_MAX] {
        if (best_t.ln() - edge.ln()).abs() <= 2.0 * T_TOLERANCE {
            let at_edge = nll(log, edge)?;
            if at_edge <= best {
                best_t = edge;
                best = at_edge;
            }
            boundary = true;
        }
    }
    let nll_before = nll(log, 1.0)?;
    if best > nll_before {
        // unimodal NLL makes this unreachable in exact arithmetic
        best_t = 1.0;
        best = nll_before;
        boundary = false;
    }
    Ok(TemperatureFit {
        temperature: best_t,
        nll_before,
        nll_after: best,
        boundary,
    })
}

/// Divides every logit by `T`.
pub fn apply_temperature(log: &PredictionLog, temperature: f64) -> Result<PredictionLog> {
    check_temperature(temperature)?;
    Ok(PredictionLog {
        classes: log.classes,
        rows: log
            .rows
            .iter()
            .map(|r| PredictionRow {
                logits: r.logits.iter().map(|l| l / temperature).collect(),
                ..r.clone()
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationReport {
    pub ece: f64,
    pub mce: f64,
    pub temperature: Option<f64>,
    pub nll_before: f64,
    pub nll_after: Option<f64>,
    pub boundary: bool,
}

/// Bins plus summary; with `fit`, also the fitted temperature and the NLL
/// it reaches.
pub fn calibration_report(
    log: &PredictionLog,
    n_bins: usize,
    fit: bool,
) -> Result<(Vec<ReliabilityBin>, CalibrationReport)> {
    let bins = reliability_bins(log, n_bins)?;
    let fitted = fit.then(|| fit_temperature(log)).transpose()?;
    let report = CalibrationReport {
        ece: ece(&bins)?,
        mce: mce(&bins)?,
        temperature: fitted.map(|f| f.temperature),
        nll_before: nll(log, 1.0)?,
        nll_after: fitted.map(|f| f.nll_after),
        boundary: fitted.is_some_and(|f| f.boundary),
    };
    Ok((bins, report))
}

/// `bin,lo,hi,count,conf,acc`
pub fn bins_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("bin,lo,hi,count,conf,acc\n");
    for (i, b) in bins.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{},{},{}\n",
            sig6(b.lower),
            sig6(b.upper),
            b.count,
            sig6(b.mean_confidence),
            sig6(b.accuracy)
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectionStats {
    pub total: usize,
    pub accepted: usize,
    pub coverage: f64,
    /// `None` when nothing was accepted.
    pub accuracy_accepted: Option<f64>,
    pub false_route_rate: Option<f64>,
}

impl RejectionStats {
    fn from_counts(total: usize, accepted: usize, correct: usize) -> Self {
        let accuracy_accepted = (accepted > 0).then(|| correct as f64 / accepted as f64);
        Self {
            total,
            accepted,
            coverage: if total == 0 {
                0.0
            } else {
                accepted as f64 / total as f64
            },
            accuracy_accepted,
            false_route_rate: accuracy_accepted.map(|a| 1.0 - a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionRow {
    pub threshold: f64,
    pub overall: RejectionStats,
    /// Only the conditions present in the log, in [`Condition::ALL`] order.
    pub by_condition: Vec<(Condition, RejectionStats)>,
}

/// Accept a row iff its max softmax probability is at least the threshold.
pub fn rejection_sweep(
    log: &PredictionLog,
    thresholds: &[f64],
    exec: Exec,
) -> Result<Vec<RejectionRow>> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside [0, 1]")));
    }
    let scored: Vec<(f64, bool, Condition)> = log
        .rows()
        .iter()
        .map(|r| (r.confidence(), r.is_correct(), r.condition))
        .collect();
    let present: Vec<Condition> = Condition::ALL
        .into_iter()
        .filter(|c| scored.iter().any(|s| s.2 == *c))
        .collect();
    Ok(exec.map(thresholds, |&tau| {
        let stats = |filter: Option<Condition>| {
            let (mut total, mut accepted, mut correct) = (0, 0, 0);
            for &(conf, ok, cond) in &scored {
                if filter.is_some_and(|c| c != cond) {
                    continue;
                }
                total += 1;
                if conf >= tau {
                    accepted += 1;
                    correct += usize::from(ok);
                }
            }
            RejectionStats::from_counts(total, accepted, correct)
        };
        RejectionRow {
            threshold: tau,
            overall: stats(None),
            by_condition: present.iter().map(|&c| (c, stats(Some(c)))).collect(),
        }
    }))
}

/// `threshold,coverage,acc_accepted,false_route[,condition]`; the
/// per-condition rows are emitted only for tagged logs, with `all` for the
/// pooled row. Empty acceptance prints `NA`.
pub fn rejection_csv(rows: &[RejectionRow], with_conditions: bool) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), sig6);
    let line = |t: f64, s: &RejectionStats| {
        format!(
            "{},{},{},{}",
            sig6(t),
            sig6(s.coverage),
            opt(s.accuracy_accepted),
            opt(s.false_route_rate)
        )
    };
    let mut out = String::from("threshold,coverage,acc_accepted,false_route");
    out.push_str(if with_conditions { ",condition\n" } else { "\n" });
    for r in rows {
        if with_conditions {
            out.push_str(&format!("{},all\n", line(r.threshold, &r.overall)));
            for (c, s) in &r.by_condition {
                out.push_str(&format!("{},{c}\n", line(r.threshold, s)));
            }
        } else {
            out.push_str(&line(r.threshold, &r.overall));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub accept: bool,
    pub class: usize,
}

/// Threshold comparator on a probability vector: accept iff the maximum is
/// at least `threshold`; the class is the lowest index attaining it.
pub fn comparator_decision(probs: &[f64], threshold: f64) -> Decision {
    let class = argmax(probs);
    Decision {
        accept: probs.get(class).is_some_and(|&p| p >= threshold),
        class,
    }
}
