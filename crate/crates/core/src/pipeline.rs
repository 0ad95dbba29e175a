//! Detection-to-trigger timing budget and pipelined frame-stream simulation.
//!
//! Per frame: the camera trigger fires, exposure runs inside the fixed
//! trigger-to-inference offset, inference runs, then the class bits are
//! written out. Frames are issued on a fixed period and may overlap in
//! flight as long as the period covers every stage's initiation interval.

use std::fmt;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::report::{sig, sig6};

pub const STAGES_JSON: &str = include_str!("../data/stages.json");
/// Inference latency / inference II for the default stages
/// (14.5 us latency at 81 kfps).
pub const DEFAULT_INFERENCE_DEPTH: f64 = 1.1745;
pub const DEFAULT_ACTUATION_WINDOW_US: f64 = 1000.0;
/// Upper bound on the confidence comparator's added delay.
pub const COMPARATOR_OVERHEAD_US: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Exposure,
    Readout,
    Inference,
    Writeout,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Exposure, Stage::Readout, Stage::Inference, Stage::Writeout];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Exposure => "exposure",
            Stage::Readout => "readout",
            Stage::Inference => "inference",
            Stage::Writeout => "writeout",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Initiation intervals per stage, in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageIntervals {
    pub exposure: f64,
    pub readout: f64,
    pub inference: f64,
    pub writeout: f64,
}

impl StageIntervals {
    pub fn get(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Exposure => self.exposure,
            Stage::Readout => self.readout,
            Stage::Inference => self.inference,
            Stage::Writeout => self.writeout,
        }
    }

    /// Largest interval and its stage; ties go to the earlier stage.
    pub fn bottleneck(&self) -> (Stage, f64) {
        let mut best = (Stage::Exposure, self.exposure);
        for s in Stage::ALL {
            if self.get(s) > best.1 {
                best = (s, self.get(s));
            }
        }
        best
    }
}

/// Stage durations in microseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineStages {
    pub exposure_us: f64,
    pub trigger_to_inference_us: f64,
    pub inference_us: f64,
    pub writeout_us: f64,
    pub ii_us: StageIntervals,
}

impl PipelineStages {
    /// Builds stages with default intervals: each stage's own latency,
    /// except inference, which is pipelined by [`DEFAULT_INFERENCE_DEPTH`].
    pub fn new(
        exposure_us: f64,
        trigger_to_inference_us: f64,
        inference_us: f64,
        writeout_us: f64,
    ) -> Result<Self> {
        let stages = Self {
            exposure_us,
            trigger_to_inference_us,
            inference_us,
            writeout_us,
            ii_us: StageIntervals {
                exposure: exposure_us,
                readout: trigger_to_inference_us,
                inference: inference_us / DEFAULT_INFERENCE_DEPTH,
                writeout: writeout_us,
            },
        };
        stages.validate()?;
        Ok(stages)
    }

    /// 2.0 us exposure, inference 10.0 us after trigger, 14.5 us inference,
    /// 0.2 us writeout.
    pub fn reference() -> Self {
        parse_stages(STAGES_JSON).expect("bundled stages file is valid")
    }

    pub fn with_intervals(mut self, ii_us: StageIntervals) -> Result<Self> {
        self.ii_us = ii_us;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let durations = [
            ("exposure_us", self.exposure_us),
            ("trigger_to_inference_us", self.trigger_to_inference_us),
            ("inference_us", self.inference_us),
            ("writeout_us", self.writeout_us),
        ];
        for (name, v) in durations {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidStages(format!("{name} must be >= 0, got {v}")));
            }
        }
        for s in Stage::ALL {
            let v = self.ii_us.get(s);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidStages(format!("{s} II must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Inference completion measured from the end of exposure.
    pub fn inference_done_after_exposure_us(&self) -> f64 {
        self.trigger_to_inference_us + self.inference_us - self.exposure_us
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStages {
    exposure_us: f64,
    trigger_to_inference_us: f64,
    inference_us: f64,
    writeout_us: f64,
    #[serde(default)]
    ii_us: RawIntervals,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawIntervals {
    exposure: Option<f64>,
    readout: Option<f64>,
    inference: Option<f64>,
    writeout: Option<f64>,
}

/// Parses a stages document; missing `ii_us` entries take their defaults.
pub fn parse_stages(text: &str) -> Result<PipelineStages> {
    let raw: RawStages = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let base = PipelineStages::new(
        raw.exposure_us,
        raw.trigger_to_inference_us,
        raw.inference_us,
        raw.writeout_us,
    )?;
    let d = base.ii_us;
    base.with_intervals(StageIntervals {
        exposure: raw.ii_us.exposure.unwrap_or(d.exposure),
        readout: raw.ii_us.readout.unwrap_or(d.readout),
        inference: raw.ii_us.inference.unwrap_or(d.inference),
        writeout: raw.ii_us.writeout.unwrap_or(d.writeout),
    })
}

/// Trigger edge to sorting signal. Exposure sits inside the
/// trigger-to-inference offset and adds nothing.
pub fn total_latency(stages: &PipelineStages) -> f64 {
    stages.trigger_to_inference_us + stages.inference_us + stages.writeout_us
}

/// Sustained frames per second: the reciprocal of the largest stage II.
pub fn throughput(stages: &PipelineStages) -> Result<f64> {
    let (stage, ii) = stages.ii_us.bottleneck();
    if ii <= 0.0 {
        return Err(Error::ZeroInitiationInterval(stage.to_string()));
    }
    for s in Stage::ALL {
        if stages.ii_us.get(s) <= 0.0 {
            return Err(Error::ZeroInitiationInterval(s.to_string()));
        }
    }
    Ok(1e6 / ii)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Trigger,
    ExposureEnd,
    InferenceStart,
    InferenceEnd,
    WriteoutEnd,
}

impl Event {
    pub const ALL: [Event; 5] = [
        Event::Trigger,
        Event::ExposureEnd,
        Event::InferenceStart,
        Event::InferenceEnd,
        Event::WriteoutEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Event::Trigger => "trigger",
            Event::ExposureEnd => "exposure_end",
            Event::InferenceStart => "inference_start",
            Event::InferenceEnd => "inference_end",
            Event::WriteoutEnd => "writeout_end",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEvents {
    pub frame: usize,
    pub trigger: f64,
    pub exposure_end: f64,
    pub inference_start: f64,
    pub inference_end: f64,
    pub writeout_end: f64,
}

impl FrameEvents {
    pub fn time(&self, event: Event) -> f64 {
        match event {
            Event::Trigger => self.trigger,
            Event::ExposureEnd => self.exposure_end,
            Event::InferenceStart => self.inference_start,
            Event::InferenceEnd => self.inference_end,
            Event::WriteoutEnd => self.writeout_end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTrace {
    pub frames: Vec<FrameEvents>,
    pub period_us: f64,
}

impl FrameTrace {
    /// `frame,event,time_us`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,event,time_us\n");
        for f in &self.frames {
            for e in Event::ALL {
                out.push_str(&format!("{},{},{}\n", f.frame, e.name(), sig6(f.time(e))));
            }
        }
        out
    }

    /// Inference `[start, end]` per frame.
    pub fn inference_windows(&self) -> Vec<(f64, f64)> {
        self.frames
            .iter()
            .map(|f| (f.inference_start, f.inference_end))
            .collect()
    }

    /// Whether any two consecutive inference windows overlap.
    pub fn inference_overlaps(&self) -> bool {
        self.frames
            .windows(2)
            .any(|w| w[1].inference_start < w[0].inference_end)
    }
}

/// Issues `n_frames` triggers `frame_period_us` apart.
pub fn simulate_stream(
    stages: &PipelineStages,
    n_frames: usize,
    frame_period_us: f64,
) -> Result<FrameTrace> {
    if !frame_period_us.is_finite() || frame_period_us <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "frame period must be positive, got {frame_period_us}"
        )));
    }
    if stages.exposure_us > stages.trigger_to_inference_us {
        return Err(Error::InvalidStages(format!(
            "exposure ({} us) must fit inside the trigger-to-inference offset ({} us)",
            stages.exposure_us, stages.trigger_to_inference_us
        )));
    }
    let (stage, ii) = stages.ii_us.bottleneck();
    if frame_period_us < ii {
        return Err(Error::RateExceedsCapacity {
            stage: stage.to_string(),
            period_us: frame_period_us,
            ii_us: ii,
        });
    }
    let frames = (0..n_frames)
        .map(|k| {
            let trigger = k as f64 * frame_period_us;
            let inference_start = trigger + stages.trigger_to_inference_us;
            let inference_end = inference_start + stages.inference_us;
            FrameEvents {
                frame: k,
                trigger,
                exposure_end: trigger + stages.exposure_us,
                inference_start,
                inference_end,
                writeout_end: inference_end + stages.writeout_us,
            }
        })
        .collect();
    Ok(FrameTrace {
        frames,
        period_us: frame_period_us,
    })
}

/// One sample of a square wave.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveSample {
    pub time_us: f64,
    pub level: u8,
}

/// Square wave that is high while any frame is inferring. Each edge is
/// emitted as a pair of samples at the same timestamp.
pub fn render_trace(trace: &FrameTrace) -> Vec<WaveSample> {
    let Some(first) = trace.frames.first() else {
        return Vec::new();
    };
    // merge overlapping windows; a single TTL line cannot show both
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (s, e) in trace.inference_windows() {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    let mut wave = vec![WaveSample {
        time_us: first.trigger,
        level: 0,
    }];
    for (s, e) in merged {
        wave.extend([
            WaveSample { time_us: s, level: 0 },
            WaveSample { time_us: s, level: 1 },
            WaveSample { time_us: e, level: 1 },
            WaveSample { time_us: e, level: 0 },
        ]);
    }
    let end = trace.frames.last().map_or(first.trigger, |f| f.writeout_end);
    wave.push(WaveSample {
        time_us: end,
        level: 0,
    });
    wave
}

/// `(rise, fall)` pairs of a rendered square wave.
pub fn pulses(wave: &[WaveSample]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut rise = None;
    for pair in wave.windows(2) {
        match (pair[0].level, pair[1].level) {
            (0, 1) => rise = Some(pair[1].time_us),
            (1, 0) => {
                if let Some(r) = rise.take() {
                    out.push((r, pair[1].time_us));
                }
            }
            _ => {}
        }
    }
    out
}

/// `time_us,level`
pub fn waveform_csv(wave: &[WaveSample]) -> String {
    let mut out = String::from("time_us,level\n");
    for s in wave {
        out.push_str(&format!("{},{}\n", sig6(s.time_us), s.level));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub name: String,
    pub latency_us: f64,
    /// Latency relative to the fastest entry.
    pub speedup: f64,
    /// `speedup` rounded to 3 significant figures.
    pub display: String,
    pub floor: u64,
}

/// Speedup of the fastest platform over every entry.
pub fn compare_platforms(entries: &[(String, f64)]) -> Result<Vec<SpeedupRow>> {
    if entries.len() < 2 {
        return Err(Error::InvalidArgument("need at least two latencies".into()));
    }
    if let Some((name, _)) = entries.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::NonPositiveLatency(name.clone()));
    }
    let best = entries.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    Ok(entries
        .iter()
        .map(|(name, v)| {
            let speedup = v / best;
            let display = sig(speedup, 3);
            let display = if display.contains('.') || display.contains('e') {
                display
            } else {
                format!("{display}.0")
            };
            SpeedupRow {
                name: name.clone(),
                latency_us: *v,
                speedup,
                display,
                floor: speedup.floor() as u64,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SortingContext {
    pub actuation_window_us: f64,
    /// `None` means unbounded.
    pub cell_transit_us: Option<f64>,
    pub frame_rate_fps: Option<f64>,
}

impl Default for SortingContext {
    fn default() -> Self {
        Self {
            actuation_window_us: DEFAULT_ACTUATION_WINDOW_US,
            cell_transit_us: None,
            frame_rate_fps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityVerdict {
    pub required_us: f64,
    pub budget_us: f64,
    pub pass: bool,
    pub window_margin_us: f64,
    pub transit_margin_us: Option<f64>,
}

impl FeasibilityVerdict {
    pub fn margin_us(&self) -> f64 {
        self.budget_us - self.required_us
    }
}

pub fn sorting_feasibility(
    total_latency_us: f64,
    ctx: &SortingContext,
    comparator_overhead_us: f64,
) -> Result<FeasibilityVerdict> {
    let checks = [
        ("latency", Some(total_latency_us), true),
        ("comparator overhead", Some(comparator_overhead_us), true),
        ("actuation window", Some(ctx.actuation_window_us), false),
        ("cell transit", ctx.cell_transit_us, false),
    ];
    for (name, v, zero_ok) in checks {
        if let Some(v) = v {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
    }
    let required_us = total_latency_us + comparator_overhead_us;
    let budget_us = ctx
        .cell_transit_us
        .map_or(ctx.actuation_window_us, |t| t.min(ctx.actuation_window_us));
    Ok(FeasibilityVerdict {
        required_us,
        budget_us,
        pass: required_us <= budget_us,
        window_margin_us: ctx.actuation_window_us - required_us,
        transit_margin_us: ctx.cell_transit_us.map(|t| t - required_us),
    })
}
