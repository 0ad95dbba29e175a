//! `sortpipe` command-line front end.
//!
//! [`run`] parses an argument vector and returns the exit code together with
//! everything the command printed, so tests can drive the CLI in-process.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sortpipe_core::calib::{
    bins_csv, calibration_report, load_prediction_log, rejection_csv, rejection_sweep, PredictionLog,
    DEFAULT_BINS, DEFAULT_THRESHOLDS,
};
use sortpipe_core::hw::{
    check_budget, default_reuse_set, estimate_network, parse_device, parse_hw_plan, pareto_sweep,
    DeviceBudget, HwPlan, ResourceKind, DEFAULT_CLOCK_MHZ,
};
use sortpipe_core::model::{
    argmax, forward_float, image_to_bytes, load_weights, param_count, parse_image, parse_model_config,
    softmax,
};
use sortpipe_core::pipeline::{
    compare_platforms, parse_stages, render_trace, simulate_stream, sorting_feasibility, throughput,
    total_latency, waveform_csv, PipelineStages, SortingContext, COMPARATOR_OVERHEAD_US,
    DEFAULT_ACTUATION_WINDOW_US,
};
use sortpipe_core::quant::{
    agreement_rate, forward_fixed, parse_quant_plan, quantize_weights, QuantFormat, QuantPlan,
    DEFAULT_ACC_HEADROOM,
};
use sortpipe_core::report::sig6;
use sortpipe_core::synth::{balanced_weights, calibrated_log, random_images, random_log, scale_log};
use sortpipe_core::{Error, Exec, ModelConfig, WeightSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;

/// Environment variable naming a directory of `<name>.json` device files.
pub const DEVICE_DIR_ENV: &str = "SORTPIPE_DEVICE_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Parser)]
#[command(name = "sortpipe", version, about = "Fixed-point inference, FPGA estimates and sorting-pipeline analytics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter count and per-layer shapes
    Describe {
        #[command(flatten)]
        model: ModelArg,
        /// Also print the parameter ratio against a model of this size
        #[arg(long)]
        teacher_params: Option<u64>,
    },
    /// Logits for one image, float path or fixed-point with --quant/--format
    Infer {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        quant: QuantArg,
    },
    /// Argmax agreement between the fixed-point and float paths
    QuantEval {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        quant: QuantArg,
        /// Directory of raw image files; without it, seeded random images are used
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Resource and latency estimate under a hardware plan
    Estimate {
        #[command(flatten)]
        model: ModelArg,
        /// Hardware plan JSON (default: bundled reference plan)
        #[arg(long)]
        hw: Option<PathBuf>,
        #[command(flatten)]
        quant: QuantArg,
        #[command(flatten)]
        device: DeviceArg,
    },
    /// Uniform reuse-factor sweep
    Pareto {
        #[command(flatten)]
        model: ModelArg,
        #[command(flatten)]
        quant: QuantArg,
        #[command(flatten)]
        device: DeviceArg,
        /// Comma-separated reuse factors (default 2,4,...,1024)
        #[arg(long, value_delimiter = ',')]
        reuse: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_CLOCK_MHZ)]
        clock_mhz: f64,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        exec: ExecArg,
    },
    /// Per-frame event times for a periodic trigger stream
    Simulate {
        #[command(flatten)]
        stages: StagesArg,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        #[arg(long)]
        period_us: Option<f64>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Inference-busy square wave for a periodic trigger stream
    Trace {
        #[command(flatten)]
        stages: StagesArg,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 20.0)]
        period_us: f64,
        #[command(flatten)]
        out: OutArg,
    },
    /// Speedup of the fastest platform over the others
    Compare {
        /// name=microseconds, repeatable
        #[arg(long = "latency", value_parser = parse_latency, required = true)]
        latencies: Vec<(String, f64)>,
    },
    /// Whether the pipeline fits the actuation window
    Feasible {
        #[command(flatten)]
        stages: StagesArg,
        #[arg(long, default_value_t = DEFAULT_ACTUATION_WINDOW_US)]
        window_us: f64,
        #[arg(long)]
        transit_us: Option<f64>,
        #[arg(long, default_value_t = COMPARATOR_OVERHEAD_US)]
        overhead_us: f64,
    },
    /// Reliability bins, ECE/MCE and optional temperature fit
    Calibrate {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
        #[arg(long)]
        fit_temperature: bool,
        #[command(flatten)]
        out: OutArg,
    },
    /// Coverage and accepted accuracy per confidence threshold
    Reject {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        exec: ExecArg,
    },
    /// Seeded synthetic weights, images or prediction logs
    #[command(subcommand)]
    Synth(Synth),
}

#[derive(Subcommand)]
enum Synth {
    /// Glorot weights with a class-balanced head
    Weights {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Raw images with pixels uniform in [-1, 1)
    Images {
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Prediction log; labels drawn from softmax(logits) unless --random
    Log {
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Multiply every logit after sampling labels
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Uniform labels with clean/shift tags
        #[arg(long)]
        random: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ModelArg {
    /// Model config JSON (default: bundled reference student)
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct QuantArg {
    /// Quant plan JSON
    #[arg(long, conflicts_with = "format")]
    quant: Option<PathBuf>,
    /// Uniform TOTAL,INT format for weights and activations
    #[arg(long, value_parser = parse_format)]
    format: Option<QuantFormat>,
    #[arg(long, default_value_t = DEFAULT_ACC_HEADROOM, requires = "format")]
    headroom: u32,
}

#[derive(Args)]
struct DeviceArg {
    /// Device JSON path, or a name looked up in $SORTPIPE_DEVICE_DIR
    #[arg(long, default_value = "ku035")]
    device: String,
}

#[derive(Args)]
struct StagesArg {
    /// Stages JSON (default: bundled reference timing)
    #[arg(long)]
    stages: Option<PathBuf>,
}

#[derive(Args)]
struct OutArg {
    /// Write CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExecArg {
    /// Run batch loops on one thread
    #[arg(long)]
    sequential: bool,
}

impl ExecArg {
    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::default()
        }
    }
}

fn parse_latency(s: &str) -> Result<(String, f64), String> {
    let (name, v) = s.split_once('=').ok_or("expected name=microseconds")?;
    let v: f64 = v.trim().parse().map_err(|e| format!("bad latency `{v}`: {e}"))?;
    Ok((name.trim().to_string(), v))
}

fn parse_format(s: &str) -> Result<QuantFormat, String> {
    let (t, i) = s.split_once(',').ok_or("expected TOTAL,INT")?;
    let t = t.trim().parse().map_err(|e| format!("{e}"))?;
    let i = i.trim().parse().map_err(|e| format!("{e}"))?;
    QuantFormat::new(t, i).map_err(|e| e.to_string())
}

struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::RateExceedsCapacity { .. } => EXIT_INFEASIBLE,
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INPUT,
        message: message.into(),
    }
}

type Outcome = Result<(i32, String), Failure>;

/// Parses `argv` (program name first) and executes the command.
pub fn run<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                CommandResult {
                    code: EXIT_INPUT,
                    stdout: String::new(),
                    stderr: text,
                }
            } else {
                CommandResult {
                    code: EXIT_OK,
                    stdout: text,
                    stderr: String::new(),
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok((code, stdout)) => CommandResult {
            code,
            stdout,
            stderr: String::new(),
        },
        Err(f) => CommandResult {
            code: f.code,
            stdout: String::new(),
            stderr: format!("error: {}\n", f.message),
        },
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| input_error(format!("{}: {e}", path.display())))
}

fn load_model(arg: &ModelArg) -> Result<ModelConfig, Failure> {
    match &arg.model {
        Some(p) => Ok(parse_model_config(&read_text(p)?)?),
        None => Ok(ModelConfig::reference()),
    }
}

fn load_plan(arg: &QuantArg, config: &ModelConfig) -> Result<Option<QuantPlan>, Failure> {
    let plan = match (&arg.quant, arg.format) {
        (Some(p), _) => parse_quant_plan(&read_text(p)?)?,
        (None, Some(f)) => QuantPlan::uniform(config, f, f, arg.headroom),
        (None, None) => return Ok(None),
    };
    plan.validate(config)?;
    Ok(Some(plan))
}

fn load_stages(arg: &StagesArg) -> Result<PipelineStages, Failure> {
    match &arg.stages {
        Some(p) => Ok(parse_stages(&read_text(p)?)?),
        None => Ok(PipelineStages::reference()),
    }
}

fn load_log(path: &Path) -> Result<PredictionLog, Failure> {
    let file = fs::File::open(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    Ok(load_prediction_log(file)?)
}

/// A path that exists wins; otherwise `<name>.json` under
/// [`DEVICE_DIR_ENV`]; otherwise the bundled `ku035`.
fn load_device(arg: &DeviceArg) -> Result<DeviceBudget, Failure> {
    let direct = Path::new(&arg.device);
    if direct.is_file() {
        return Ok(parse_device(&read_text(direct)?)?);
    }
    if let Some(dir) = std::env::var_os(DEVICE_DIR_ENV) {
        let candidate = Path::new(&dir).join(format!("{}.json", arg.device));
        if candidate.is_file() {
            return Ok(parse_device(&read_text(&candidate)?)?);
        }
    }
    if arg.device.eq_ignore_ascii_case("ku035") {
        return Ok(DeviceBudget::ku035());
    }
    Err(input_error(format!("device `{}` not found", arg.device)))
}

fn emit(out: &OutArg, csv: String, rows: usize) -> Outcome {
    match &out.out {
        Some(p) => {
            write_file(p, csv.as_bytes())?;
            Ok((EXIT_OK, format!("wrote {rows} rows to {}\n", p.display())))
        }
        None => Ok((EXIT_OK, csv)),
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| sig6(*v)).collect::<Vec<_>>().join(",")
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Describe {
            model,
            teacher_params,
        } => describe(&load_model(&model)?, teacher_params),
        Command::Infer {
            model,
            weights,
            image,
            quant,
        } => {
            let cfg = load_model(&model)?;
            let w = load_weights(&cfg, &read_bytes(&weights)?)?;
            let img = parse_image(cfg.input_shape, &read_bytes(&image)?)?;
            let (path, logits) = match load_plan(&quant, &cfg)? {
                Some(plan) => {
                    let qw = quantize_weights(&cfg, &w, &plan)?;
                    ("fixed", forward_fixed(&cfg, &qw, &img, &plan)?)
                }
                None => (
                    "float",
                    forward_float(&cfg, &w, &img)?
                        .into_iter()
                        .map(f64::from)
                        .collect(),
                ),
            };
            let probs = softmax(&logits);
            Ok((
                EXIT_OK,
                format!(
                    "path: {path}\nlogits: {}\nprobs: {}\nclass: {}\n",
                    join(&logits),
                    join(&probs),
                    argmax(&logits)
                ),
            ))
        }
        Command::QuantEval {
            model,
            weights,
            quant,
            inputs,
            count,
            seed,
        } => {
            let cfg = load_model(&model)?;
            let w = load_weights(&cfg, &read_bytes(&weights)?)?;
            let plan = load_plan(&quant, &cfg)?
                .ok_or_else(|| input_error("quant-eval needs --quant or --format"))?;
            let images = match inputs {
                Some(dir) => read_image_dir(&cfg, &dir)?,
                None => random_images(cfg.input_shape, count, seed),
            };
            let rate = agreement_rate(&cfg, &w, &plan, &images, Exec::default())?;
            Ok((
                EXIT_OK,
                format!("inputs: {}\nagreement: {}\n", images.len(), sig6(rate)),
            ))
        }
        Command::Estimate {
            model,
            hw,
            quant,
            device,
        } => {
            let cfg = load_model(&model)?;
            let plan = load_plan(&quant, &cfg)?.unwrap_or_else(|| QuantPlan::reference(&cfg));
            let hw = match hw {
                Some(p) => parse_hw_plan(&read_text(&p)?)?,
                None => HwPlan::reference(),
            };
            let dev = load_device(&device)?;
            estimate(&cfg, &plan, &hw, &dev)
        }
        Command::Pareto {
            model,
            quant,
            device,
            reuse,
            clock_mhz,
            out,
            exec,
        } => {
            let cfg = load_model(&model)?;
            let plan = load_plan(&quant, &cfg)?.unwrap_or_else(|| QuantPlan::reference(&cfg));
            let dev = load_device(&device)?;
            let reuse = if reuse.is_empty() {
                default_reuse_set()
            } else {
                reuse
            };
            let points = pareto_sweep(&cfg, &plan, &reuse, clock_mhz, &dev, exec.exec())?;
            let mut csv = String::from("reuse,latency_us,dsp_util,lut_util,ff_util,bram_util\n");
            for p in &points {
                let u = &p.utilization;
                writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    p.reuse,
                    sig6(p.latency_us),
                    sig6(u.dsp),
                    sig6(u.lut),
                    sig6(u.ff),
                    sig6(u.bram36)
                )
                .unwrap();
            }
            emit(&out, csv, points.len())
        }
        Command::Simulate {
            stages,
            frames,
            period_us,
            out,
        } => {
            let s = load_stages(&stages)?;
            let period = match period_us {
                Some(p) => p,
                None => 1e6 / throughput(&s)?,
            };
            let trace = simulate_stream(&s, frames, period)?;
            let csv = trace.to_csv();
            let rows = csv.lines().count() - 1;
            emit(&out, csv, rows)
        }
        Command::Trace {
            stages,
            frames,
            period_us,
            out,
        } => {
            let s = load_stages(&stages)?;
            let wave = render_trace(&simulate_stream(&s, frames, period_us)?);
            emit(&out, waveform_csv(&wave), wave.len())
        }
        Command::Compare { latencies } => {
            let rows = compare_platforms(&latencies)?;
            let mut text = String::from("platform,latency_us,speedup\n");
            for r in rows {
                writeln!(text, "{},{},{}×", r.name, sig6(r.latency_us), r.display).unwrap();
            }
            Ok((EXIT_OK, text))
        }
        Command::Feasible {
            stages,
            window_us,
            transit_us,
            overhead_us,
        } => {
            let s = load_stages(&stages)?;
            let ctx = SortingContext {
                actuation_window_us: window_us,
                cell_transit_us: transit_us,
                frame_rate_fps: None,
            };
            let v = sorting_feasibility(total_latency(&s), &ctx, overhead_us)?;
            let mut text = format!(
                "required_us: {}\nbudget_us: {}\nmargin_us: {}\n",
                sig6(v.required_us),
                sig6(v.budget_us),
                sig6(v.margin_us())
            );
            text.push_str(if v.pass { "verdict: pass\n" } else { "verdict: fail\n" });
            Ok((if v.pass { EXIT_OK } else { EXIT_INFEASIBLE }, text))
        }
        Command::Calibrate {
            log,
            bins,
            fit_temperature,
            out,
        } => {
            let log = load_log(&log)?;
            let (b, report) = calibration_report(&log, bins, fit_temperature)?;
            let mut csv = bins_csv(&b);
            csv.push_str("ece,mce,temperature\n");
            writeln!(
                csv,
                "{},{},{}",
                sig6(report.ece),
                sig6(report.mce),
                report.temperature.map_or_else(|| "NA".to_string(), sig6)
            )
            .unwrap();
            emit(&out, csv, b.len() + 1)
        }
        Command::Reject {
            log,
            thresholds,
            out,
            exec,
        } => {
            let log = load_log(&log)?;
            let thresholds = if thresholds.is_empty() {
                DEFAULT_THRESHOLDS.to_vec()
            } else {
                thresholds
            };
            let rows = rejection_sweep(&log, &thresholds, exec.exec())?;
            let csv = rejection_csv(&rows, log.has_conditions());
            let n = csv.lines().count() - 1;
            emit(&out, csv, n)
        }
        Command::Synth(s) => synth(s),
    }
}

fn describe(cfg: &ModelConfig, teacher_params: Option<u64>) -> Outcome {
    let params = param_count(cfg);
    let mut text = format!(
        "model: {}\ninput: {}\nparams: {params}\ncompute layers: {}\n",
        cfg.name,
        cfg.input_shape,
        cfg.compute_layer_count()
    );
    if let Some(t) = teacher_params {
        if t == 0 {
            return Err(input_error("--teacher-params must be positive"));
        }
        writeln!(text, "ratio_percent: {}", sig6(100.0 * params as f64 / t as f64)).unwrap();
    }
    text.push_str("layer,kind,output,params\n");
    for (i, (layer, shape)) in cfg.layers.iter().zip(cfg.output_shapes()).enumerate() {
        writeln!(
            text,
            "{},{},{shape},{}",
            layer.name,
            layer.kind.tag(),
            cfg.layer_param_count(i)
        )
        .unwrap();
    }
    Ok((EXIT_OK, text))
}

fn estimate(cfg: &ModelConfig, plan: &QuantPlan, hw: &HwPlan, dev: &DeviceBudget) -> Outcome {
    let est = estimate_network(cfg, plan, hw, dev)?;
    let report = check_budget(&est, dev);
    let mut text = String::from("layer,kind,reuse,multipliers,dsp,lut,ff,bram36,cycles,fill\n");
    for l in &est.layers {
        let r = &l.resources;
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{}",
            l.name, l.kind, l.reuse, l.multipliers, r.dsp, r.lut, r.ff, r.bram36, l.iteration_cycles, l.fill_cycles
        )
        .unwrap();
    }
    let t = &est.totals;
    writeln!(text, "total,,,{},{},{},{},{},{},", est.total_multipliers, t.dsp, t.lut, t.ff, t.bram36, est.raw_cycles)
        .unwrap();
    writeln!(text, "device: {}", dev.name).unwrap();
    writeln!(text, "clock_mhz: {}", sig6(est.clock_mhz)).unwrap();
    writeln!(text, "latency_cycles: {}", sig6(est.latency_cycles)).unwrap();
    writeln!(text, "latency_us: {}", sig6(est.latency_us)).unwrap();
    for kind in ResourceKind::ALL {
        writeln!(text, "{kind}_util: {}", sig6(report.utilization.get(kind))).unwrap();
    }
    writeln!(text, "limiting: {}", report.limiting).unwrap();
    for n in &report.notes {
        writeln!(text, "note: {n}").unwrap();
    }
    text.push_str(if report.pass { "budget: pass\n" } else { "budget: fail\n" });
    Ok((if report.pass { EXIT_OK } else { EXIT_INFEASIBLE }, text))
}

fn read_image_dir(cfg: &ModelConfig, dir: &Path) -> Result<Vec<Vec<f32>>, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| input_error(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(parse_image(cfg.input_shape, &read_bytes(p)?)?))
        .collect()
}

fn synth(cmd: Synth) -> Outcome {
    match cmd {
        Synth::Weights { model, seed, out } => {
            let cfg = load_model(&model)?;
            let w: WeightSet = balanced_weights(&cfg, seed)?;
            write_file(&out, &w.to_bytes())?;
            Ok((EXIT_OK, format!("wrote {} params to {}\n", w.param_count(), out.display())))
        }
        Synth::Images {
            model,
            count,
            seed,
            out,
        } => {
            let cfg = load_model(&model)?;
            fs::create_dir_all(&out).map_err(|e| input_error(format!("{}: {e}", out.display())))?;
            for (i, img) in random_images(cfg.input_shape, count, seed).iter().enumerate() {
                write_file(&out.join(format!("img_{i:05}.bin")), &image_to_bytes(img))?;
            }
            Ok((EXIT_OK, format!("wrote {count} images to {}\n", out.display())))
        }
        Synth::Log {
            rows,
            classes,
            scale,
            random,
            seed,
            out,
        } => {
            if classes < 2 {
                return Err(input_error("--classes must be >= 2"));
            }
            let log = if random {
                random_log(rows, classes, true, seed)?
            } else {
                scale_log(&calibrated_log(rows, classes, 4.0, seed)?, scale)?
            };
            write_file(&out, log.to_csv().as_bytes())?;
            Ok((EXIT_OK, format!("wrote {rows} rows to {}\n", out.display())))
        }
    }
}
