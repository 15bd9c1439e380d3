//! Subcommands of the `spiketrack` binary. Parameters resolve as built-in
//! defaults, then an optional TOML file, then explicit flags.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spiketrack::eval::{
    compute_metrics, read_predictions, run_sequence, stack_crops, CropConfig, FrameResult, ModelPredictor, OraclePredictor,
    SearchCrop,
};
use spiketrack::events::{
    generate_synthetic_sequence, read_events, read_ground_truth, window_stream, write_event_file, write_ground_truth,
    EventFormat, GroundTruthBox, MotionSegment, SensorSize, SyntheticConfig, WindowSpec,
};
use spiketrack::gtp::{AggregationMethod, Aggregator, EventImage};
use spiketrack::model::{ModelConfig, SpikeMode, WeightStore};
use spiketrack::profiler::{calibrate_batch_norm, count_flops, energy, energy_timesteps, record_firing, E_AC_PJ, E_MAC_PJ};
use spiketrack::training::{train_toy, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "spiketrack", version, about = "Event aggregation, spike-driven tracking and energy estimates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a moving-square event stream and its annotations.
    Gen(GenArgs),
    /// Aggregate an event stream into per-window event images.
    Aggregate(AggregateArgs),
    /// Track through an event stream from the first annotated frame.
    Track(TrackArgs),
    /// Train the toy model on synthetic sequences.
    TrainToy(TrainArgs),
    /// Estimate inference energy from measured firing rates.
    Energy(EnergyArgs),
    /// Score a results file against annotations.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML file with parameters for this command.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Event file to write (`.csv`, or packed binary otherwise).
    #[arg(long)]
    pub out: PathBuf,
    /// Annotation CSV; defaults to `<out stem>_gt.csv`.
    #[arg(long)]
    pub gt_out: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<u16>,
    #[arg(long)]
    pub height: Option<u16>,
    #[arg(long)]
    pub object_size: Option<f64>,
    /// Constant velocity in pixels per frame over the whole sequence.
    #[arg(long, allow_hyphen_values = true)]
    pub vx: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub vy: Option<f64>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    #[arg(long)]
    pub event_rate: Option<f64>,
    #[arg(long)]
    pub window_us: Option<u64>,
    /// Initial centre; defaults to placing the path symmetrically about the
    /// sensor centre whenever the sensor or the motion is given on the
    /// command line.
    #[arg(long)]
    pub start_cx: Option<f64>,
    #[arg(long)]
    pub start_cy: Option<f64>,
}

/// Aggregation settings shared by several commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateParams {
    pub method: AggregationMethod,
    pub alpha: f64,
    pub beta: f64,
    pub window_us: u64,
    pub timesteps: usize,
    pub width: u16,
    pub height: u16,
    pub preview: bool,
}

impl Default for AggregateParams {
    fn default() -> Self {
        Self {
            method: AggregationMethod::Gtp,
            alpha: 30.0,
            beta: 0.8,
            window_us: 10_000,
            timesteps: 1,
            width: 128,
            height: 128,
            preview: false,
        }
    }
}

#[derive(Debug, Args)]
pub struct AggregationFlags {
    #[arg(long)]
    pub method: Option<AggregationMethod>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub window_us: Option<u64>,
    #[arg(long)]
    pub width: Option<u16>,
    #[arg(long)]
    pub height: Option<u16>,
}

impl AggregationFlags {
    fn apply(&self, p: &mut AggregateParams) {
        set(&mut p.method, self.method);
        set(&mut p.alpha, self.alpha);
        set(&mut p.beta, self.beta);
        set(&mut p.window_us, self.window_us);
        set(&mut p.width, self.width);
        set(&mut p.height, self.height);
    }
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub events: PathBuf,
    /// Directory receiving one raw image per window.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub agg: AggregationFlags,
    /// Sub-windows per frame interval.
    #[arg(long = "T")]
    pub timesteps: Option<usize>,
    /// Also write an 8-bit PNG per window.
    #[arg(long)]
    pub preview: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackParams {
    pub aggregate: AggregateParams,
    /// `infer` (binary spike trains) or `train` (integer-coded activations).
    pub mode: String,
    /// Model preset whose crop sizes the oracle uses.
    pub oracle_preset: String,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self {
            aggregate: AggregateParams::default(),
            mode: "infer".into(),
            oracle_preset: "toy".into(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[command(flatten)]
    pub common: Common,
    /// Weight file, or `oracle` to replay the annotations.
    #[arg(long)]
    pub weights: String,
    #[arg(long)]
    pub events: PathBuf,
    /// Annotations; frame 0 initialises the tracker.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub agg: AggregationFlags,
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub model: String,
    pub train: TrainConfig,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            model: "toy".into(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory: weights, JSON-lines report and summary.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub method: Option<AggregationMethod>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_sequences: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyParams {
    pub aggregate: AggregateParams,
    /// Preset used when no weight file is given (weights from `--seed`).
    pub preset: String,
    /// Overrides the model's timestep count.
    pub model_timesteps: Option<usize>,
    pub mode: String,
    /// Fit batch-norm statistics to the profiled input first. Unset means
    /// only for freshly initialised weights.
    pub calibrate: Option<bool>,
    pub e_mac: f64,
    pub e_ac: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        Self {
            aggregate: AggregateParams::default(),
            preset: "tiny".into(),
            model_timesteps: None,
            mode: "infer".into(),
            calibrate: None,
            e_mac: E_MAC_PJ,
            e_ac: E_AC_PJ,
        }
    }
}

#[derive(Debug, Args)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// JSON report; a per-layer CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub agg: AggregationFlags,
    /// Model timesteps T.
    #[arg(long = "T")]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub calibrate: Option<bool>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Summary JSON; printed only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_params<P: DeserializeOwned + Default>(path: Option<&Path>) -> Result<P> {
    match path {
        None => Ok(P::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

/// First 16 hex digits of the SHA-256 of the resolved parameters.
pub fn config_hash<P: Serialize>(params: &P) -> String {
    let bytes = serde_json::to_vec(params).expect("parameters serialise");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn banner<P: Serialize>(out: &mut dyn Write, command: &str, seed: u64, params: &P) -> Result<()> {
    writeln!(out, "spiketrack {command} seed={seed} config={}", config_hash(params))?;
    Ok(())
}

/// Paths this run creates; removed again unless the run completes.
#[derive(Default)]
struct Outputs {
    paths: Vec<PathBuf>,
    done: bool,
}

impl Outputs {
    fn file(&mut self, p: &Path) -> PathBuf {
        self.paths.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn dir(&mut self, p: &Path) -> Result<PathBuf> {
        if !p.exists() {
            fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
            self.paths.push(p.to_path_buf());
        }
        Ok(p.to_path_buf())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for p in self.paths.iter().rev() {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Aggregate(a) => cmd_aggregate(a, out),
        Command::Track(a) => cmd_track(a, out),
        Command::TrainToy(a) => cmd_train_toy(a, out),
        Command::Energy(a) => cmd_energy(a, out),
        Command::Eval(a) => cmd_eval(a, out),
    }
}

fn gt_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_gt.csv"))
}

pub fn cmd_gen(a: GenArgs, out: &mut dyn Write) -> Result<()> {
    let mut p: SyntheticConfig = load_params(a.common.config.as_deref())?;
    p.seed = a.common.seed;
    set(&mut p.frames, a.frames);
    set(&mut p.sensor.width, a.width);
    set(&mut p.sensor.height, a.height);
    if let Some(s) = a.object_size {
        p.object_w = s;
        p.object_h = s;
    }
    if a.vx.is_some() || a.vy.is_some() {
        p.path = vec![MotionSegment {
            frames: p.frames,
            vx: a.vx.unwrap_or(0.0),
            vy: a.vy.unwrap_or(0.0),
        }];
    }
    set(&mut p.noise_rate, a.noise_rate);
    set(&mut p.event_rate, a.event_rate);
    set(&mut p.window_len_us, a.window_us);
    if a.width.is_some() || a.height.is_some() || a.vx.is_some() || a.vy.is_some() {
        let moving = |f: fn(&MotionSegment) -> f64| p.path.iter().map(|s| f(s) * s.frames as f64).sum::<f64>();
        let (dx, dy) = (moving(|s| s.vx), moving(|s| s.vy));
        p.start_cx = (p.sensor.width as f64 - dx) / 2.0;
        p.start_cy = (p.sensor.height as f64 - dy) / 2.0;
    }
    set(&mut p.start_cx, a.start_cx);
    set(&mut p.start_cy, a.start_cy);
    banner(out, "gen", a.common.seed, &p)?;
    let seq = generate_synthetic_sequence(&p)?;
    let mut outputs = Outputs::default();
    let gt = a.gt_out.clone().unwrap_or_else(|| gt_path_for(&a.out));
    write_event_file(&outputs.file(&a.out), EventFormat::from_path(&a.out), &seq.events)?;
    write_ground_truth(&outputs.file(&gt), &seq.boxes)?;
    for w in &seq.warnings {
        writeln!(out, "warning: {w}")?;
    }
    writeln!(out, "{} events, {} frames -> {}, {}", seq.events.len(), seq.boxes.len(), a.out.display(), gt.display())?;
    outputs.done = true;
    Ok(())
}

fn aggregate_file(events: &Path, p: &AggregateParams, frames: Option<usize>) -> Result<Vec<Vec<EventImage>>> {
    if !(p.alpha > 0.0) {
        bail!("alpha must be > 0");
    }
    if !(p.beta > 0.0 && p.beta < 1.0) {
        bail!("beta must lie in (0, 1)");
    }
    let stream = read_events(events, EventFormat::from_path(events)).with_context(|| format!("reading {}", events.display()))?;
    let sensor = SensorSize::new(p.width, p.height);
    let mut spec = WindowSpec::new(p.window_us, p.timesteps, sensor);
    spec.frames = frames;
    let windows = window_stream(&stream, &spec)?;
    Ok(Aggregator::new(p.method, sensor, p.alpha, p.beta)?.run(&windows)?)
}

pub fn cmd_aggregate(a: AggregateArgs, out: &mut dyn Write) -> Result<()> {
    let mut p: AggregateParams = load_params(a.common.config.as_deref())?;
    a.agg.apply(&mut p);
    set(&mut p.timesteps, a.timesteps);
    p.preview |= a.preview;
    banner(out, "aggregate", a.common.seed, &p)?;
    let frames = aggregate_file(&a.events, &p, None)?;
    let mut outputs = Outputs::default();
    let dir = outputs.dir(&a.out)?;
    for (i, images) in frames.iter().enumerate() {
        let mut counts = Vec::with_capacity(images.len());
        for (k, img) in images.iter().enumerate() {
            img.write_raw(&outputs.file(&dir.join(format!("frame{i:05}_t{k}.raw"))))?;
            if p.preview {
                write_png(&outputs.file(&dir.join(format!("frame{i:05}_t{k}.png"))), img)?;
            }
            counts.push(img.nonzero_pixels().to_string());
        }
        writeln!(out, "frame {i}: nonzero pixels {}", counts.join(" "))?;
    }
    outputs.done = true;
    Ok(())
}

fn write_png(path: &Path, img: &EventImage) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(&img.to_rgb8())?;
    Ok(())
}

fn spike_mode(name: &str) -> Result<SpikeMode> {
    match name {
        "infer" => Ok(SpikeMode::Infer),
        "train" => Ok(SpikeMode::Train),
        other => bail!("unknown mode {other:?} (expected infer or train)"),
    }
}

pub fn cmd_track(a: TrackArgs, out: &mut dyn Write) -> Result<()> {
    let mut p: TrackParams = load_params(a.common.config.as_deref())?;
    a.agg.apply(&mut p.aggregate);
    set(&mut p.mode, a.mode.clone());
    let mode = spike_mode(&p.mode)?;
    let gt = read_ground_truth(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let frame_count = gt.iter().map(|b| b.frame + 1).max();
    let mut outputs = Outputs::default();
    let result = if a.weights == "oracle" {
        let model = ModelConfig::preset(&p.oracle_preset)?;
        banner(out, "track", a.common.seed, &p)?;
        let frames = aggregate_file(&a.events, &p.aggregate, frame_count)?;
        run_sequence(&mut OraclePredictor::new(&gt), "oracle", &frames, &gt, &CropConfig::for_model(&model))?
    } else {
        let weights = WeightStore::<f32>::load(Path::new(&a.weights), None).with_context(|| format!("loading {}", a.weights))?;
        p.aggregate.timesteps = weights.config.timesteps;
        banner(out, "track", a.common.seed, &p)?;
        let frames = aggregate_file(&a.events, &p.aggregate, frame_count)?;
        let mut predictor = ModelPredictor { weights: &weights, mode };
        run_sequence(&mut predictor, "model", &frames, &gt, &CropConfig::for_model(&weights.config))?
    };
    result.write_csv(&outputs.file(&a.out))?;
    let m = compute_metrics(&result.frames)?;
    writeln!(out, "{} frames, auc {:.4}, pr {:.4}, mean iou {:.4}", m.frames, m.auc, m.pr, m.mean_iou)?;
    outputs.done = true;
    Ok(())
}

pub fn cmd_train_toy(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut p: TrainParams = load_params(a.common.config.as_deref())?;
    p.train.seed = a.common.seed;
    set(&mut p.train.steps, a.steps);
    set(&mut p.train.batch_size, a.batch_size);
    set(&mut p.train.optimizer.lr, a.lr);
    set(&mut p.train.data.method, a.method);
    set(&mut p.train.eval_every, a.eval_every);
    set(&mut p.train.eval_sequences, a.eval_sequences);
    banner(out, "train-toy", a.common.seed, &p)?;
    let model = ModelConfig::preset(&p.model)?;
    let mut weights = WeightStore::<f32>::init(&model, a.common.seed)?;
    let mut outputs = Outputs::default();
    let dir = outputs.dir(&a.out)?;
    let mut report_file = BufWriter::new(File::create(outputs.file(&dir.join("report.jsonl")))?);
    let report = train_toy(&mut weights, &p.train, Some(&mut report_file))?;
    report_file.flush()?;
    weights.save(&outputs.file(&dir.join("weights.bin")))?;
    let summary = serde_json::json!({
        "model": p.model,
        "method": p.train.data.method,
        "steps": p.train.steps,
        "seed": a.common.seed,
        "final_iou": report.final_iou,
        "per_sequence_iou": report.per_sequence_iou,
    });
    fs::write(outputs.file(&dir.join("summary.json")), serde_json::to_string_pretty(&summary)? + "\n")?;
    writeln!(out, "final held-out mean iou {:.4}", report.final_iou)?;
    outputs.done = true;
    Ok(())
}

/// First template/search pair of a stream, cropped as the tracker would.
fn first_pair(frames: &[Vec<EventImage>], gt: &[GroundTruthBox], crops: &CropConfig) -> Result<(spiketrack::autodiff::Tensor<f64>, spiketrack::autodiff::Tensor<f64>)> {
    let b0 = gt
        .iter()
        .find(|b| b.frame == 0)
        .context("annotations lack frame 0")?;
    if frames.len() < 2 {
        bail!("need at least two frames, found {}", frames.len());
    }
    let init = [b0.cx, b0.cy, b0.w, b0.h];
    let z = stack_crops(&frames[0], &SearchCrop::around(init, crops.template_factor, crops.min_side), crops.template_size);
    let x = stack_crops(&frames[1], &SearchCrop::around(init, crops.search_factor, crops.min_side), crops.search_size);
    Ok((z, x))
}

pub fn cmd_energy(a: EnergyArgs, out: &mut dyn Write) -> Result<()> {
    let mut p: EnergyParams = load_params(a.common.config.as_deref())?;
    a.agg.apply(&mut p.aggregate);
    set(&mut p.preset, a.preset.clone());
    if a.timesteps.is_some() {
        p.model_timesteps = a.timesteps;
    }
    set(&mut p.mode, a.mode.clone());
    if a.calibrate.is_some() {
        p.calibrate = a.calibrate;
    }
    let mode = spike_mode(&p.mode)?;
    let calibrate = p.calibrate.unwrap_or(a.weights.is_none());
    let mut weights = match &a.weights {
        Some(path) => WeightStore::<f32>::load(path, None).with_context(|| format!("loading {}", path.display()))?,
        None => WeightStore::<f32>::init(&ModelConfig::preset(&p.preset)?, a.common.seed)?,
    };
    if let Some(t) = p.model_timesteps {
        if t == 0 {
            bail!("T must be positive");
        }
        weights.config.timesteps = t;
    }
    let cfg = weights.config.clone();
    p.aggregate.timesteps = cfg.timesteps;
    banner(out, "energy", a.common.seed, &p)?;
    let gt = read_ground_truth(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let frames = aggregate_file(&a.events, &p.aggregate, Some(2))?;
    let (z, x) = first_pair(&frames, &gt, &CropConfig::for_model(&cfg))?;
    let (z, x) = (z.cast(), x.cast());
    if calibrate {
        let n = calibrate_batch_norm(&mut weights, &z, &x)?;
        writeln!(out, "calibrated {n} batch-norm layers on the profiled pair")?;
    }
    let firing = record_firing(&weights, &z, &x, mode)?;
    let steps = energy_timesteps(&cfg);
    let report = energy(&count_flops(&cfg), &firing, steps, p.e_mac, p.e_ac)?;
    let mut outputs = Outputs::default();
    report.write_json(&outputs.file(&a.out))?;
    report.write_csv(&outputs.file(&a.out.with_extension("csv")))?;
    let mj = 1e-9;
    writeln!(
        out,
        "{} T={} (x{} virtual steps): total {:.6} mJ = MAC {:.6} mJ + AC {:.6} mJ; dense-attention variant {:.6} mJ; head float convs {:.6} mJ",
        cfg.name,
        cfg.timesteps,
        cfg.neuron.levels(),
        report.total_mj(),
        steps as f64 * report.mac_term_pj * mj,
        steps as f64 * report.ac_term_pj * mj,
        report.total_dense_ssa_pj * mj,
        report.head_float_pj * mj
    )?;
    outputs.done = true;
    Ok(())
}

pub fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    banner(out, "eval", a.common.seed, &(&a.results, &a.gt))?;
    let preds = read_predictions(&a.results)?;
    let gt = read_ground_truth(&a.gt)?;
    let frames: Vec<FrameResult> = preds
        .iter()
        .map(|&(frame, pred)| {
            let g = gt
                .iter()
                .find(|b| b.frame == frame)
                .with_context(|| format!("no annotation for frame {frame}"))?;
            Ok(FrameResult {
                frame,
                pred,
                gt: [g.cx, g.cy, g.w, g.h],
            })
        })
        .collect::<Result<_>>()?;
    let m = compute_metrics(&frames)?;
    let mut outputs = Outputs::default();
    if let Some(path) = &a.out {
        fs::write(outputs.file(path), serde_json::to_string_pretty(&m)? + "\n")?;
    }
    writeln!(out, "{} frames, auc {:.4}, pr {:.4}, mean iou {:.4}", m.frames, m.auc, m.pr, m.mean_iou)?;
    outputs.done = true;
    Ok(())
}
