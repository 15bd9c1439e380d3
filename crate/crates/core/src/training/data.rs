use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::eval::{stack_crops, SearchCrop};
use crate::events::{generate_synthetic_sequence, window_stream, GroundTruthBox, MotionSegment, SensorSize, SyntheticConfig};
use crate::gtp::{AggregationMethod, Aggregator, EventImage};

use super::TrainError;

/// Family of synthetic tracking sequences: a square that may rest for a
/// few frames, then moves at constant velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sensor: u16,
    pub frames: usize,
    pub min_object: f64,
    pub max_object: f64,
    pub max_still_frames: usize,
    pub min_speed: f64,
    pub max_speed: f64,
    pub event_rate: f64,
    pub noise_rate: f64,
    pub window_len_us: u64,
    pub method: AggregationMethod,
    pub alpha: f64,
    pub beta: f64,
    /// The search window is centred on the state up to this many frames back.
    pub max_gap: usize,
    /// Centre jitter of the search window, as a share of the object extent.
    pub center_jitter: f64,
    /// Log-uniform scale jitter of the search window.
    pub scale_jitter: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sensor: 128,
            frames: 24,
            min_object: 12.0,
            max_object: 20.0,
            max_still_frames: 6,
            min_speed: 0.5,
            max_speed: 2.5,
            event_rate: 0.9,
            noise_rate: 10.0,
            window_len_us: 10_000,
            method: AggregationMethod::Gtp,
            alpha: 30.0,
            beta: 0.8,
            max_gap: 2,
            center_jitter: 0.4,
            scale_jitter: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.frames < 2 {
            return bad("sequences need at least two frames");
        }
        if !(self.min_object > 0.0 && self.min_object <= self.max_object) {
            return bad("object size range is empty");
        }
        if !(0.0 <= self.min_speed && self.min_speed <= self.max_speed) {
            return bad("speed range is empty");
        }
        let travel = self.max_speed * self.frames as f64;
        if self.max_object + 8.0 + travel > self.sensor as f64 {
            return bad("sensor too small for the motion range");
        }
        Ok(())
    }

    /// Draws one sequence configuration whose path stays on the sensor.
    pub fn sample_sequence(&self, rng: &mut ChaCha8Rng) -> SyntheticConfig {
        let w = rng.gen_range(self.min_object..=self.max_object);
        let h = rng.gen_range(self.min_object..=self.max_object);
        let still = rng.gen_range(0..=self.max_still_frames.min(self.frames - 1));
        let moving = self.frames - still;
        let speed = rng.gen_range(self.min_speed..=self.max_speed);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let (vx, vy) = (speed * angle.cos(), speed * angle.sin());
        let side = self.sensor as f64;
        let start = |e: f64, d: f64, rng: &mut ChaCha8Rng| {
            let margin = e / 2.0 + 4.0;
            let lo = margin + (-d).max(0.0);
            let hi = side - margin - d.max(0.0);
            rng.gen_range(lo..=hi.max(lo))
        };
        let (dx, dy) = (vx * moving as f64, vy * moving as f64);
        let start_cx = start(w, dx, rng);
        let start_cy = start(h, dy, rng);
        let mut path = Vec::new();
        if still > 0 {
            path.push(MotionSegment { frames: still, vx: 0.0, vy: 0.0 });
        }
        path.push(MotionSegment { frames: moving, vx, vy });
        SyntheticConfig {
            sensor: SensorSize::new(self.sensor, self.sensor),
            object_w: w,
            object_h: h,
            start_cx,
            start_cy,
            path,
            event_rate: self.event_rate,
            noise_rate: self.noise_rate,
            frames: self.frames,
            window_len_us: self.window_len_us,
            ticks_per_frame: 10,
            seed: rng.gen(),
        }
    }
}

/// Aggregated frames (`timesteps` images each) plus annotations.
#[derive(Debug, Clone)]
pub struct AggregatedSequence {
    pub frames: Vec<Vec<EventImage>>,
    pub boxes: Vec<GroundTruthBox>,
}

pub fn aggregate_sequence(
    seq: &SyntheticConfig,
    data: &DataConfig,
    timesteps: usize,
    upto: Option<usize>,
) -> Result<AggregatedSequence, TrainError> {
    let frames = upto.map_or(seq.frames, |u| u.min(seq.frames));
    let cfg = SyntheticConfig { frames, ..seq.clone() };
    let s = generate_synthetic_sequence(&cfg)?;
    let windows = window_stream(&s.events, &cfg.window_spec(timesteps))?;
    let mut agg = Aggregator::new(data.method, cfg.sensor, data.alpha, data.beta)?;
    Ok(AggregatedSequence {
        frames: agg.run(&windows)?,
        boxes: s.boxes,
    })
}

/// One template/search pair with the target box normalised to the search crop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `[T, 1, 3, z, z]`, 0..255 units.
    pub template: Tensor<f64>,
    /// `[T, 1, 3, x, x]`.
    pub search: Tensor<f64>,
    pub gt: [f64; 4],
}

/// Geometry shared by the sampler and the evaluation harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub template_size: usize,
    pub search_size: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    pub timesteps: usize,
}

/// Deterministic stream of training pairs, one fresh sequence per pair.
/// The template always comes from frame 0, as at test time.
pub struct PairSampler {
    data: DataConfig,
    geometry: PairGeometry,
    rng: ChaCha8Rng,
}

impl PairSampler {
    pub fn new(data: DataConfig, geometry: PairGeometry, seed: u64) -> Result<Self, TrainError> {
        data.validate()?;
        Ok(Self {
            data,
            geometry,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn sample(&mut self) -> Result<TrainSample, TrainError> {
        let g = self.geometry;
        let seq_cfg = self.data.sample_sequence(&mut self.rng);
        let frame = self.rng.gen_range(1..self.data.frames);
        let seq = aggregate_sequence(&seq_cfg, &self.data, g.timesteps, Some(frame + 1))?;
        let gt_box = |f: usize| {
            let b = seq.boxes[f];
            [b.cx, b.cy, b.w, b.h]
        };
        let template = stack_crops(&seq.frames[0], &SearchCrop::around(gt_box(0), g.template_factor, 1.0), g.template_size);
        let gap = self.rng.gen_range(0..=self.data.max_gap.min(frame));
        let mut anchor = gt_box(frame - gap);
        let extent = (anchor[2] * anchor[3]).sqrt();
        let j = self.data.center_jitter * extent;
        anchor[0] += self.rng.gen_range(-j..=j);
        anchor[1] += self.rng.gen_range(-j..=j);
        let sj = self.data.scale_jitter;
        let s = self.rng.gen_range(-sj..=sj).exp();
        anchor[2] *= s;
        anchor[3] *= s;
        let crop = SearchCrop::around(anchor, g.search_factor, 1.0);
        let search = stack_crops(&seq.frames[frame], &crop, g.search_size);
        let gt = crop.to_normalized(gt_box(frame)).map(|v| v.clamp(0.0, 1.0));
        Ok(TrainSample { template, search, gt })
    }
}

/// Stacks samples along the batch axis: `[T, B, 3, s, s]` inputs and `[B, 4]` boxes.
pub fn collate<T: Scalar>(samples: &[TrainSample]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TrainError> {
    let zs: Vec<&Tensor<f64>> = samples.iter().map(|s| &s.template).collect();
    let xs: Vec<&Tensor<f64>> = samples.iter().map(|s| &s.search).collect();
    let gt: Vec<f64> = samples.iter().flat_map(|s| s.gt).collect();
    Ok((
        Tensor::concat(&zs, 1)?.cast(),
        Tensor::concat(&xs, 1)?.cast(),
        Tensor::<f64>::from_f64(&[samples.len(), 4], &gt)?.cast(),
    ))
}
