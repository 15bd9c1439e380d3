use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Event, EventError, GroundTruthBox, Polarity, SensorSize, WindowSpec};

/// Constant velocity (pixels per frame) held for a number of frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSegment {
    pub frames: usize,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub sensor: SensorSize,
    pub object_w: f64,
    pub object_h: f64,
    pub start_cx: f64,
    pub start_cy: f64,
    /// Frames past the end of the path are stationary.
    pub path: Vec<MotionSegment>,
    /// Probability that a pixel crossing the square's edge emits its event.
    pub event_rate: f64,
    /// Mean background events per frame.
    pub noise_rate: f64,
    pub frames: usize,
    pub window_len_us: u64,
    pub ticks_per_frame: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sensor: SensorSize::new(128, 128),
            object_w: 16.0,
            object_h: 16.0,
            start_cx: 64.0,
            start_cy: 64.0,
            path: Vec::new(),
            event_rate: 1.0,
            noise_rate: 0.0,
            frames: 50,
            window_len_us: 10_000,
            ticks_per_frame: 10,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn window_spec(&self, timesteps: usize) -> WindowSpec {
        WindowSpec::new(self.window_len_us, timesteps, self.sensor).with_frames(self.frames)
    }

    fn velocity(&self, frame: usize) -> (f64, f64) {
        let mut start = 0;
        for seg in &self.path {
            if frame < start + seg.frames {
                return (seg.vx, seg.vy);
            }
            start += seg.frames;
        }
        (0.0, 0.0)
    }

    fn validate(&self) -> Result<(), EventError> {
        let bad = |m: &str| Err(EventError::Config(m.to_string()));
        if !(self.object_w > 0.0 && self.object_h > 0.0) {
            return bad("object extent must be positive");
        }
        if self.object_w > self.sensor.width as f64 || self.object_h > self.sensor.height as f64 {
            return bad("object larger than sensor");
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            return bad("event_rate must lie in [0, 1]");
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate.is_finite()) {
            return bad("noise_rate must be finite and non-negative");
        }
        if self.ticks_per_frame == 0 || self.window_len_us < self.ticks_per_frame as u64 {
            return bad("window must hold at least one microsecond per tick");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub events: Vec<Event>,
    /// Box at the end of each frame interval.
    pub boxes: Vec<GroundTruthBox>,
    pub warnings: Vec<String>,
}

/// Pixel rectangle `[x0, x1) × [y0, y1)` covered by the square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Raster {
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

impl Raster {
    const EMPTY: Raster = Raster { x0: 0, x1: 0, y0: 0, y1: 0 };

    /// A pixel is covered when its centre lies inside `[c - e/2, c + e/2)`.
    fn of(cx: f64, cy: f64, w: f64, h: f64, sensor: SensorSize) -> Self {
        let lo = |c: f64, e: f64| (c - e / 2.0 - 0.5).ceil() as i64;
        let hi = |c: f64, e: f64| (c + e / 2.0 - 0.5).ceil() as i64;
        Raster {
            x0: lo(cx, w).max(0),
            x1: hi(cx, w).min(sensor.width as i64),
            y0: lo(cy, h).max(0),
            y1: hi(cy, h).min(sensor.height as i64),
        }
    }

    fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

struct Emitter<'a> {
    rng: &'a mut ChaCha8Rng,
    rate: f64,
    out: Vec<Event>,
}

impl Emitter<'_> {
    /// Pixels entering the square brighten (+1), pixels leaving darken (-1).
    fn transition(&mut self, old: Raster, new: Raster, t: u64) {
        if old == new {
            return;
        }
        let bx0 = old.x0.min(new.x0);
        let bx1 = old.x1.max(new.x1);
        let by0 = old.y0.min(new.y0);
        let by1 = old.y1.max(new.y1);
        for y in by0..by1 {
            for x in bx0..bx1 {
                let (was, is) = (old.contains(x, y), new.contains(x, y));
                let p = match (was, is) {
                    (false, true) => Polarity::Positive,
                    (true, false) => Polarity::Negative,
                    _ => continue,
                };
                if self.rate >= 1.0 || self.rng.gen_bool(self.rate) {
                    self.out.push(Event::new(x as u16, y as u16, t, p));
                }
            }
        }
    }
}

/// Simulates a bright rectangle moving along a piecewise-constant velocity
/// path. The square appears at t = origin, then moves in `ticks_per_frame`
/// sub-steps per frame; background noise is Poisson per frame with uniform
/// position, time and polarity.
pub fn generate_synthetic_sequence(config: &SyntheticConfig) -> Result<SyntheticSequence, EventError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.object_w, config.object_h);
    let sensor = config.sensor;
    let clamp_x = |c: f64| c.clamp(w / 2.0, sensor.width as f64 - w / 2.0);
    let clamp_y = |c: f64| c.clamp(h / 2.0, sensor.height as f64 - h / 2.0);
    let mut warnings = Vec::new();
    let mut clamped_frames = 0usize;

    let (mut cx, mut cy) = (clamp_x(config.start_cx), clamp_y(config.start_cy));
    if (cx, cy) != (config.start_cx, config.start_cy) {
        warnings.push("start position clamped to sensor bounds".to_string());
    }
    let noise = if config.noise_rate > 0.0 {
        Some(Poisson::new(config.noise_rate).map_err(|e| EventError::Config(e.to_string()))?)
    } else {
        None
    };

    let ticks = config.ticks_per_frame;
    let len = config.window_len_us;
    let mut emitter = Emitter {
        rng: &mut rng,
        rate: config.event_rate,
        out: Vec::new(),
    };
    let mut raster = Raster::of(cx, cy, w, h, sensor);
    emitter.transition(Raster::EMPTY, raster, 0);

    let mut boxes = Vec::with_capacity(config.frames);
    let mut frame_events: Vec<Event> = Vec::new();
    for frame in 0..config.frames {
        let (vx, vy) = config.velocity(frame);
        let frame_start = frame as u64 * len;
        let (fx, fy) = (cx, cy);
        let mut clamped = false;
        for k in 1..=ticks {
            let frac = k as f64 / ticks as f64;
            let (nx, ny) = (fx + vx * frac, fy + vy * frac);
            let (cnx, cny) = (clamp_x(nx), clamp_y(ny));
            clamped |= (cnx, cny) != (nx, ny);
            let next = Raster::of(cnx, cny, w, h, sensor);
            let t = frame_start + (k as u64 - 1) * len / ticks as u64;
            emitter.transition(raster, next, t);
            raster = next;
            (cx, cy) = (cnx, cny);
        }
        if clamped {
            if clamped_frames == 0 {
                warnings.push(format!("frame {frame}: path clamped to sensor bounds"));
            }
            clamped_frames += 1;
        }
        boxes.push(GroundTruthBox { frame, cx, cy, w, h });

        if let Some(dist) = &noise {
            let count = dist.sample(emitter.rng) as usize;
            frame_events.clear();
            for _ in 0..count {
                let x = emitter.rng.gen_range(0..sensor.width);
                let y = emitter.rng.gen_range(0..sensor.height);
                let t = frame_start + emitter.rng.gen_range(0..len);
                let p = if emitter.rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                frame_events.push(Event::new(x, y, t, p));
            }
            emitter.out.extend_from_slice(&frame_events);
        }
    }
    if clamped_frames > 1 {
        warnings.push(format!("{clamped_frames} frames clamped in total"));
    }
    let mut events = emitter.out;
    events.sort_by_key(|e| e.t);
    Ok(SyntheticSequence { events, boxes, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::window_stream;

    #[test]
    fn stationary_object_only_appears_once() {
        let cfg = SyntheticConfig { frames: 5, ..Default::default() };
        let seq = generate_synthetic_sequence(&cfg).unwrap();
        assert!(seq.boxes.windows(2).all(|b| (b[0].cx, b[0].cy) == (b[1].cx, b[1].cy)));
        assert_eq!(seq.events.len(), 16 * 16);
        assert!(seq.events.iter().all(|e| e.t == 0 && e.p == Polarity::Positive));
    }

    #[test]
    fn constant_velocity_moves_exactly() {
        let cfg = SyntheticConfig {
            path: vec![MotionSegment { frames: 20, vx: 2.0, vy: 0.0 }],
            frames: 20,
            start_cx: 30.0,
            ..Default::default()
        };
        let seq = generate_synthetic_sequence(&cfg).unwrap();
        for pair in seq.boxes.windows(2) {
            assert_eq!(pair[1].cx - pair[0].cx, 2.0);
            assert_eq!(pair[1].cy, pair[0].cy);
        }
        assert!(seq.warnings.is_empty());
        // leading edge brightens, trailing edge darkens
        let frame1: Vec<&Event> = seq.events.iter().filter(|e| e.t >= 10_000 && e.t < 20_000).collect();
        let cx = seq.boxes[0].cx;
        assert!(frame1.iter().all(|e| (e.p == Polarity::Positive) == (e.x as f64 > cx)));
    }

    #[test]
    fn leaving_sensor_is_clamped_with_warning() {
        let cfg = SyntheticConfig {
            path: vec![MotionSegment { frames: 40, vx: 5.0, vy: 0.0 }],
            frames: 40,
            ..Default::default()
        };
        let seq = generate_synthetic_sequence(&cfg).unwrap();
        assert!(!seq.warnings.is_empty());
        let last = seq.boxes.last().unwrap();
        assert_eq!(last.cx + last.w / 2.0, 128.0);
        assert!(seq.events.iter().all(|e| e.x < 128));
    }

    #[test]
    fn noise_rate_matches_monte_carlo_mean() {
        let rate = 20.0;
        let cfg = SyntheticConfig {
            noise_rate: rate,
            frames: 1000,
            seed: 3,
            ..Default::default()
        };
        let seq = generate_synthetic_sequence(&cfg).unwrap();
        let signal = 16 * 16;
        let mean = (seq.events.len() - signal) as f64 / 1000.0;
        assert!((mean - rate).abs() <= 0.05 * rate, "mean noise {mean}");
        let windows = window_stream(&seq.events, &cfg.window_spec(1)).unwrap();
        assert_eq!(windows.len(), 1000);
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SyntheticConfig {
            path: vec![MotionSegment { frames: 10, vx: 1.3, vy: -0.7 }],
            noise_rate: 5.0,
            event_rate: 0.8,
            frames: 10,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate_synthetic_sequence(&cfg).unwrap(), generate_synthetic_sequence(&cfg).unwrap());
    }
}
