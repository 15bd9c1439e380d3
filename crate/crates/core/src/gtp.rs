//! Event aggregation into three-channel images.
//!
//! The trajectory-prompt aggregator accumulates positive and negative
//! polarity counts (scaled by `alpha`) in channels 1 and 2 and keeps a
//! `beta`-decayed record of pixel onsets in channel 3, carried from frame to
//! frame. Event Frame and Event Count baselines share the output type.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{EventWindow, Polarity, SensorSize};

#[derive(Debug, Error)]
pub enum GtpError {
    #[error("window is {got_w}x{got_h} but aggregator expects {want_w}x{want_h}")]
    Dimension {
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("unknown aggregation method {0:?}")]
    UnknownMethod(String),
    #[error("event at ({x}, {y}) outside {width}x{height} plane")]
    OutOfBounds { x: u16, y: u16, width: usize, height: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad image file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Gtp,
    EventFrame,
    EventCount,
}

impl std::str::FromStr for AggregationMethod {
    type Err = GtpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gtp" => Ok(AggregationMethod::Gtp),
            "event_frame" => Ok(AggregationMethod::EventFrame),
            "event_count" => Ok(AggregationMethod::EventCount),
            other => Err(GtpError::UnknownMethod(other.to_string())),
        }
    }
}

impl std::fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggregationMethod::Gtp => "gtp",
            AggregationMethod::EventFrame => "event_frame",
            AggregationMethod::EventCount => "event_count",
        })
    }
}

/// A single real-valued `height × width` image plane, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn same_dims(&self, other: &Plane) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Three stacked planes `(h1, h2, h3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventImage {
    pub channels: [Plane; 3],
    pub frame: usize,
    pub method: AggregationMethod,
}

impl EventImage {
    pub fn width(&self) -> usize {
        self.channels[0].width
    }

    pub fn height(&self) -> usize {
        self.channels[0].height
    }

    pub fn nonzero_pixels(&self) -> usize {
        (0..self.channels[0].data.len())
            .filter(|&i| self.channels.iter().any(|c| c.data[i] != 0.0))
            .count()
    }

    /// Planar `f32` dump: header `u32 H, u32 W, u32 3`, then channel-major data.
    pub fn write_raw(&self, path: &Path) -> Result<(), GtpError> {
        let mut w = BufWriter::new(File::create(path)?);
        for v in [self.height() as u32, self.width() as u32, 3u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for c in &self.channels {
            for &v in &c.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a planar dump back; values come back at `f32` precision.
    pub fn read_raw(path: &Path, frame: usize, method: AggregationMethod) -> Result<Self, GtpError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 {
            return Err(GtpError::Format("truncated header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes")) as usize;
        let (h, w, c) = (word(0), word(1), word(2));
        if c != 3 || bytes.len() != 12 + 4 * 3 * h * w {
            return Err(GtpError::Format(format!("header {h}x{w}x{c} does not match {} bytes", bytes.len())));
        }
        let floats: Vec<f64> = bytes[12..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        let plane = |k: usize| Plane {
            width: w,
            height: h,
            data: floats[k * h * w..(k + 1) * h * w].to_vec(),
        };
        Ok(Self {
            channels: [plane(0), plane(1), plane(2)],
            frame,
            method,
        })
    }

    /// Clamps to `[0, 255]` and quantises to 8 bits, interleaved RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width() * self.height();
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            for c in &self.channels {
                out.push(c.data[i].clamp(0.0, 255.0).round() as u8);
            }
        }
        out
    }
}

fn check_window(window: &EventWindow, width: usize, height: usize) -> Result<(), GtpError> {
    let (gw, gh) = (window.sensor.width as usize, window.sensor.height as usize);
    if gw != width || gh != height {
        return Err(GtpError::Dimension {
            want_w: width,
            want_h: height,
            got_w: gw,
            got_h: gh,
        });
    }
    for e in &window.events {
        if e.x as usize >= width || e.y as usize >= height {
            return Err(GtpError::OutOfBounds { x: e.x, y: e.y, width, height });
        }
    }
    Ok(())
}

/// `h1 = alpha · #(+1 events)`, `h2 = alpha · #(-1 events)` per pixel.
pub fn aggregate_polarity_channels(window: &EventWindow, alpha: f64) -> Result<(Plane, Plane), GtpError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(GtpError::Parameter(format!("alpha must be positive, got {alpha}")));
    }
    let (w, h) = (window.sensor.width as usize, window.sensor.height as usize);
    check_window(window, w, h)?;
    let mut pos = vec![0u32; w * h];
    let mut neg = vec![0u32; w * h];
    for e in &window.events {
        let i = e.y as usize * w + e.x as usize;
        match e.p {
            Polarity::Positive => pos[i] += 1,
            Polarity::Negative => neg[i] += 1,
        }
    }
    let scale = |counts: Vec<u32>| Plane {
        width: w,
        height: h,
        data: counts.into_iter().map(|c| alpha * c as f64).collect(),
    };
    Ok((scale(pos), scale(neg)))
}

/// Carries the previous frame's three channels between windows.
#[derive(Debug, Clone, PartialEq)]
pub struct GtpState {
    pub prev_h1: Plane,
    pub prev_h2: Plane,
    pub prev_h3: Plane,
    pub alpha: f64,
    pub beta: f64,
}

impl GtpState {
    pub const DEFAULT_ALPHA: f64 = 30.0;
    pub const DEFAULT_BETA: f64 = 0.8;

    pub fn new(sensor: SensorSize, alpha: f64, beta: f64) -> Result<Self, GtpError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(GtpError::Parameter(format!("alpha must be positive, got {alpha}")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(GtpError::Parameter(format!("beta must lie in [0, 1], got {beta}")));
        }
        let (w, h) = (sensor.width as usize, sensor.height as usize);
        Ok(Self {
            prev_h1: Plane::zeros(w, h),
            prev_h2: Plane::zeros(w, h),
            prev_h3: Plane::zeros(w, h),
            alpha,
            beta,
        })
    }

    pub fn with_defaults(sensor: SensorSize) -> Self {
        Self::new(sensor, Self::DEFAULT_ALPHA, Self::DEFAULT_BETA).expect("defaults are valid")
    }
}

/// `h3 = beta · prev_h3 + alpha · Σ_j [prev_hj == 0]·[hj != 0]` over the two
/// polarity channels.
pub fn aggregate_trajectory_channel(state: &GtpState, h1: &Plane, h2: &Plane) -> Result<Plane, GtpError> {
    for p in [h1, h2, &state.prev_h1, &state.prev_h2] {
        if !p.same_dims(&state.prev_h3) {
            return Err(GtpError::Dimension {
                want_w: state.prev_h3.width,
                want_h: state.prev_h3.height,
                got_w: p.width,
                got_h: p.height,
            });
        }
    }
    let onset = |prev: f64, cur: f64| if prev == 0.0 && cur != 0.0 { 1.0 } else { 0.0 };
    let data = (0..h1.data.len())
        .map(|i| {
            let onsets = onset(state.prev_h1.data[i], h1.data[i]) + onset(state.prev_h2.data[i], h2.data[i]);
            state.prev_h3.data[i] * state.beta + state.alpha * onsets
        })
        .collect();
    Ok(Plane {
        width: h1.width,
        height: h1.height,
        data,
    })
}

/// One streaming step: aggregates `window` and returns the image plus the
/// successor state. `frame` tags the output image.
pub fn aggregate_next(state: &GtpState, window: &EventWindow, frame: usize) -> Result<(EventImage, GtpState), GtpError> {
    check_window(window, state.prev_h3.width, state.prev_h3.height)?;
    let (h1, h2) = aggregate_polarity_channels(window, state.alpha)?;
    let h3 = aggregate_trajectory_channel(state, &h1, &h2)?;
    let next = GtpState {
        prev_h1: h1.clone(),
        prev_h2: h2.clone(),
        prev_h3: h3.clone(),
        alpha: state.alpha,
        beta: state.beta,
    };
    Ok((
        EventImage {
            channels: [h1, h2, h3],
            frame,
            method: AggregationMethod::Gtp,
        },
        next,
    ))
}

/// Event Frame keeps only the latest polarity per pixel; Event Count keeps
/// raw per-polarity counts. Channel 3 is zero for both.
pub fn aggregate_baseline(window: &EventWindow, method: AggregationMethod, frame: usize) -> Result<EventImage, GtpError> {
    let (w, h) = (window.sensor.width as usize, window.sensor.height as usize);
    check_window(window, w, h)?;
    let mut c1 = Plane::zeros(w, h);
    let mut c2 = Plane::zeros(w, h);
    match method {
        AggregationMethod::EventFrame => {
            for e in &window.events {
                let i = e.y as usize * w + e.x as usize;
                let (on, off) = match e.p {
                    Polarity::Positive => (&mut c1, &mut c2),
                    Polarity::Negative => (&mut c2, &mut c1),
                };
                on.data[i] = 1.0;
                off.data[i] = 0.0;
            }
        }
        AggregationMethod::EventCount => {
            for e in &window.events {
                let i = e.y as usize * w + e.x as usize;
                match e.p {
                    Polarity::Positive => c1.data[i] += 1.0,
                    Polarity::Negative => c2.data[i] += 1.0,
                }
            }
        }
        AggregationMethod::Gtp => {
            return Err(GtpError::Parameter("the trajectory aggregator is stateful; use Aggregator".into()))
        }
    }
    Ok(EventImage {
        channels: [c1, c2, Plane::zeros(w, h)],
        frame,
        method,
    })
}

/// Uniform front over all aggregation methods for a sequence of windows.
#[derive(Debug, Clone)]
pub struct Aggregator {
    method: AggregationMethod,
    state: Option<GtpState>,
    sensor: SensorSize,
}

impl Aggregator {
    pub fn new(method: AggregationMethod, sensor: SensorSize, alpha: f64, beta: f64) -> Result<Self, GtpError> {
        let state = match method {
            AggregationMethod::Gtp => Some(GtpState::new(sensor, alpha, beta)?),
            _ => None,
        };
        Ok(Self { method, state, sensor })
    }

    pub fn method(&self) -> AggregationMethod {
        self.method
    }

    pub fn sensor(&self) -> SensorSize {
        self.sensor
    }

    pub fn push(&mut self, window: &EventWindow, frame: usize) -> Result<EventImage, GtpError> {
        match &mut self.state {
            Some(state) => {
                let (img, next) = aggregate_next(state, window, frame)?;
                *state = next;
                Ok(img)
            }
            None => aggregate_baseline(window, self.method, frame),
        }
    }

    /// Aggregates frames of sub-windows (as produced by `window_stream`).
    pub fn run(&mut self, frames: &[Vec<EventWindow>]) -> Result<Vec<Vec<EventImage>>, GtpError> {
        frames
            .iter()
            .enumerate()
            .map(|(i, subs)| subs.iter().map(|w| self.push(w, i)).collect())
            .collect()
    }
}

/// Recomputes every image from a fresh state over the full prefix.
/// Quadratic; used to check the streaming fold.
pub fn aggregate_batch(windows: &[EventWindow], sensor: SensorSize, alpha: f64, beta: f64) -> Result<Vec<EventImage>, GtpError> {
    (0..windows.len())
        .map(|i| {
            let mut state = GtpState::new(sensor, alpha, beta)?;
            let mut last = None;
            for (k, w) in windows[..=i].iter().enumerate() {
                let (img, next) = aggregate_next(&state, w, k)?;
                state = next;
                last = Some(img);
            }
            Ok(last.expect("prefix is non-empty"))
        })
        .collect()
}
