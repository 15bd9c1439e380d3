//! Event data model, file formats, windowing and a synthetic generator.

mod io;
mod synthetic;

pub use io::{parse_event_file, read_events, read_ground_truth, write_event_file, write_ground_truth, EventFormat};
pub use synthetic::{generate_synthetic_sequence, MotionSegment, SyntheticConfig, SyntheticSequence};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EventError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed record at byte offset {offset}: {reason}")]
    Malformed { offset: u64, reason: String },
    #[error("invalid polarity {value} at byte offset {offset}")]
    Polarity { offset: u64, value: i64 },
    #[error("timestamp {t} of event {index} precedes previous timestamp {prev}")]
    NonMonotone { index: usize, t: u64, prev: u64 },
    #[error("event {index} at ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_i64(v: i64) -> Option<Self> {
        match v {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    /// Microseconds.
    pub t: u64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: u64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSize {
    pub width: u16,
    pub height: u16,
}

impl SensorSize {
    pub fn new(width: u16, height: u16) -> Self {
        Self { width, height }
    }

    pub fn contains(&self, e: &Event) -> bool {
        e.x < self.width && e.y < self.height
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Events falling in `[t_start, t_end)`, in stream order.
#[derive(Debug, Clone, PartialEq)]
pub struct EventWindow {
    pub events: Vec<Event>,
    pub t_start: u64,
    pub t_end: u64,
    pub sensor: SensorSize,
}

impl EventWindow {
    pub fn empty(t_start: u64, t_end: u64, sensor: SensorSize) -> Self {
        Self {
            events: Vec::new(),
            t_start,
            t_end,
            sensor,
        }
    }

    pub fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }
}

/// Annotation box in pixel units, centre/extent form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// How frame intervals are cut from a stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub origin_us: u64,
    pub window_len_us: u64,
    /// Sub-windows per frame interval.
    pub timesteps: usize,
    pub sensor: SensorSize,
    /// Number of frame intervals; `None` covers up to the last event.
    pub frames: Option<usize>,
}

impl WindowSpec {
    pub fn new(window_len_us: u64, timesteps: usize, sensor: SensorSize) -> Self {
        Self {
            origin_us: 0,
            window_len_us,
            timesteps,
            sensor,
            frames: None,
        }
    }

    pub fn with_frames(mut self, frames: usize) -> Self {
        self.frames = Some(frames);
        self
    }

    /// Sub-window bounds of one frame interval. The remainder of an uneven
    /// split goes to the last sub-window.
    pub fn sub_windows(&self, frame: usize) -> Vec<(u64, u64)> {
        let start = self.origin_us + frame as u64 * self.window_len_us;
        let t = self.timesteps as u64;
        let base = self.window_len_us / t;
        (0..t)
            .map(|k| {
                let lo = start + k * base;
                let hi = if k + 1 == t { start + self.window_len_us } else { lo + base };
                (lo, hi)
            })
            .collect()
    }
}

/// Splits a time-ordered stream into frame intervals, each divided into
/// `spec.timesteps` sub-windows. Returned windows are grouped per frame.
pub fn window_stream(events: &[Event], spec: &WindowSpec) -> Result<Vec<Vec<EventWindow>>, EventError> {
    if spec.window_len_us == 0 || spec.timesteps == 0 {
        return Err(EventError::Config("window length and timesteps must be positive".into()));
    }
    if spec.window_len_us < spec.timesteps as u64 {
        return Err(EventError::Config(format!(
            "window of {} us cannot hold {} sub-windows",
            spec.window_len_us, spec.timesteps
        )));
    }
    let mut prev = 0u64;
    for (index, e) in events.iter().enumerate() {
        if index > 0 && e.t < prev {
            return Err(EventError::NonMonotone { index, t: e.t, prev });
        }
        prev = e.t;
        if e.t < spec.origin_us {
            return Err(EventError::Config(format!(
                "event {index} at t={} precedes window origin {}",
                e.t, spec.origin_us
            )));
        }
        if !spec.sensor.contains(e) {
            return Err(EventError::OutOfBounds {
                index,
                x: e.x,
                y: e.y,
                width: spec.sensor.width,
                height: spec.sensor.height,
            });
        }
    }
    let frames = match spec.frames {
        Some(n) => n,
        None => match events.last() {
            None => return Ok(Vec::new()),
            Some(last) => ((last.t - spec.origin_us) / spec.window_len_us + 1) as usize,
        },
    };
    let mut cursor = 0usize;
    let mut out = Vec::with_capacity(frames);
    for frame in 0..frames {
        let mut subs = Vec::with_capacity(spec.timesteps);
        for (lo, hi) in spec.sub_windows(frame) {
            let mut w = EventWindow::empty(lo, hi, spec.sensor);
            while cursor < events.len() && events[cursor].t < hi {
                w.events.push(events[cursor]);
                cursor += 1;
            }
            subs.push(w);
        }
        out.push(subs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sensor() -> SensorSize {
        SensorSize::new(16, 16)
    }

    #[test]
    fn single_window_per_interval() {
        let spec = WindowSpec::new(1000, 1, sensor()).with_frames(1);
        assert_eq!(spec.sub_windows(0), vec![(0, 1000)]);
    }

    #[test]
    fn equal_split() {
        let spec = WindowSpec::new(1000, 2, sensor());
        assert_eq!(spec.sub_windows(0), vec![(0, 500), (500, 1000)]);
    }

    #[test]
    fn remainder_goes_to_last_subwindow() {
        let spec = WindowSpec::new(1001, 2, sensor());
        let subs = spec.sub_windows(0);
        assert_eq!(subs, vec![(0, 500), (500, 1001)]);
        assert_eq!(subs.iter().map(|(a, b)| b - a).sum::<u64>(), 1001);
        assert_eq!(spec.sub_windows(1), vec![(1001, 1501), (1501, 2002)]);
    }

    #[test]
    fn empty_stream_gives_no_windows() {
        let spec = WindowSpec::new(1000, 2, sensor());
        assert!(window_stream(&[], &spec).unwrap().is_empty());
    }

    #[test]
    fn rejects_out_of_sensor_event() {
        let spec = WindowSpec::new(1000, 1, sensor());
        let e = [Event::new(16, 0, 0, Polarity::Positive)];
        assert!(matches!(window_stream(&e, &spec), Err(EventError::OutOfBounds { .. })));
    }

    fn arb_stream() -> impl Strategy<Value = Vec<Event>> {
        prop::collection::vec((0u16..16, 0u16..16, 0u64..200, any::<bool>()), 0..300).prop_map(|raw| {
            let mut t = 0;
            raw.into_iter()
                .map(|(x, y, dt, pos)| {
                    t += dt;
                    let p = if pos { Polarity::Positive } else { Polarity::Negative };
                    Event::new(x, y, t, p)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn windowing_is_a_partition(events in arb_stream(), len in 1u64..3000, t in 1usize..5) {
            prop_assume!(len >= t as u64);
            let spec = WindowSpec::new(len, t, sensor());
            let windows = window_stream(&events, &spec).unwrap();
            let mut rebuilt = Vec::new();
            for frame in &windows {
                prop_assert_eq!(frame.len(), t);
                for w in frame {
                    for e in &w.events {
                        prop_assert!(w.t_start <= e.t && e.t < w.t_end);
                    }
                    rebuilt.extend_from_slice(&w.events);
                }
            }
            prop_assert_eq!(rebuilt, events);
        }
    }
}
