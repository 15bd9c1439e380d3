//! Tracking metrics and the first-frame-template sequence harness.

mod crop;
mod harness;

pub use crop::{crop_resize, stack_crops, SearchCrop};
pub use harness::{run_sequence, CropConfig, ModelPredictor, OraclePredictor, Predictor};

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gtp::GtpError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no frames to evaluate")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error("malformed results line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gtp(#[from] GtpError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Centre distance below which a frame counts toward the precision rate.
pub const PR_THRESHOLD_PX: f64 = 20.0;

/// Success thresholds `0, 0.05, …, 1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Corner form `[x0, y0, x1, y1]` to centre form `[cx, cy, w, h]`.
pub fn corners_to_center(b: [f64; 4]) -> [f64; 4] {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

pub fn center_to_corners(b: [f64; 4]) -> [f64; 4] {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Intersection over union of two centre-form boxes. Empty boxes give 0.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (a, b) = (center_to_corners(a), center_to_corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

pub fn center_distance(a: [f64; 4], b: [f64; 4]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    /// Centre form, pixels.
    pub pred: [f64; 4],
    pub gt: [f64; 4],
}

impl FrameResult {
    pub fn iou(&self) -> f64 {
        iou(self.pred, self.gt)
    }

    pub fn distance(&self) -> f64 {
        center_distance(self.pred, self.gt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub sensor: (usize, usize),
    pub frames: Vec<FrameResult>,
}

impl SequenceResult {
    pub fn mean_iou(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().map(FrameResult::iou).sum::<f64>() / self.frames.len() as f64
    }

    /// `frame,pred_cx,pred_cy,pred_w,pred_h,gt_cx,gt_cy,gt_w,gt_h,iou,distance`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "frame,pred_cx,pred_cy,pred_w,pred_h,gt_cx,gt_cy,gt_w,gt_h,iou,distance")?;
        for f in &self.frames {
            let p = f.pred;
            let g = f.gt;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                f.frame,
                p[0],
                p[1],
                p[2],
                p[3],
                g[0],
                g[1],
                g[2],
                g[3],
                f.iou(),
                f.distance()
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a results file; only frame and predicted box columns are required.
pub fn read_predictions(path: &Path) -> Result<Vec<(usize, [f64; 4])>, EvalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let content = line.trim();
        if content.is_empty() || (i == 0 && content.starts_with("frame")) {
            continue;
        }
        let bad = |reason: String| EvalError::Malformed { line: i + 1, reason };
        let f: Vec<&str> = content.split(',').map(str::trim).collect();
        if f.len() < 5 {
            return Err(bad(format!("expected at least 5 fields, found {}", f.len())));
        }
        let frame = f[0].parse().map_err(|_| bad(format!("bad frame {:?}", f[0])))?;
        let mut b = [0.0; 4];
        for (k, v) in b.iter_mut().enumerate() {
            *v = f[k + 1].parse().map_err(|_| bad(format!("bad number {:?}", f[k + 1])))?;
        }
        out.push((frame, b));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub frames: usize,
    pub auc: f64,
    pub pr: f64,
    pub mean_iou: f64,
    /// `(IoU threshold, share of frames with IoU ≥ threshold)`.
    pub success: Vec<(f64, f64)>,
    /// `(pixel threshold, share of frames with distance < threshold)`.
    pub precision: Vec<(f64, f64)>,
}

pub fn compute_metrics(frames: &[FrameResult]) -> Result<MetricSummary, EvalError> {
    if frames.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = frames.len() as f64;
    let ious: Vec<f64> = frames.iter().map(FrameResult::iou).collect();
    let dists: Vec<f64> = frames.iter().map(FrameResult::distance).collect();
    let share = |pred: &dyn Fn(usize) -> bool| (0..frames.len()).filter(|&i| pred(i)).count() as f64 / n;
    let success: Vec<(f64, f64)> = success_thresholds()
        .into_iter()
        .map(|t| (t, share(&|i| ious[i] >= t)))
        .collect();
    let precision: Vec<(f64, f64)> = (0..=50)
        .map(|px| {
            let t = px as f64;
            (t, share(&|i| dists[i] < t))
        })
        .collect();
    Ok(MetricSummary {
        frames: frames.len(),
        auc: success.iter().map(|s| s.1).sum::<f64>() / success.len() as f64,
        pr: share(&|i| dists[i] < PR_THRESHOLD_PX),
        mean_iou: ious.iter().sum::<f64>() / n,
        success,
        precision,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<FrameResult> {
        (0..n)
            .map(|frame| {
                let mut b = || [rng.gen_range(10.0..60.0), rng.gen_range(10.0..60.0), rng.gen_range(2.0..20.0), rng.gen_range(2.0..20.0)];
                FrameResult { frame, pred: b(), gt: b() }
            })
            .collect()
    }

    #[test]
    fn iou_examples() {
        let a = corners_to_center([0.0, 0.0, 2.0, 2.0]);
        let b = corners_to_center([1.0, 1.0, 3.0, 3.0]);
        assert!((iou(a, b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, corners_to_center([5.0, 5.0, 6.0, 6.0])), 0.0);
    }

    #[test]
    fn auc_and_pr_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = random_frames(&mut rng, 100);
        let m = compute_metrics(&frames).unwrap();
        // independent evaluation straight from corner arithmetic
        let mut rate_sum = 0.0;
        for k in 0..=20 {
            let thr = k as f64 / 20.0;
            let mut hits = 0usize;
            for f in &frames {
                let (p, g) = (f.pred, f.gt);
                let ix = ((p[0] + p[2] / 2.0).min(g[0] + g[2] / 2.0) - (p[0] - p[2] / 2.0).max(g[0] - g[2] / 2.0)).max(0.0);
                let iy = ((p[1] + p[3] / 2.0).min(g[1] + g[3] / 2.0) - (p[1] - p[3] / 2.0).max(g[1] - g[3] / 2.0)).max(0.0);
                let inter = ix * iy;
                let v = inter / (p[2] * p[3] + g[2] * g[3] - inter);
                if v >= thr {
                    hits += 1;
                }
            }
            rate_sum += hits as f64 / frames.len() as f64;
        }
        assert_eq!(m.auc, rate_sum / 21.0);
        let mut close = 0usize;
        for f in &frames {
            let d2 = (f.pred[0] - f.gt[0]).powi(2) + (f.pred[1] - f.gt[1]).powi(2);
            if d2 < 400.0 {
                close += 1;
            }
        }
        assert_eq!(m.pr, close as f64 / 100.0);
    }

    #[test]
    fn precision_is_strict_at_twenty_pixels() {
        let gt = [50.0, 50.0, 10.0, 10.0];
        let at = |dx: f64| FrameResult { frame: 0, pred: [50.0 + dx, 50.0, 10.0, 10.0], gt };
        assert_eq!(compute_metrics(&[at(20.0)]).unwrap().pr, 0.0);
        assert_eq!(compute_metrics(&[at(19.999)]).unwrap().pr, 1.0);
        let diag = FrameResult { frame: 0, pred: [62.0, 66.0, 10.0, 10.0], gt };
        assert_eq!(diag.distance(), 20.0);
        assert_eq!(compute_metrics(&[diag]).unwrap().pr, 0.0);
    }

    #[test]
    fn perfect_single_frame() {
        let b = [5.0, 5.0, 2.0, 2.0];
        let m = compute_metrics(&[FrameResult { frame: 0, pred: b, gt: b }]).unwrap();
        assert_eq!((m.auc, m.pr), (1.0, 1.0));
        assert!(matches!(compute_metrics(&[]), Err(EvalError::Empty)));
    }

    #[test]
    fn results_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = SequenceResult { name: "s".into(), sensor: (64, 64), frames: random_frames(&mut rng, 5) };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        seq.write_csv(&p).unwrap();
        let back = read_predictions(&p).unwrap();
        assert_eq!(back, seq.frames.iter().map(|f| (f.frame, f.pred)).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn curves_are_monotone_and_order_free(seed in 0u64..500, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = random_frames(&mut rng, n);
            let m = compute_metrics(&frames).unwrap();
            prop_assert_eq!(m.success[0].1, 1.0);
            prop_assert!(m.success.windows(2).all(|w| w[1].1 <= w[0].1));
            prop_assert!(m.precision.windows(2).all(|w| w[1].1 >= w[0].1));
            let mut shuffled = frames.clone();
            shuffled.reverse();
            shuffled.rotate_left(seed as usize % n);
            prop_assert_eq!(compute_metrics(&shuffled).unwrap().auc, m.auc);
        }

        #[test]
        fn distances_scale_with_boxes(seed in 0u64..200, k in 1.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_frames(&mut rng, 1)[0];
            let scale = |b: [f64; 4]| b.map(|v| v * k);
            let g = FrameResult { frame: 0, pred: scale(f.pred), gt: scale(f.gt) };
            prop_assert!((g.distance() - k * f.distance()).abs() <= 1e-9 * g.distance().max(1.0));
            prop_assert!((g.iou() - f.iou()).abs() < 1e-9);
        }
    }
}
