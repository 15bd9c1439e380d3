use std::collections::BTreeMap;

use crate::autodiff::{Scalar, Tensor};
use crate::events::GroundTruthBox;
use crate::gtp::EventImage;
use crate::model::{predict, ModelConfig, SpikeMode, WeightStore};

use super::{stack_crops, EvalError, FrameResult, SearchCrop, SequenceResult};

/// Crop context factors and network input sizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropConfig {
    pub template_factor: f64,
    pub search_factor: f64,
    pub template_size: usize,
    pub search_size: usize,
    /// Lower bound on a crop side in pixels, so a collapsed prediction
    /// cannot shrink the next search window to nothing.
    pub min_side: f64,
}

impl CropConfig {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            template_factor: 2.0,
            search_factor: 4.0,
            template_size: cfg.template_size,
            search_size: cfg.search_size,
            min_side: 8.0,
        }
    }
}

pub trait Predictor {
    /// Required images per frame, when the predictor has an opinion.
    fn timesteps(&self) -> Option<usize> {
        None
    }

    /// Box in the search crop, centre form normalised to `[0, 1]`.
    fn predict(&mut self, template: &Tensor<f64>, search: &Tensor<f64>, frame: usize, crop: &SearchCrop)
        -> Result<[f64; 4], EvalError>;
}

pub struct ModelPredictor<'a, T: Scalar> {
    pub weights: &'a WeightStore<T>,
    pub mode: SpikeMode,
}

impl<T: Scalar> Predictor for ModelPredictor<'_, T> {
    fn timesteps(&self) -> Option<usize> {
        Some(self.weights.config.timesteps)
    }

    fn predict(&mut self, template: &Tensor<f64>, search: &Tensor<f64>, _: usize, _: &SearchCrop) -> Result<[f64; 4], EvalError> {
        let (results, _) = predict(self.weights, &template.cast(), &search.cast(), self.mode)?;
        Ok(results[0].bbox)
    }
}

/// Answers with the annotation itself; checks harness geometry.
pub struct OraclePredictor {
    pub gt: BTreeMap<usize, [f64; 4]>,
}

impl OraclePredictor {
    pub fn new(gt: &[GroundTruthBox]) -> Self {
        Self {
            gt: gt.iter().map(|b| (b.frame, [b.cx, b.cy, b.w, b.h])).collect(),
        }
    }
}

impl Predictor for OraclePredictor {
    fn predict(&mut self, _: &Tensor<f64>, _: &Tensor<f64>, frame: usize, crop: &SearchCrop) -> Result<[f64; 4], EvalError> {
        let b = self
            .gt
            .get(&frame)
            .ok_or_else(|| EvalError::Mismatch(format!("oracle has no box for frame {frame}")))?;
        Ok(crop.to_normalized(*b))
    }
}

/// Tracks through `frames` (images per frame interval) with the template
/// taken once from frame 0 around its annotation. Each later search window
/// is centred on the previous prediction. Frame 0 is not scored.
pub fn run_sequence(
    predictor: &mut dyn Predictor,
    name: &str,
    frames: &[Vec<EventImage>],
    gt: &[GroundTruthBox],
    crops: &CropConfig,
) -> Result<SequenceResult, EvalError> {
    let first = frames.first().and_then(|f| f.first()).ok_or(EvalError::Empty)?;
    let (w, h) = (first.width(), first.height());
    let steps = frames[0].len();
    if let Some(t) = predictor.timesteps() {
        if t != steps {
            return Err(EvalError::Mismatch(format!("model expects T={t}, frames carry {steps} images")));
        }
    }
    for (i, f) in frames.iter().enumerate() {
        if f.len() != steps || f.iter().any(|img| img.width() != w || img.height() != h) {
            return Err(EvalError::Mismatch(format!("frame {i} differs in timesteps or sensor size")));
        }
    }
    let boxes: BTreeMap<usize, [f64; 4]> = gt.iter().map(|b| (b.frame, [b.cx, b.cy, b.w, b.h])).collect();
    let init = *boxes
        .get(&0)
        .ok_or_else(|| EvalError::Mismatch("first frame is not annotated".into()))?;
    let template_crop = SearchCrop::around(init, crops.template_factor, crops.min_side);
    let template = stack_crops(&frames[0], &template_crop, crops.template_size);
    let mut prev = init;
    let mut out = Vec::with_capacity(frames.len().saturating_sub(1));
    for (i, images) in frames.iter().enumerate().skip(1) {
        let crop = SearchCrop::around(prev, crops.search_factor, crops.min_side);
        let search = stack_crops(images, &crop, crops.search_size);
        let pred = crop.to_pixels(predictor.predict(&template, &search, i, &crop)?);
        prev = pred;
        if let Some(&g) = boxes.get(&i) {
            out.push(FrameResult { frame: i, pred, gt: g });
        }
    }
    Ok(SequenceResult {
        name: name.to_string(),
        sensor: (w, h),
        frames: out,
    })
}
