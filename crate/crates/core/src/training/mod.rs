//! Losses, pair sampling and the toy training loop.

mod data;
mod loss;
mod optim;

pub use data::{aggregate_sequence, collate, AggregatedSequence, DataConfig, PairGeometry, PairSampler, TrainSample};
pub use loss::{center_cell, focal_loss, gaussian_target, giou_loss, l1_loss, total_loss, LossTerms, LossWeights, FOCAL_EPS};
pub use optim::{update_running_stats, AdamW, OptimizerConfig};

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tensor, TensorError};
use crate::eval::{run_sequence, CropConfig, EvalError, ModelPredictor};
use crate::events::EventError;
use crate::gtp::GtpError;
use crate::model::{forward, ForwardCtx, ForwardOptions, ModelError, RegressAt, SpikeMode, WeightStore};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("ground-truth box has non-positive extent")]
    DegenerateBox,
    #[error("non-finite {term} loss")]
    NonFinite { term: String },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Gtp(#[from] GtpError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Gaussian width of the classification target, in map cells.
pub const TARGET_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossWeights,
    pub data: DataConfig,
    /// Evaluate every this many steps (0: only at the start and the end).
    pub eval_every: usize,
    pub eval_sequences: usize,
    /// Seeds of held-out sequences start here, apart from training draws.
    pub eval_seed: u64,
    /// Spike mode of the final evaluation; periodic ones use `Train`.
    pub final_eval_infer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            loss: LossWeights::default(),
            data: DataConfig::default(),
            eval_every: 500,
            eval_sequences: 20,
            eval_seed: 1_000_003,
            final_eval_infer: true,
        }
    }
}

/// One JSON line of the training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub step: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub focal: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub giou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub lines: Vec<ReportLine>,
    /// Mean IoU over held-out sequences after the last step.
    pub final_iou: f64,
    pub per_sequence_iou: Vec<f64>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.lines.iter().filter_map(|l| l.loss).collect()
    }
}

/// Loss values of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
}

/// Forward, loss and backward on one batch. Returns the losses, gradients of
/// every trainable parameter and the batch-norm statistics.
pub fn compute_gradients<T: Scalar>(
    weights: &WeightStore<T>,
    z: &Tensor<T>,
    x: &Tensor<T>,
    gt: &Tensor<T>,
    loss_weights: &LossWeights,
) -> Result<(StepLoss, std::collections::BTreeMap<String, Tensor<T>>, Vec<crate::model::BnUpdate<T>>), TrainError> {
    let mut ctx = ForwardCtx::new(weights, ForwardOptions::train());
    let out = forward(&mut ctx, z, x)?;
    let (b, side) = (out.batch(), out.side());
    let hw = side * side;
    let mut target = Vec::with_capacity(b * hw);
    let mut gt_cells = Vec::with_capacity(b);
    for row in gt.data().chunks(4) {
        let (cx, cy) = (row[0].f64(), row[1].f64());
        target.extend(gaussian_target(side, cx, cy, TARGET_SIGMA));
        gt_cells.push(center_cell(side, cy) * side + center_cell(side, cx));
    }
    let prob = out.score_logits.sigmoid().reshape(&[b, hw])?;
    let cls = focal_loss(&prob, &Tensor::<f64>::from_f64(&[b, hw], &target)?.cast())?;
    let cells = match weights.config.regress_at {
        RegressAt::GtCell => gt_cells,
        RegressAt::Argmax => out.argmax_cells(),
    };
    let boxes = out.boxes_at(&cells)?;
    let terms = LossTerms {
        cls,
        giou: giou_loss(&boxes, gt)?,
        l1: l1_loss(&boxes, gt)?,
    };
    let total = total_loss(&terms, loss_weights)?;
    total.backward()?;
    let value = |v: &crate::autodiff::Var<T>| v.value().item().f64();
    let loss = StepLoss {
        total: value(&total),
        focal: value(&terms.cls),
        giou: value(&terms.giou),
        l1: value(&terms.l1),
    };
    Ok((loss, ctx.gradients(), ctx.bn_updates))
}

/// Held-out sequences shared by every run with the same data family.
pub fn heldout_sequences(data: &DataConfig, count: usize, seed: u64, timesteps: usize) -> Result<Vec<AggregatedSequence>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let cfg = data.sample_sequence(&mut rng);
            aggregate_sequence(&cfg, data, timesteps, None)
        })
        .collect()
}

/// Tracks every held-out sequence; returns per-sequence mean IoU.
pub fn evaluate<T: Scalar>(weights: &WeightStore<T>, seqs: &[AggregatedSequence], mode: SpikeMode) -> Result<Vec<f64>, TrainError> {
    let crops = CropConfig::for_model(&weights.config);
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let mut p = ModelPredictor { weights, mode };
            Ok(run_sequence(&mut p, &format!("heldout{i}"), &s.frames, &s.boxes, &crops)?.mean_iou())
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Trains `weights` in place. Each report line is also written to `sink`
/// as JSON when one is given.
pub fn train_toy<T: Scalar>(
    weights: &mut WeightStore<T>,
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainReport, TrainError> {
    if cfg.batch_size == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    cfg.loss.validate()?;
    let model = weights.config.clone();
    let geometry = PairGeometry {
        template_size: model.template_size,
        search_size: model.search_size,
        template_factor: 2.0,
        search_factor: 4.0,
        timesteps: model.timesteps,
    };
    let mut sampler = PairSampler::new(cfg.data.clone(), geometry, cfg.seed)?;
    let heldout = heldout_sequences(&cfg.data, cfg.eval_sequences, cfg.eval_seed, model.timesteps)?;
    let mut opt = AdamW::new(cfg.optimizer);
    let mut lines = Vec::new();
    let mut emit = |line: ReportLine, lines: &mut Vec<ReportLine>| -> Result<(), TrainError> {
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &line).map_err(|e| std::io::Error::other(e.to_string()))?;
            writeln!(w)?;
        }
        lines.push(line);
        Ok(())
    };
    let eval_line = |step: usize, iou: f64| ReportLine {
        step,
        lr: None,
        loss: None,
        focal: None,
        giou: None,
        l1: None,
        eval_iou: Some(iou),
    };
    emit(eval_line(0, mean(&evaluate(weights, &heldout, SpikeMode::Train)?)), &mut lines)?;
    for step in 0..cfg.steps {
        let samples = (0..cfg.batch_size).map(|_| sampler.sample()).collect::<Result<Vec<_>, _>>()?;
        let (z, x, gt) = collate::<T>(&samples)?;
        let (loss, grads, bn) = match compute_gradients(weights, &z, &x, &gt, &cfg.loss) {
            Ok(r) => r,
            Err(TrainError::NonFinite { term }) => {
                return Err(TrainError::Diverged {
                    step: step + 1,
                    reason: format!("non-finite {term} loss"),
                })
            }
            Err(e) => return Err(e),
        };
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        opt.apply(weights, &grads, lr).map_err(|e| match e {
            TrainError::NonFinite { term } => TrainError::Diverged {
                step: step + 1,
                reason: format!("non-finite {term}"),
            },
            other => other,
        })?;
        update_running_stats(weights, &bn, model.bn_momentum)?;
        emit(
            ReportLine {
                step: step + 1,
                lr: Some(lr),
                loss: Some(loss.total),
                focal: Some(loss.focal),
                giou: Some(loss.giou),
                l1: Some(loss.l1),
                eval_iou: None,
            },
            &mut lines,
        )?;
        let last = step + 1 == cfg.steps;
        if !last && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            emit(eval_line(step + 1, mean(&evaluate(weights, &heldout, SpikeMode::Train)?)), &mut lines)?;
        }
    }
    let mode = if cfg.final_eval_infer { SpikeMode::Infer } else { SpikeMode::Train };
    let per_sequence_iou = if cfg.steps == 0 {
        Vec::new()
    } else {
        evaluate(weights, &heldout, mode)?
    };
    let final_iou = if cfg.steps == 0 {
        lines[0].eval_iou.expect("initial eval")
    } else {
        let m = mean(&per_sequence_iou);
        emit(eval_line(cfg.steps, m), &mut lines)?;
        m
    };
    Ok(TrainReport {
        lines,
        final_iou,
        per_sequence_iou,
    })
}
