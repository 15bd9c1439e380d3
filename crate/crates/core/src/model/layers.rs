use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::autodiff::{Conv2dSpec, Scalar, Tensor, Var};
use crate::neurons::{
    first_violation, spike_ahead_expand, spike_count, spike_layer, Coding, NeuronKind, SpikePlacement, SpikeTensor,
};

use super::plan::LayerKind;
use super::{ModelError, WeightStore};

/// How I-LIF activations travel between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeMode {
    /// Integer-scaled values `k/D`, one pass per timestep.
    Train,
    /// Each value expanded into `D` binary planes (spike-ahead).
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: SpikeMode,
    /// Batch statistics in batch norm (and running-stat updates collected).
    pub batch_stats: bool,
    pub requires_grad: bool,
    /// Fail on the first spike operand off its coding grid.
    pub strict: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: SpikeMode::Train,
            batch_stats: true,
            requires_grad: true,
            strict: false,
        }
    }

    pub fn eval(mode: SpikeMode) -> Self {
        Self {
            mode,
            batch_stats: false,
            requires_grad: false,
            strict: false,
        }
    }
}

/// One entry per weight layer or attention site actually executed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    /// Dense MACs per sample per timestep.
    pub flops: u64,
    /// Elements of the operand tensor (one plane when expanded).
    pub elements: u64,
    /// Nonzero elements as the operand was presented.
    pub nonzero: u64,
    /// Unit spikes carried by the operand (`Σ S·D`).
    pub spikes: u64,
    /// Virtual steps per element: `D` for I-LIF, 1 otherwise.
    pub levels: usize,
    pub violations: u64,
    /// Accumulations triggered by nonzero spikes (attention sites only).
    pub effective_ops: Option<u64>,
    /// Operand, kept when the context retains activations.
    pub operand: Option<Tensor<f64>>,
}

impl LayerRecord {
    /// Share of nonzero elements in the binary operand, in `[0, 1]`.
    pub fn firing_rate(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.spikes as f64 / (self.elements as f64 * self.levels as f64)
        }
    }
}

/// Running-statistic update produced by a batch-statistics forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate<T> {
    pub layer: String,
    pub mean: Vec<T>,
    /// Unbiased batch variance.
    pub var: Vec<T>,
}

/// An activation between layers.
#[derive(Debug, Clone)]
pub enum Act<T: Scalar> {
    Real(Var<T>),
    Spikes { var: Var<T>, coding: Coding },
    /// `D` binary planes; their mean is the integer-coded value.
    Trains { planes: Vec<Var<T>> },
}

impl<T: Scalar> Act<T> {
    /// Value as seen by a linear consumer: trains averaged over planes.
    pub fn reconstruct(&self) -> Result<Var<T>, ModelError> {
        match self {
            Act::Real(v) | Act::Spikes { var: v, .. } => Ok(v.clone()),
            Act::Trains { planes } => {
                let mut acc = planes[0].clone();
                for p in &planes[1..] {
                    acc = acc.add(p)?;
                }
                Ok(acc.scale(T::one() / T::of(planes.len() as f64)))
            }
        }
    }

    fn levels(&self) -> usize {
        match self {
            Act::Trains { planes } => planes.len(),
            Act::Spikes {
                coding: Coding::IntegerScaled { d },
                ..
            } => *d,
            _ => 1,
        }
    }
}

/// Per-forward workspace: parameter bindings, records and BN updates.
pub struct ForwardCtx<'a, T: Scalar> {
    pub weights: &'a WeightStore<T>,
    pub options: ForwardOptions,
    vars: RefCell<BTreeMap<String, Var<T>>>,
    pub records: Vec<LayerRecord>,
    pub bn_updates: Vec<BnUpdate<T>>,
    /// Keep a copy of every spike operand in the records.
    pub retain_operands: bool,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn new(weights: &'a WeightStore<T>, options: ForwardOptions) -> Self {
        Self {
            weights,
            options,
            vars: RefCell::new(BTreeMap::new()),
            records: Vec::new(),
            bn_updates: Vec::new(),
            retain_operands: false,
        }
    }

    /// Binds a stored tensor, as a gradient leaf when training.
    pub fn param(&self, name: &str) -> Result<Var<T>, ModelError> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(v.clone());
        }
        let p = self
            .weights
            .parameter(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let v = Var::leaf(p.tensor.clone(), self.options.requires_grad && p.trainable);
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn gradients(&self) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect()
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    pub fn total_violations(&self) -> u64 {
        self.records.iter().map(|r| r.violations).sum()
    }

    /// Spiking neuron layer over a leading time axis of `steps`.
    pub fn sn(&self, x: &Var<T>, steps: usize) -> Result<Act<T>, ModelError> {
        let cfg = self.weights.config.neuron;
        let shape = x.shape().to_vec();
        let rest = x.value().numel() / steps;
        let s = spike_layer(&x.reshape(&[steps, rest])?, steps, &cfg)?.reshape(&shape)?;
        match (self.options.mode, cfg.kind) {
            (SpikeMode::Infer, NeuronKind::Ilif) => {
                let st = SpikeTensor {
                    values: s.value().clone(),
                    coding: cfg.coding(),
                };
                let expanded = spike_ahead_expand(&st, SpikePlacement::LeadingOnes)?;
                let n = s.value().numel();
                let planes = (0..cfg.d)
                    .map(|k| {
                        let data = expanded.values.data()[k * n..(k + 1) * n].to_vec();
                        Ok(Var::constant(Tensor::new(&shape, data)?))
                    })
                    .collect::<Result<Vec<_>, ModelError>>()?;
                Ok(Act::Trains { planes })
            }
            _ => Ok(Act::Spikes {
                var: s,
                coding: cfg.coding(),
            }),
        }
    }

    fn record(&mut self, name: &str, kind: LayerKind, flops: u64, act: &Act<T>) -> Result<(), ModelError> {
        let levels = act.levels();
        let (elements, nonzero, spikes, violations, operand) = match act {
            Act::Real(v) => {
                let val = v.value();
                (val.numel() as u64, val.count_nonzero() as u64, 0, 0, val)
            }
            Act::Spikes { var, coding } => {
                let val = var.value();
                (
                    val.numel() as u64,
                    val.count_nonzero() as u64,
                    spike_count(val.data(), *coding),
                    count_violations(val.data(), *coding),
                    val,
                )
            }
            Act::Trains { planes } => {
                let mut nz = 0;
                let mut viol = 0;
                for p in planes {
                    nz += p.value().count_nonzero() as u64;
                    viol += count_violations(p.value().data(), Coding::Binary);
                }
                (planes[0].value().numel() as u64, nz, nz, viol, planes[0].value())
            }
        };
        if violations > 0 && self.options.strict {
            return Err(ModelError::SpikePurity {
                layer: name.to_string(),
                violations,
            });
        }
        let operand = self.retain_operands.then(|| match act {
            Act::Trains { planes } => Tensor::concat(&planes.iter().map(|p| p.value()).collect::<Vec<_>>(), 0)
                .expect("planes share a shape")
                .cast(),
            _ => operand.cast(),
        });
        self.records.push(LayerRecord {
            name: name.to_string(),
            kind,
            flops,
            elements,
            nonzero,
            spikes,
            levels,
            violations,
            effective_ops: None,
            operand,
        });
        Ok(())
    }

    fn apply_linear(&self, act: &Act<T>, f: impl Fn(&Var<T>) -> Result<Var<T>, ModelError>) -> Result<Var<T>, ModelError> {
        match act {
            Act::Real(v) | Act::Spikes { var: v, .. } => f(v),
            Act::Trains { planes } => {
                // each plane is a binary operand; contributions accumulate
                let mut acc = f(&planes[0])?;
                for p in &planes[1..] {
                    acc = acc.add(&f(p)?)?;
                }
                Ok(acc.scale(T::one() / T::of(planes.len() as f64)))
            }
        }
    }

    /// Convolution (no bias unless stored) followed by batch norm when the
    /// layer has one.
    pub fn conv(&mut self, name: &str, kind: LayerKind, act: &Act<T>, spec: Conv2dSpec) -> Result<Var<T>, ModelError> {
        let w = self.param(&format!("{name}.weight"))?;
        let bias = self.weights.parameter(&format!("{name}.bias")).is_some();
        let b = if bias { Some(self.param(&format!("{name}.bias"))?) } else { None };
        if kind != LayerKind::FloatConv && bias {
            return Err(ModelError::Config(format!("{name}: spike-driven layer must not carry a bias")));
        }
        let y = self.apply_linear(act, |v| Ok(v.conv2d(&w, b.as_ref(), spec)?))?;
        let out_hw = y.shape()[2] * y.shape()[3];
        self.record(name, kind, (w.value().numel() * out_hw) as u64, act)?;
        self.maybe_bn(name, y, 1)
    }

    /// Token-wise linear map `[.., N, din] -> [.., N, dout]`, no bias.
    pub fn linear(&mut self, name: &str, act: &Act<T>) -> Result<Var<T>, ModelError> {
        let w = self.param(&format!("{name}.weight"))?;
        let shape = act_shape(act);
        let (din, dout) = (w.shape()[1], w.shape()[0]);
        if shape.last() != Some(&din) {
            return Err(ModelError::Config(format!("{name}: input width {shape:?} vs weight {:?}", w.shape())));
        }
        let tokens = shape[shape.len() - 2];
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().expect("non-empty") = dout;
        let y = self.apply_linear(act, |v| Ok(v.reshape(&[rows, din])?.linear(&w, None)?.reshape(&out_shape)?))?;
        self.record(name, LayerKind::SpikeFc, (tokens * din * dout) as u64, act)?;
        self.maybe_bn(name, y, out_shape.len() - 1)
    }

    fn maybe_bn(&mut self, name: &str, y: Var<T>, axis: usize) -> Result<Var<T>, ModelError> {
        if self.weights.parameter(&format!("{name}.bn.gamma")).is_none() {
            return Ok(y);
        }
        let gamma = self.param(&format!("{name}.bn.gamma"))?;
        let beta = self.param(&format!("{name}.bn.beta"))?;
        let eps = T::of(self.weights.config.bn_eps);
        if self.options.batch_stats {
            let (out, mean, var) = y.batch_norm_train(&gamma, &beta, axis, eps)?;
            let n = (y.value().numel() / gamma.value().numel()) as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                layer: name.to_string(),
                mean,
                var: var.into_iter().map(|v| v * T::of(unbias)).collect(),
            });
            Ok(out)
        } else {
            let rm = self.weights.get(&format!("{name}.bn.running_mean"))?;
            let rv = self.weights.get(&format!("{name}.bn.running_var"))?;
            Ok(y.batch_norm_eval(&gamma, &beta, rm.data(), rv.data(), axis, eps)?)
        }
    }

    /// Spike self-attention over `[B, N, d]` spike operands.
    pub fn ssa(&mut self, name: &str, q: &Act<T>, k: &Act<T>, v: &Act<T>) -> Result<Var<T>, ModelError> {
        let cfg = &self.weights.config;
        let heads = cfg.num_heads;
        let shape = act_shape(q);
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let scale = cfg.ssa_scale_value(d);
        let levels = q.levels();
        let (qv, kv, vv) = (q.reconstruct()?, k.reconstruct()?, v.reconstruct()?);
        let dh = d / heads;
        let effective = effective_ssa_ops(qv.value(), kv.value(), vv.value(), heads, levels) / b as u64;
        let mut violations = 0;
        let mut spikes = 0;
        let mut nonzero = 0;
        let mut operands = Vec::new();
        for a in [q, k, v] {
            let before = self.records.len();
            self.record(name, LayerKind::Ssa, 0, a)?;
            let r = self.records.pop().expect("just recorded");
            debug_assert_eq!(self.records.len(), before);
            violations += r.violations;
            spikes += r.spikes;
            nonzero += r.nonzero;
            operands.extend(r.operand);
        }
        // q, k and v in that order, each as presented to the product
        let operand = (operands.len() == 3).then(|| Tensor::concat(&operands.iter().collect::<Vec<_>>(), 0).expect("operands share a shape"));
        let out = ssa_var(&qv, &kv, &vv, heads, T::of(scale))?;
        self.records.push(LayerRecord {
            name: name.to_string(),
            kind: LayerKind::Ssa,
            flops: (2 * n * dh * dh * heads) as u64,
            elements: 3 * (b * n * d) as u64,
            nonzero,
            spikes,
            levels,
            violations,
            effective_ops: Some(effective),
            operand,
        });
        Ok(out)
    }
}

fn act_shape<T: Scalar>(act: &Act<T>) -> Vec<usize> {
    match act {
        Act::Real(v) | Act::Spikes { var: v, .. } => v.shape().to_vec(),
        Act::Trains { planes } => planes[0].shape().to_vec(),
    }
}

fn count_violations<T: Scalar>(data: &[T], coding: Coding) -> u64 {
    let mut count = 0;
    let mut rest = data;
    while let Some((i, _)) = first_violation(rest, coding) {
        count += 1;
        rest = &rest[i + 1..];
    }
    count
}

/// `Q (Kᵀ V) · s` per head on `[B, N, d]` operands.
pub fn ssa_var<T: Scalar>(q: &Var<T>, k: &Var<T>, v: &Var<T>, heads: usize, scale: T) -> Result<Var<T>, ModelError> {
    let shape = q.shape().to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = |x: &Var<T>| -> Result<Var<T>, ModelError> {
        Ok(x.reshape(&[b, n, heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * heads, n, dh])?)
    };
    let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
    let kv = kh.matmul(&vh, true, false)?;
    let out = qh.matmul(&kv, false, false)?.scale(scale);
    Ok(out.reshape(&[b, heads, n, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?)
}

/// Accumulations of a per-plane binary evaluation of `Q (Kᵀ V)`: each
/// coincident `(k, v)` spike pair adds once, each `q` spike adds a row of `d_h`.
pub fn effective_ssa_ops<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize, levels: usize) -> u64 {
    let shape = q.shape();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let lv = levels as f64;
    let count = |data: &[T], row: usize, h: usize, plane: usize| -> u64 {
        data[row * d + h * dh..row * d + (h + 1) * dh]
            .iter()
            .filter(|&&x| (x.f64() * lv).round() as usize > plane)
            .count() as u64
    };
    let mut total = 0;
    for row in 0..b * n {
        for h in 0..heads {
            for plane in 0..levels {
                total += count(k.data(), row, h, plane) * count(v.data(), row, h, plane);
                total += count(q.data(), row, h, plane) * dh as u64;
            }
        }
    }
    total
}
