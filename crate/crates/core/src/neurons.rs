//! Spiking neuron dynamics shared by IF, LIF and integer-valued LIF.
//!
//! Every kind follows the same three-step update:
//!
//! ```text
//! U  = H + (X - (H - U_rest)) / tau
//! S  = f(U - U_thr)
//! H' = U * (1 - S)
//! ```
//!
//! IF and LIF fire through a Heaviside step; I-LIF emits `clip(round(x), 0, D) / D`
//! and is expanded into `D` binary spikes at inference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuronError {
    #[error("invalid neuron config: {0}")]
    Config(String),
    #[error("state shape {state:?} does not match input shape {input:?}")]
    Shape { state: Vec<usize>, input: Vec<usize> },
    #[error("value {value} at index {index} is not on the 1/{d} grid")]
    OffGrid { index: usize, value: f64, d: usize },
    #[error("expected integer-scaled spikes")]
    Coding,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeuronKind {
    If,
    Lif,
    Ilif,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuronConfig {
    pub kind: NeuronKind,
    pub tau: f64,
    pub u_thr: f64,
    pub u_rest: f64,
    /// Virtual timesteps (I-LIF only).
    pub d: usize,
    pub surrogate_width: f64,
    /// I-LIF only: `H' = U - S·D` instead of `H' = U·(1 - S)`.
    pub soft_reset: bool,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self::ilif(4)
    }
}

impl NeuronConfig {
    pub fn if_neuron(u_thr: f64) -> Self {
        Self {
            kind: NeuronKind::If,
            tau: 1.0,
            u_thr,
            u_rest: 0.0,
            d: 1,
            surrogate_width: 0.5,
            soft_reset: false,
        }
    }

    pub fn lif(tau: f64, u_thr: f64) -> Self {
        Self {
            kind: NeuronKind::Lif,
            tau,
            ..Self::if_neuron(u_thr)
        }
    }

    pub fn ilif(d: usize) -> Self {
        Self {
            kind: NeuronKind::Ilif,
            tau: 2.0,
            u_thr: 0.0,
            u_rest: 0.0,
            d,
            surrogate_width: 0.5,
            soft_reset: false,
        }
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        let bad = |m: String| Err(NeuronError::Config(m));
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return bad(format!("tau must be >= 1, got {}", self.tau));
        }
        if !(self.surrogate_width > 0.0) {
            return bad(format!("surrogate width must be positive, got {}", self.surrogate_width));
        }
        match self.kind {
            NeuronKind::If if self.tau != 1.0 => bad(format!("IF requires tau = 1, got {}", self.tau)),
            NeuronKind::Lif if self.tau <= 1.0 => bad(format!("LIF requires tau > 1, got {}", self.tau)),
            NeuronKind::Ilif if self.u_thr != 0.0 || self.u_rest != 0.0 => {
                bad("I-LIF requires u_thr = u_rest = 0".into())
            }
            NeuronKind::Ilif if self.d == 0 => bad("I-LIF requires D >= 1".into()),
            _ => Ok(()),
        }
    }

    pub fn coding(&self) -> Coding {
        match self.kind {
            NeuronKind::Ilif => Coding::IntegerScaled { d: self.d },
            _ => Coding::Binary,
        }
    }

    /// Spike levels per neuron per step: `D` for I-LIF, 1 otherwise.
    pub fn levels(&self) -> usize {
        match self.kind {
            NeuronKind::Ilif => self.d,
            _ => 1,
        }
    }

    /// The firing function `f(u - u_thr)`.
    pub fn fire(&self, x: f64) -> f64 {
        match self.kind {
            NeuronKind::Ilif => {
                let d = self.d as f64;
                x.round().clamp(0.0, d) / d
            }
            _ => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative of the firing function's pre-scale shape, per neuron kind.
    /// IF/LIF: `1/(2w)` inside `|x| < w`. I-LIF: 1 on the open clip range.
    pub fn surrogate(&self, x: f64) -> f64 {
        match self.kind {
            NeuronKind::Ilif => {
                if x > 0.0 && x < self.d as f64 {
                    1.0
                } else {
                    0.0
                }
            }
            _ => {
                let w = self.surrogate_width;
                if x.abs() < w {
                    1.0 / (2.0 * w)
                } else {
                    0.0
                }
            }
        }
    }

    /// `dS/dU` used in backward: the surrogate, scaled by `1/D` for I-LIF.
    fn spike_grad(&self, x: f64) -> f64 {
        self.surrogate(x) / self.levels() as f64
    }

    fn reset(&self, u: f64, s: f64) -> f64 {
        if self.soft_reset && self.kind == NeuronKind::Ilif {
            u - s * self.d as f64
        } else {
            u * (1.0 - s)
        }
    }

    fn integrate(&self, h: f64, x: f64) -> f64 {
        h + (x - (h - self.u_rest)) / self.tau
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Coding {
    Binary,
    IntegerScaled { d: usize },
}

/// Spike activations with their coding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTensor<T: Scalar> {
    pub values: Tensor<T>,
    pub coding: Coding,
}

impl<T: Scalar> SpikeTensor<T> {
    /// Checks the coding invariant; returns the first offending index.
    pub fn validate(&self) -> Result<(), NeuronError> {
        match first_violation(self.values.data(), self.coding) {
            None => Ok(()),
            Some((index, value)) => Err(NeuronError::OffGrid {
                index,
                value,
                d: match self.coding {
                    Coding::Binary => 1,
                    Coding::IntegerScaled { d } => d,
                },
            }),
        }
    }

    /// Number of unit spikes represented: `Σ S·D` for integer coding.
    pub fn spike_count(&self) -> u64 {
        spike_count(self.values.data(), self.coding)
    }
}

/// Index and value of the first element off the coding grid.
pub fn first_violation<T: Scalar>(values: &[T], coding: Coding) -> Option<(usize, f64)> {
    let d = match coding {
        Coding::Binary => 1.0,
        Coding::IntegerScaled { d } => d as f64,
    };
    values.iter().enumerate().find_map(|(i, &v)| {
        // compare against the grid point as represented in `T`
        let k = (v.f64() * d).round();
        let ok = (0.0..=d).contains(&k) && v == T::of(k / d);
        (!ok).then(|| (i, v.f64()))
    })
}

pub fn spike_count<T: Scalar>(values: &[T], coding: Coding) -> u64 {
    let d = match coding {
        Coding::Binary => 1.0,
        Coding::IntegerScaled { d } => d as f64,
    };
    values.iter().map(|&v| (v.f64() * d).round() as u64).sum()
}

/// Membrane potential carried between steps; zero at sequence start.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState<T: Scalar> {
    pub h: Tensor<T>,
}

impl<T: Scalar> NeuronState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { h: Tensor::zeros(shape) }
    }
}

/// One update of the unified neuron equations.
pub fn neuron_step<T: Scalar>(
    state: &NeuronState<T>,
    x: &Tensor<T>,
    config: &NeuronConfig,
) -> Result<(SpikeTensor<T>, NeuronState<T>), NeuronError> {
    config.validate()?;
    if state.h.shape() != x.shape() {
        return Err(NeuronError::Shape {
            state: state.h.shape().to_vec(),
            input: x.shape().to_vec(),
        });
    }
    let mut s = Vec::with_capacity(x.numel());
    let mut h = Vec::with_capacity(x.numel());
    for (&hp, &xi) in state.h.data().iter().zip(x.data()) {
        let u = config.integrate(hp.f64(), xi.f64());
        let si = config.fire(u - config.u_thr);
        s.push(T::of(si));
        h.push(T::of(config.reset(u, si)));
    }
    Ok((
        SpikeTensor {
            values: Tensor::new(x.shape(), s)?,
            coding: config.coding(),
        },
        NeuronState {
            h: Tensor::new(x.shape(), h)?,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpikePlacement {
    /// `k` ones followed by `D - k` zeros.
    #[default]
    LeadingOnes,
}

/// Expands integer-scaled spikes `k/D` into `D` binary planes stacked on a
/// new leading axis.
pub fn spike_ahead_expand<T: Scalar>(
    s: &SpikeTensor<T>,
    policy: SpikePlacement,
) -> Result<SpikeTensor<T>, NeuronError> {
    let Coding::IntegerScaled { d } = s.coding else {
        return Err(NeuronError::Coding);
    };
    s.validate()?;
    let n = s.values.numel();
    let mut out = vec![T::zero(); d * n];
    for (i, &v) in s.values.data().iter().enumerate() {
        let k = (v.f64() * d as f64).round() as usize;
        match policy {
            SpikePlacement::LeadingOnes => {
                for step in 0..k {
                    out[step * n + i] = T::one();
                }
            }
        }
    }
    let mut shape = vec![d];
    shape.extend_from_slice(s.values.shape());
    Ok(SpikeTensor {
        values: Tensor::new(&shape, out)?,
        coding: Coding::Binary,
    })
}

/// Surrogate derivative evaluated elementwise on `u - u_thr`.
pub fn surrogate_grad<T: Scalar>(u_minus_thr: &Tensor<T>, config: &NeuronConfig) -> Tensor<T> {
    u_minus_thr.map(|x| T::of(config.surrogate(x.f64())))
}

/// Multi-step spiking layer over a leading time axis of length `steps`.
///
/// Backward runs through time with the surrogate derivative; the reset path
/// is detached (`dH/dU = 1 - S`).
pub fn spike_layer<T: Scalar>(x: &Var<T>, steps: usize, config: &NeuronConfig) -> Result<Var<T>, NeuronError> {
    config.validate()?;
    let shape = x.shape().to_vec();
    let total = x.value().numel();
    if steps == 0 || shape.first() != Some(&steps) {
        return Err(NeuronError::Config(format!("input {shape:?} lacks a leading time axis of {steps}")));
    }
    let n = total / steps;
    let xd = x.value().data();
    let mut s = vec![T::zero(); total];
    let mut u = vec![T::zero(); total];
    let mut h = vec![0.0f64; n];
    for t in 0..steps {
        for i in 0..n {
            let k = t * n + i;
            let ui = config.integrate(h[i], xd[k].f64());
            let si = config.fire(ui - config.u_thr);
            h[i] = config.reset(ui, si);
            u[k] = T::of(ui);
            s[k] = T::of(si);
        }
    }
    let cfg = *config;
    let spikes = s.clone();
    let value = Tensor::new(&shape, s)?;
    Ok(Var::custom(
        value,
        &[x],
        Box::new(move |g| {
            let mut gx = vec![T::zero(); total];
            let mut gh = vec![0.0f64; n];
            let decay = 1.0 - 1.0 / cfg.tau;
            for t in (0..steps).rev() {
                for i in 0..n {
                    let k = t * n + i;
                    let (ui, si) = (u[k].f64(), spikes[k].f64());
                    let reset_keep = if cfg.soft_reset && cfg.kind == NeuronKind::Ilif { 1.0 } else { 1.0 - si };
                    let gu = g[k].f64() * cfg.spike_grad(ui - cfg.u_thr) + gh[i] * reset_keep;
                    gx[k] = T::of(gu / cfg.tau);
                    gh[i] = gu * decay;
                }
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn lif_fires_and_resets() {
        let cfg = NeuronConfig::lif(2.0, 0.5);
        let (s, st) = neuron_step(&NeuronState::zeros(&[1]), &t1(1.2), &cfg).unwrap();
        assert_eq!((s.values.item(), st.h.item()), (1.0, 0.0));
        let (s, st) = neuron_step(&NeuronState::zeros(&[1]), &t1(0.8), &cfg).unwrap();
        assert_eq!(s.values.item(), 0.0);
        assert!((st.h.item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ilif_firing_function() {
        let cfg = NeuronConfig::ilif(4);
        assert_eq!(cfg.fire(2.3), 0.5);
        assert_eq!(cfg.fire(7.0), 1.0);
        assert_eq!(cfg.fire(-1.0), 0.0);
    }

    #[test]
    fn if_step_matches_symbolic_evaluation() {
        // at tau = 1: U = H + (X - H + u_rest) = X + u_rest, independent of H
        let cfg = NeuronConfig { u_rest: 0.1, ..NeuronConfig::if_neuron(10.0) };
        for (h, x) in [(0.0, 0.3), (2.5, -1.0), (-3.0, 4.0)] {
            let state = NeuronState { h: t1(h) };
            let (s, st) = neuron_step(&state, &t1(x), &cfg).unwrap();
            assert_eq!(s.values.item(), 0.0);
            assert_eq!(st.h.item(), h + (x - (h - 0.1)));
            assert!((st.h.item() - (x + 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn config_invariants() {
        assert!(NeuronConfig { tau: 2.0, ..NeuronConfig::if_neuron(1.0) }.validate().is_err());
        assert!(NeuronConfig::lif(1.0, 1.0).validate().is_err());
        assert!(NeuronConfig { u_thr: 0.5, ..NeuronConfig::ilif(4) }.validate().is_err());
        assert!(NeuronConfig { surrogate_width: 0.0, ..NeuronConfig::lif(2.0, 1.0) }.validate().is_err());
        assert!(NeuronConfig::ilif(4).validate().is_ok());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = NeuronConfig::lif(2.0, 0.5);
        let err = neuron_step(&NeuronState::zeros(&[2]), &t1(0.0), &cfg).unwrap_err();
        assert!(matches!(err, NeuronError::Shape { .. }));
    }

    #[test]
    fn spike_ahead_examples() {
        let s = SpikeTensor {
            values: Tensor::<f64>::from_f64(&[3], &[0.5, 0.0, 1.0]).unwrap(),
            coding: Coding::IntegerScaled { d: 4 },
        };
        let e = spike_ahead_expand(&s, SpikePlacement::LeadingOnes).unwrap();
        assert_eq!(e.values.shape(), &[4, 3]);
        let train = |i: usize| (0..4).map(|k| e.values.data()[k * 3 + i]).collect::<Vec<_>>();
        assert_eq!(train(0), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(train(1), vec![0.0; 4]);
        assert_eq!(train(2), vec![1.0; 4]);
        let off = SpikeTensor { values: t1(0.3), coding: Coding::IntegerScaled { d: 4 } };
        assert!(matches!(spike_ahead_expand(&off, SpikePlacement::LeadingOnes), Err(NeuronError::OffGrid { .. })));
        let bin = SpikeTensor { values: t1(1.0), coding: Coding::Binary };
        assert!(matches!(spike_ahead_expand(&bin, SpikePlacement::LeadingOnes), Err(NeuronError::Coding)));
    }

    #[test]
    fn surrogate_examples() {
        let cfg = NeuronConfig::lif(2.0, 1.0);
        let g = surrogate_grad(&Tensor::<f64>::from_f64(&[2], &[0.0, 2.0]).unwrap(), &cfg);
        assert_eq!(g.data(), &[1.0, 0.0]);
        let ilif = NeuronConfig::ilif(4);
        let g = surrogate_grad(&Tensor::<f64>::from_f64(&[4], &[-0.1, 0.2, 3.9, 4.0]).unwrap(), &ilif);
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn rectangular_surrogate_has_unit_mass() {
        // a steep sigmoid stands in for the Heaviside; its derivative integrates to 1
        let cfg = NeuronConfig::lif(2.0, 1.0);
        let (lo, hi, n) = (-2.0f64, 2.0f64, 400_000);
        let dx = (hi - lo) / n as f64;
        let smooth = |x: f64| 1.0 / (1.0 + (-x / 0.05).exp());
        let (mut rect, mut fd) = (0.0, 0.0);
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * dx;
            rect += cfg.surrogate(x) * dx;
            fd += (smooth(x + dx / 2.0) - smooth(x - dx / 2.0)) / dx * dx;
        }
        assert!((rect - 1.0).abs() < 1e-6, "rect mass {rect}");
        assert!((fd - rect).abs() < 1e-6, "smoothed mass {fd}");
    }

    #[test]
    fn spike_layer_matches_stepwise_updates() {
        let cfg = NeuronConfig::lif(2.0, 0.5);
        let xs = [0.6, 0.9, 0.1, 1.5, -0.3, 0.7];
        let x = Tensor::<f64>::from_f64(&[3, 2], &xs).unwrap();
        let out = spike_layer(&Var::constant(x), 3, &cfg).unwrap();
        let mut state = NeuronState::<f64>::zeros(&[2]);
        for t in 0..3 {
            let (s, next) = neuron_step(&state, &Tensor::from_f64(&[2], &xs[t * 2..t * 2 + 2]).unwrap(), &cfg).unwrap();
            assert_eq!(&out.value().data()[t * 2..t * 2 + 2], s.values.data());
            state = next;
        }
    }

    #[test]
    fn spike_layer_gradient_matches_surrogate_forward() {
        // f is replaced by a ramp whose true derivative is the surrogate. The
        // reset keeps the true spike, which is piecewise constant in u.
        let cfg = NeuronConfig { tau: 2.0, ..NeuronConfig::ilif(4) };
        let xs = [1.3, 6.1, 2.9, -0.7, 3.3, 0.9];
        let weights = [0.3, -1.2, 0.8, 0.5, 2.0, -0.4];
        let xv = Var::param(Tensor::<f64>::from_f64(&[2, 3], &xs).unwrap());
        let y = spike_layer(&xv, 2, &cfg).unwrap();
        y.mul(&Var::constant(Tensor::from_f64(&[2, 3], &weights).unwrap())).unwrap().sum().backward().unwrap();
        let analytic = xv.grad().unwrap();
        let ramp_model = |x: &[f64]| {
            let mut h = [0.0; 3];
            let mut acc = 0.0;
            for t in 0..2 {
                for i in 0..3 {
                    let u = h[i] + (x[t * 3 + i] - h[i]) / cfg.tau;
                    let s_ramp = u.clamp(0.0, 4.0) / 4.0;
                    let s_true = cfg.fire(u);
                    acc += weights[t * 3 + i] * s_ramp;
                    h[i] = u * (1.0 - s_true);
                }
            }
            acc
        };
        for k in 0..6 {
            let mut p = xs;
            let mut m = xs;
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let numeric = (ramp_model(&p) - ramp_model(&m)) / 2e-6;
            let a = analytic.data()[k];
            assert!((a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()).max(1e-2), "k={k}: {a} vs {numeric}");
        }
    }

    fn arb_grid(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0..=d, 1..64).prop_map(move |ks| ks.into_iter().map(|k| k as f64 / d as f64).collect())
    }

    proptest! {
        #[test]
        fn expansion_reconstructs_exactly(d in 1usize..9, seed in any::<u64>()) {
            let vals: Vec<f64> = {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                (0..50).map(|_| rng.gen_range(0..=d) as f64 / d as f64).collect()
            };
            let s = SpikeTensor { values: Tensor::<f64>::from_f64(&[50], &vals).unwrap(), coding: Coding::IntegerScaled { d } };
            let e = spike_ahead_expand(&s, SpikePlacement::LeadingOnes).unwrap();
            prop_assert!(e.validate().is_ok());
            prop_assert_eq!(e.spike_count(), s.spike_count());
            for i in 0..50 {
                let ones: f64 = (0..d).map(|k| e.values.data()[k * 50 + i]).sum();
                prop_assert_eq!(ones / d as f64, vals[i]);
            }
        }

        #[test]
        fn binary_neurons_emit_binary_spikes_and_hard_reset(xs in prop::collection::vec(-3.0f64..3.0, 1..40), tau in 1.0f64..4.0) {
            let cfg = if tau == 1.0 { NeuronConfig::if_neuron(0.5) } else { NeuronConfig::lif(tau, 0.5) };
            let x = Tensor::<f64>::from_f64(&[xs.len()], &xs).unwrap();
            let mut state = NeuronState::zeros(&[xs.len()]);
            for _ in 0..3 {
                let (s, next) = neuron_step(&state, &x, &cfg).unwrap();
                prop_assert!(s.validate().is_ok());
                for (sv, hv) in s.values.data().iter().zip(next.h.data()) {
                    if *sv == 1.0 { prop_assert_eq!(*hv, 0.0); }
                }
                state = next;
            }
        }

        #[test]
        fn ilif_outputs_on_grid(xs in prop::collection::vec(-10.0f64..10.0, 1..40), d in 1usize..8) {
            let cfg = NeuronConfig::ilif(d);
            let x = Tensor::<f64>::from_f64(&[xs.len()], &xs).unwrap();
            let (s, _) = neuron_step(&NeuronState::zeros(&[xs.len()]), &x, &cfg).unwrap();
            prop_assert!(s.validate().is_ok());
            for v in s.values.data() {
                let k = v * d as f64;
                prop_assert!(k == k.round() && (0.0..=d as f64).contains(&k));
            }
        }

        #[test]
        fn grid_values_validate(vals in arb_grid(4)) {
            let s = SpikeTensor { values: Tensor::<f64>::from_f64(&[vals.len()], &vals).unwrap(), coding: Coding::IntegerScaled { d: 4 } };
            prop_assert!(s.validate().is_ok());
        }
    }
}
