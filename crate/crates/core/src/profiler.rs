//! Operation counts, firing rates and the theoretical energy estimate.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Scalar, Tensor};
use crate::model::{
    forward, plan, predict, ForwardCtx, ForwardOptions, LayerKind, LayerRecord, ModelConfig, ModelError, SpikeMode, WeightStore,
};

#[derive(Debug, Error)]
pub enum ProfilerError {
    #[error("no firing statistics for spike layer {0}")]
    MissingFiring(String),
    #[error("invalid energy input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Energy per operation in picojoules (32-bit float, 45 nm).
pub const E_MAC_PJ: f64 = 4.6;
pub const E_AC_PJ: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: String,
    pub kind: LayerKind,
    /// Multiply-accumulates per sample and timestep.
    pub flops: u64,
}

pub fn conv_flops(k: usize, cin: usize, cout: usize, groups: usize, hout: usize, wout: usize) -> u64 {
    (k * k * (cin / groups) * cout * hout * wout) as u64
}

pub fn fc_flops(tokens: usize, din: usize, dout: usize) -> u64 {
    (tokens * din * dout) as u64
}

/// Both products of `Q (Kᵀ V)` for every head of width `d / heads`.
pub fn ssa_flops(tokens: usize, d: usize, heads: usize) -> u64 {
    let dh = d / heads;
    (2 * tokens * dh * dh * heads) as u64
}

pub fn count_flops(cfg: &ModelConfig) -> Vec<LayerFlops> {
    plan(cfg)
        .into_iter()
        .map(|l| LayerFlops {
            flops: l.flops(),
            layer: l.name,
            kind: l.kind,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiringStats {
    pub layer: String,
    /// Elements of the binary operand across all virtual steps.
    pub elements: u64,
    pub nonzero: u64,
    pub fr: f64,
    /// Attention sites: accumulations per sample and binary step.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub effective_ops: Option<f64>,
}

/// Share of nonzero entries of a spike tensor.
pub fn firing_of<T: Scalar>(layer: &str, spikes: &Tensor<T>) -> FiringStats {
    let elements = spikes.numel() as u64;
    let nonzero = spikes.count_nonzero() as u64;
    FiringStats {
        layer: layer.to_string(),
        elements,
        nonzero,
        fr: if elements == 0 { 0.0 } else { nonzero as f64 / elements as f64 },
        effective_ops: None,
    }
}

/// One entry per spike-consuming layer. Integer-coded operands count as
/// their `D`-plane binary expansion.
pub fn firing_from_records(records: &[LayerRecord]) -> Vec<FiringStats> {
    records
        .iter()
        .filter(|r| r.kind != LayerKind::FloatConv)
        .map(|r| FiringStats {
            layer: r.name.clone(),
            elements: r.elements * r.levels as u64,
            nonzero: r.spikes,
            fr: r.firing_rate(),
            effective_ops: r.effective_ops.map(|e| e as f64 / r.levels as f64),
        })
        .collect()
}

/// Instrumented eval forward; returns the firing table.
pub fn record_firing<T: Scalar>(
    weights: &WeightStore<T>,
    z: &Tensor<T>,
    x: &Tensor<T>,
    mode: SpikeMode,
) -> Result<Vec<FiringStats>, ProfilerError> {
    let (_, records) = predict(weights, z, x, mode)?;
    Ok(firing_from_records(&records))
}

/// Replaces every running statistic with the batch statistics of one
/// forward on `(z, x)`. Freshly initialised weights carry identity
/// statistics, under which almost nothing fires; calibrated statistics give
/// firing rates that reflect the input rather than the initialiser.
pub fn calibrate_batch_norm<T: Scalar>(weights: &mut WeightStore<T>, z: &Tensor<T>, x: &Tensor<T>) -> Result<usize, ProfilerError> {
    let options = ForwardOptions {
        requires_grad: false,
        ..ForwardOptions::train()
    };
    let updates = {
        let mut ctx = ForwardCtx::new(weights, options);
        forward(&mut ctx, z, x)?;
        ctx.bn_updates
    };
    for u in &updates {
        for (field, stat) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let name = format!("{}.bn.{field}", u.layer);
            let shape = weights.get(&name)?.shape().to_vec();
            weights.set(&name, Tensor::new(&shape, stat.clone()).map_err(ModelError::from)?)?;
        }
    }
    Ok(updates.len())
}

/// Iterative steps of the energy equation: `T × D` for I-LIF, `T` otherwise.
pub fn energy_timesteps(cfg: &ModelConfig) -> usize {
    cfg.timesteps * cfg.neuron.levels()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub layer: String,
    pub kind: LayerKind,
    pub flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fr: Option<f64>,
    /// Operations charged per step (MACs or ACs).
    pub ops: f64,
    pub energy_pj: f64,
    /// Same layer with the attention site charged at dense FLOPs.
    pub dense_energy_pj: f64,
    /// Float layers of the tracking head, flagged as separate line items.
    pub head_float: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub timesteps: usize,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub layers: Vec<LayerEnergy>,
    /// `E_MAC · Σ float FLOPs`, one step.
    pub mac_term_pj: f64,
    /// `E_AC · (Σ FLOPs · fr + Σ effective attention ops)`, one step.
    pub ac_term_pj: f64,
    pub total_pj: f64,
    /// Total when attention sites are charged at their dense FLOPs.
    pub total_dense_ssa_pj: f64,
    pub head_float_pj: f64,
}

impl EnergyReport {
    pub fn total_mj(&self) -> f64 {
        self.total_pj * 1e-9
    }

    pub fn write_json(&self, path: &Path) -> Result<(), ProfilerError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self).map_err(|e| ProfilerError::Invalid(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ProfilerError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "layer,kind,flops,fr,ops,energy_pj,dense_energy_pj,head_float")?;
        for l in &self.layers {
            let kind = serde_json::to_value(l.kind).map_err(|e| ProfilerError::Invalid(e.to_string()))?;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                l.layer,
                kind.as_str().unwrap_or_default(),
                l.flops,
                l.fr.map(|f| f.to_string()).unwrap_or_default(),
                l.ops,
                l.energy_pj,
                l.dense_energy_pj,
                l.head_float
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `E = T · (e_mac · Σ FL_float + e_ac · (Σ FL_spike · fr + Σ FL_SSA,eff))`.
pub fn energy(
    flops: &[LayerFlops],
    firing: &[FiringStats],
    timesteps: usize,
    e_mac: f64,
    e_ac: f64,
) -> Result<EnergyReport, ProfilerError> {
    if !(e_mac >= 0.0 && e_ac >= 0.0) {
        return Err(ProfilerError::Invalid("energy constants must be non-negative".into()));
    }
    let by_layer: BTreeMap<&str, &FiringStats> = firing.iter().map(|f| (f.layer.as_str(), f)).collect();
    let t = timesteps as f64;
    let mut layers = Vec::with_capacity(flops.len());
    let (mut mac_ops, mut ac_ops, mut dense_ac_ops, mut head_float) = (0.0, 0.0, 0.0, 0.0);
    for l in flops {
        let head = l.layer.starts_with("head.");
        let entry = match l.kind {
            LayerKind::FloatConv => {
                let ops = l.flops as f64;
                mac_ops += ops;
                let e = t * (e_mac * ops);
                if head {
                    head_float += e;
                }
                LayerEnergy {
                    layer: l.layer.clone(),
                    kind: l.kind,
                    flops: l.flops,
                    fr: None,
                    ops,
                    energy_pj: e,
                    dense_energy_pj: e,
                    head_float: head,
                }
            }
            kind => {
                let f = by_layer
                    .get(l.layer.as_str())
                    .ok_or_else(|| ProfilerError::MissingFiring(l.layer.clone()))?;
                if !(0.0..=1.0).contains(&f.fr) {
                    return Err(ProfilerError::Invalid(format!("{}: firing rate {}", l.layer, f.fr)));
                }
                let dense = l.flops as f64;
                let ops = match kind {
                    LayerKind::Ssa => f
                        .effective_ops
                        .ok_or_else(|| ProfilerError::MissingFiring(format!("{} (effective operations)", l.layer)))?,
                    _ => dense * f.fr,
                };
                let charged_dense = if kind == LayerKind::Ssa { dense } else { ops };
                ac_ops += ops;
                dense_ac_ops += charged_dense;
                LayerEnergy {
                    layer: l.layer.clone(),
                    kind,
                    flops: l.flops,
                    fr: Some(f.fr),
                    ops,
                    energy_pj: t * (e_ac * ops),
                    dense_energy_pj: t * (e_ac * charged_dense),
                    head_float: false,
                }
            }
        };
        layers.push(entry);
    }
    let mac_term = e_mac * mac_ops;
    let ac_term = e_ac * ac_ops;
    Ok(EnergyReport {
        timesteps,
        e_mac_pj: e_mac,
        e_ac_pj: e_ac,
        layers,
        mac_term_pj: mac_term,
        ac_term_pj: ac_term,
        total_pj: t * (mac_term + ac_term),
        total_dense_ssa_pj: t * (mac_term + e_ac * dense_ac_ops),
        head_float_pj: head_float,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{LayerOp, LayerSpec};

    fn hand_layers() -> (Vec<LayerFlops>, Vec<FiringStats>) {
        let flops = vec![
            LayerFlops { layer: "stem".into(), kind: LayerKind::FloatConv, flops: 500 },
            LayerFlops { layer: "fc".into(), kind: LayerKind::SpikeFc, flops: 1000 },
        ];
        let firing = vec![FiringStats { layer: "fc".into(), elements: 10, nonzero: 2, fr: 0.2, effective_ops: None }];
        (flops, firing)
    }

    #[test]
    fn hand_example_is_2480() {
        let (flops, firing) = hand_layers();
        let r = energy(&flops, &firing, 1, E_MAC_PJ, E_AC_PJ).unwrap();
        assert_eq!(r.total_pj, 2480.0);
        assert_eq!(energy(&flops, &firing, 2, E_MAC_PJ, E_AC_PJ).unwrap().total_pj, 4960.0);
        let silent = vec![FiringStats { fr: 0.0, ..firing[0].clone() }];
        assert_eq!(energy(&flops, &silent, 1, E_MAC_PJ, E_AC_PJ).unwrap().total_pj, 2300.0);
        assert!(matches!(energy(&flops, &[], 1, E_MAC_PJ, E_AC_PJ), Err(ProfilerError::MissingFiring(l)) if l == "fc"));
    }

    #[test]
    fn formula_examples() {
        assert_eq!(conv_flops(1, 3, 8, 1, 4, 4), 384);
        assert_eq!(conv_flops(3, 8, 8, 8, 4, 4), 1152);
        assert_eq!(fc_flops(3, 2, 2), 12);
        let dw = LayerSpec {
            name: "dw".into(),
            kind: LayerKind::SpikeConv,
            op: LayerOp::Conv { k: 3, stride: 1, pad: 1, groups: 8 },
            cin: 8,
            cout: 8,
            out: (4, 4),
            bn: true,
            bias: false,
        };
        assert_eq!(dw.flops(), 1152);
    }

    #[test]
    fn counting_oracle_for_random_spikes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 1000;
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.gen_range(0..=i));
        }
        let mut data = vec![0.0; n];
        for &i in &idx[..200] {
            data[i] = 1.0;
        }
        let f = firing_of("x", &Tensor::<f64>::from_f64(&[n], &data).unwrap());
        assert_eq!(f.fr, 0.2);
        assert_eq!(firing_of("ones", &Tensor::<f64>::ones(&[3, 4])).fr, 1.0);
    }

    #[test]
    fn first_and_final_head_convs_are_float() {
        let float: Vec<String> = count_flops(&ModelConfig::tiny())
            .into_iter()
            .filter(|l| l.kind == LayerKind::FloatConv)
            .map(|l| l.layer)
            .collect();
        assert_eq!(float, ["stem", "head.cls.conv5", "head.offset.conv5", "head.size.conv5"]);
    }

    #[test]
    fn zero_weights_silence_downstream_layers() {
        let cfg = ModelConfig::toy();
        let mut w = WeightStore::<f64>::init(&cfg, 0).unwrap();
        let names: Vec<String> = w.names().filter(|n| n.ends_with(".weight")).map(String::from).collect();
        for n in names {
            let shape = w.get(&n).unwrap().shape().to_vec();
            w.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let z = Tensor::full(&[1, 1, 3, 32, 32], 100.0);
        let x = Tensor::full(&[1, 1, 3, 64, 64], 100.0);
        let fr = record_firing(&w, &z, &x, SpikeMode::Infer).unwrap();
        assert!(fr.iter().all(|f| f.fr == 0.0), "{fr:?}");
    }

    #[test]
    fn calibration_matches_batch_statistics_forward() {
        let cfg = ModelConfig::toy();
        let mut w = WeightStore::<f64>::init(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::from_fn(&[1, 1, 3, 32, 32], |_| if rng.gen_bool(0.1) { 120.0 } else { 0.0 });
        let x = Tensor::from_fn(&[1, 1, 3, 64, 64], |_| if rng.gen_bool(0.1) { 120.0 } else { 0.0 });
        let reference = {
            let opts = ForwardOptions {
                requires_grad: false,
                mode: SpikeMode::Infer,
                ..ForwardOptions::train()
            };
            let mut ctx = ForwardCtx::new(&w, opts);
            forward(&mut ctx, &z, &x).unwrap();
            firing_from_records(&ctx.records)
        };
        let n = calibrate_batch_norm(&mut w, &z, &x).unwrap();
        assert!(n > 0);
        let calibrated = record_firing(&w, &z, &x, SpikeMode::Infer).unwrap();
        let active = calibrated.iter().filter(|f| f.fr > 0.0).count();
        assert!(active * 2 > calibrated.len(), "{active} of {} layers fire", calibrated.len());
        // Eval with the stored statistics reproduces the batch-statistics pass
        // up to the unbiased-variance correction.
        for (a, b) in reference.iter().zip(&calibrated).take(3) {
            assert_eq!(a.layer, b.layer);
            assert!((a.fr - b.fr).abs() < 0.05, "{}: {} vs {}", a.layer, a.fr, b.fr);
        }
    }

    #[test]
    fn report_totals_match_layer_sum() {
        let cfg = ModelConfig::toy();
        let w = WeightStore::<f32>::init(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::from_fn(&[1, 1, 3, 32, 32], |_| if rng.gen_bool(0.2) { 120.0f32 } else { 0.0 });
        let x = Tensor::from_fn(&[1, 1, 3, 64, 64], |_| if rng.gen_bool(0.2) { 120.0f32 } else { 0.0 });
        let fr = record_firing(&w, &z, &x, SpikeMode::Infer).unwrap();
        let r = energy(&count_flops(&cfg), &fr, energy_timesteps(&cfg), E_MAC_PJ, E_AC_PJ).unwrap();
        let sum: f64 = r.layers.iter().map(|l| l.energy_pj).sum();
        assert!((sum - r.total_pj).abs() <= 1e-9 * r.total_pj);
        let dense: f64 = r.layers.iter().map(|l| l.dense_energy_pj).sum();
        assert!((dense - r.total_dense_ssa_pj).abs() <= 1e-9 * r.total_dense_ssa_pj);
        let dir = tempfile::tempdir().unwrap();
        r.write_json(&dir.path().join("e.json")).unwrap();
        r.write_csv(&dir.path().join("e.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
        assert_eq!(csv.lines().count(), r.layers.len() + 1);
        assert!(csv.contains(",ssa,"));
    }

    proptest! {
        #[test]
        fn energy_is_monotone_in_rates_and_steps(f1 in 0.0f64..1.0, f2 in 0.0f64..1.0, t in 1usize..8) {
            let (flops, firing) = hand_layers();
            let at = |fr: f64, t: usize| {
                let f = vec![FiringStats { fr, ..firing[0].clone() }];
                energy(&flops, &f, t, E_MAC_PJ, E_AC_PJ).unwrap().total_pj
            };
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            prop_assert!(at(lo, t) <= at(hi, t));
            prop_assert!(at(lo, t) <= at(lo, t + 1));
        }
    }
}
