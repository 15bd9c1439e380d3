use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor, Var};

use super::TrainError;

/// Probabilities are kept inside `[ε, 1 − ε]` before taking logs.
pub const FOCAL_EPS: f64 = 1e-6;
const FOCAL_ALPHA: i32 = 2;
const FOCAL_BETA: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_iou: f64,
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_iou: 2.0,
            lambda_l1: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda_iou >= 0.0 && self.lambda_l1 >= 0.0 {
            Ok(())
        } else {
            Err(TrainError::Config("loss weights must be non-negative".into()))
        }
    }
}

/// Gaussian target on a `side × side` map with an exact 1 at the cell
/// holding the normalised centre `(cx, cy)`.
pub fn gaussian_target(side: usize, cx: f64, cy: f64, sigma: f64) -> Vec<f64> {
    let (pc, pr) = (center_cell(side, cx), center_cell(side, cy));
    (0..side * side)
        .map(|i| {
            let (r, c) = ((i / side) as f64 - pr as f64, (i % side) as f64 - pc as f64);
            (-(r * r + c * c) / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Map cell along one axis containing a normalised coordinate.
pub fn center_cell(side: usize, v: f64) -> usize {
    ((v * side as f64).floor().max(0.0) as usize).min(side - 1)
}

/// Weighted focal loss on `[B, HW]` probabilities against `[B, HW]` targets
/// carrying exactly one 1.0 per row; normalised by the number of peaks.
pub fn focal_loss<T: Scalar>(prob: &Var<T>, target: &Tensor<T>) -> Result<Var<T>, TrainError> {
    if prob.shape() != target.shape() || target.shape().len() != 2 {
        return Err(TrainError::Shape(format!("focal: {:?} vs {:?}", prob.shape(), target.shape())));
    }
    let cols = target.shape()[1];
    for (b, row) in target.data().chunks(cols).enumerate() {
        let peaks = row.iter().filter(|&&y| y == T::one()).count();
        if peaks != 1 || row.iter().any(|&y| y < T::zero() || y > T::one()) {
            return Err(TrainError::Shape(format!("focal target row {b} needs one unit peak in [0, 1]")));
        }
    }
    let one = T::one();
    let pos = target.map(|y| if y == one { one } else { T::zero() });
    let neg = target.map(|y| if y == one { T::zero() } else { (one - y).powi(FOCAL_BETA) });
    let eps = T::of(FOCAL_EPS);
    let p = prob.clamp(eps, one - eps);
    let q = p.neg().add_scalar(one);
    let pow = |v: &Var<T>, k: i32| -> Result<Var<T>, TrainError> {
        let mut acc = v.clone();
        for _ in 1..k {
            acc = acc.mul(v)?;
        }
        Ok(acc)
    };
    let pos_term = pow(&q, FOCAL_ALPHA)?.mul(&p.ln())?.mul(&Var::constant(pos))?;
    let neg_term = pow(&p, FOCAL_ALPHA)?.mul(&q.ln())?.mul(&Var::constant(neg))?;
    let peaks = target.shape()[0] as f64;
    Ok(pos_term.add(&neg_term)?.sum().scale(T::of(-1.0 / peaks)))
}

fn columns<T: Scalar>(b: &Var<T>) -> Result<[Var<T>; 4], TrainError> {
    Ok([b.narrow(1, 0, 1)?, b.narrow(1, 1, 1)?, b.narrow(1, 2, 1)?, b.narrow(1, 3, 1)?])
}

fn check_boxes<T: Scalar>(pred: &Var<T>, gt: &Tensor<T>) -> Result<(), TrainError> {
    let s = gt.shape();
    if s.len() != 2 || s[1] != 4 || pred.shape() != s {
        return Err(TrainError::Shape(format!("boxes: {:?} vs {:?}", pred.shape(), s)));
    }
    if gt.data().chunks(4).any(|b| !(b[2] > T::zero() && b[3] > T::zero())) {
        return Err(TrainError::DegenerateBox);
    }
    Ok(())
}

/// Mean `1 − GIoU` over `[B, 4]` centre-form boxes.
pub fn giou_loss<T: Scalar>(pred: &Var<T>, gt: &Tensor<T>) -> Result<Var<T>, TrainError> {
    check_boxes(pred, gt)?;
    let half = T::of(0.5);
    let corners = |b: &Var<T>| -> Result<[Var<T>; 6], TrainError> {
        let [cx, cy, w, h] = columns(b)?;
        let (hw, hh) = (w.scale(half), h.scale(half));
        Ok([cx.sub(&hw)?, cy.sub(&hh)?, cx.add(&hw)?, cy.add(&hh)?, w, h])
    };
    let [px0, py0, px1, py1, pw, ph] = corners(pred)?;
    let [gx0, gy0, gx1, gy1, gw, gh] = corners(&Var::constant(gt.clone()))?;
    let zero = Var::constant(Tensor::zeros(px0.shape()));
    let iw = px1.minimum(&gx1)?.sub(&px0.maximum(&gx0)?)?.maximum(&zero)?;
    let ih = py1.minimum(&gy1)?.sub(&py0.maximum(&gy0)?)?.maximum(&zero)?;
    let inter = iw.mul(&ih)?;
    let union = pw.mul(&ph)?.add(&gw.mul(&gh)?)?.sub(&inter)?;
    let cw = px1.maximum(&gx1)?.sub(&px0.minimum(&gx0)?)?;
    let ch = py1.maximum(&gy1)?.sub(&py0.minimum(&gy0)?)?;
    let hull = cw.mul(&ch)?;
    let giou = inter.div(&union)?.sub(&hull.sub(&union)?.div(&hull)?)?;
    Ok(giou.neg().add_scalar(T::one()).mean())
}

/// Mean absolute difference over all box components.
pub fn l1_loss<T: Scalar>(pred: &Var<T>, gt: &Tensor<T>) -> Result<Var<T>, TrainError> {
    check_boxes(pred, gt)?;
    Ok(pred.sub(&Var::constant(gt.clone()))?.abs().mean())
}

/// The three scalar loss terms of one step.
#[derive(Debug, Clone)]
pub struct LossTerms<T: Scalar> {
    pub cls: Var<T>,
    pub giou: Var<T>,
    pub l1: Var<T>,
}

pub fn total_loss<T: Scalar>(terms: &LossTerms<T>, weights: &LossWeights) -> Result<Var<T>, TrainError> {
    weights.validate()?;
    for (name, v) in [("focal", &terms.cls), ("giou", &terms.giou), ("l1", &terms.l1)] {
        if !v.value().data().iter().all(|x| x.f64().is_finite()) {
            return Err(TrainError::NonFinite { term: name.to_string() });
        }
    }
    Ok(terms
        .cls
        .add(&terms.giou.scale(T::of(weights.lambda_iou)))?
        .add(&terms.l1.scale(T::of(weights.lambda_l1)))?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn boxes(data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[data.len() / 4, 4], data).unwrap()
    }

    fn scalar(v: f64) -> Var<f64> {
        Var::param(Tensor::scalar(v))
    }

    #[test]
    fn weighted_sum_of_unit_terms_is_eight() {
        let t = LossTerms { cls: scalar(1.0), giou: scalar(1.0), l1: scalar(1.0) };
        assert_eq!(total_loss(&t, &LossWeights::default()).unwrap().value().item(), 8.0);
        let z = LossTerms { cls: scalar(0.0), giou: scalar(0.0), l1: scalar(0.0) };
        assert_eq!(total_loss(&z, &LossWeights::default()).unwrap().value().item(), 0.0);
    }

    #[test]
    fn nan_term_is_named() {
        let t = LossTerms { cls: scalar(1.0), giou: scalar(f64::NAN), l1: scalar(1.0) };
        match total_loss(&t, &LossWeights::default()) {
            Err(TrainError::NonFinite { term }) => assert_eq!(term, "giou"),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn disjoint_unit_boxes() {
        let pred = Var::param(boxes(&[0.5, 0.5, 1.0, 1.0]));
        let gt = boxes(&[2.5, 0.5, 1.0, 1.0]);
        let loss = giou_loss(&pred, &gt).unwrap().value().item();
        assert!((loss - 4.0 / 3.0).abs() < 1e-9, "{loss}");
        let same = giou_loss(&Var::param(gt.clone()), &gt).unwrap().value().item();
        assert_eq!(same, 0.0);
        assert_eq!(l1_loss(&Var::param(gt.clone()), &gt).unwrap().value().item(), 0.0);
        assert!(matches!(giou_loss(&pred, &boxes(&[0.5, 0.5, 0.0, 1.0])), Err(TrainError::DegenerateBox)));
    }

    #[test]
    fn giou_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mut gen = |n: usize| -> Vec<f64> {
            (0..n)
                .flat_map(|_| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.01..3.0), rng.gen_range(0.01..3.0)])
                .collect()
        };
        let (a, b) = (gen(n), gen(n));
        for (pa, pb) in a.chunks(4).zip(b.chunks(4)) {
            let l = giou_loss(&Var::constant(boxes(pa)), &boxes(pb)).unwrap().value().item();
            assert!((0.0..=2.0).contains(&l), "{pa:?} {pb:?} -> {l}");
        }
    }

    #[test]
    fn focal_matches_direct_summation() {
        let side = 16;
        let target = gaussian_target(side, 0.3, 0.6, 1.0);
        assert_eq!(target.iter().filter(|&&y| y == 1.0).count(), 1);
        let y = Tensor::from_f64(&[1, side * side], &target).unwrap();
        let p = Var::param(Tensor::full(&[1, side * side], 0.5));
        let loss = focal_loss(&p, &y).unwrap().value().item();
        let mut direct = 0.0;
        for &t in &target {
            direct -= if t == 1.0 {
                0.25 * 0.5f64.ln()
            } else {
                (1.0 - t).powi(4) * 0.25 * 0.5f64.ln()
            };
        }
        assert!((loss - direct).abs() < 1e-12, "{loss} vs {direct}");
    }

    #[test]
    fn focal_near_zero_for_confident_correct_map() {
        let side = 8;
        let target = gaussian_target(side, 0.5, 0.5, 1.0);
        let probs: Vec<f64> = target.iter().map(|&t| if t == 1.0 { 1.0 - 1e-6 } else { 1e-6 }).collect();
        let loss = focal_loss(&Var::param(Tensor::<f64>::from_f64(&[1, 64], &probs).unwrap()), &Tensor::from_f64(&[1, 64], &target).unwrap())
            .unwrap()
            .value()
            .item();
        assert!(loss.abs() < 1e-9, "{loss}");
    }

    #[test]
    fn focal_gradient_follows_relabeling() {
        let side = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probs: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.05..0.95)).collect();
        // mirror the map left-right together with the peak
        let mirror = |v: &[f64]| -> Vec<f64> { (0..side * side).map(|i| v[(i / side) * side + side - 1 - i % side]).collect() };
        let run = |p: &[f64], cx: f64| {
            let target = gaussian_target(side, cx, 0.4, 1.0);
            let pv = Var::param(Tensor::<f64>::from_f64(&[1, side * side], p).unwrap());
            let loss = focal_loss(&pv, &Tensor::from_f64(&[1, side * side], &target).unwrap()).unwrap();
            loss.backward().unwrap();
            (loss.value().item(), pv.grad().unwrap().data().to_vec())
        };
        let (l1, g1) = run(&probs, 1.5 / side as f64);
        let (l2, g2) = run(&mirror(&probs), 1.0 - 1.5 / side as f64);
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in mirror(&g1).iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn total_gradient_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = boxes(&[0.4, 0.5, 0.2, 0.3, 0.6, 0.6, 0.3, 0.2]);
        let init: Vec<f64> = (0..8).map(|i| gt.data()[i] + rng.gen_range(-0.05..0.05)).collect();
        let w = LossWeights::default();
        let grad_of = |which: Option<usize>| {
            let pred = Var::param(boxes(&init));
            let terms = LossTerms {
                cls: pred.sum().scale(0.0),
                giou: giou_loss(&pred, &gt).unwrap(),
                l1: l1_loss(&pred, &gt).unwrap(),
            };
            let out = match which {
                None => total_loss(&terms, &w).unwrap(),
                Some(1) => terms.giou.clone(),
                _ => terms.l1.clone(),
            };
            out.backward().unwrap();
            pred.grad().unwrap().data().to_vec()
        };
        let (total, g, l) = (grad_of(None), grad_of(Some(1)), grad_of(Some(2)));
        for i in 0..8 {
            assert!((total[i] - (2.0 * g[i] + 5.0 * l[i])).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(cx in 0.0f64..1.0, cy in 0.0f64..1.0, w in 0.01f64..1.0, h in 0.01f64..1.0,
                                   dx in -0.5f64..0.5, dw in 0.01f64..1.0) {
            let gt = boxes(&[cx, cy, w, h]);
            let pred = Var::constant(boxes(&[cx + dx, cy, dw, h]));
            let g = giou_loss(&pred, &gt).unwrap().value().item();
            prop_assert!((0.0..=2.0).contains(&g));
            prop_assert!(l1_loss(&pred, &gt).unwrap().value().item() >= 0.0);
        }
    }
}
