use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul, Conv2dSpec, Scalar, Tensor, Var};
use crate::neurons::{first_violation, Coding};

use super::layers::{Act, ForwardCtx};
use super::plan::{LayerKind, HEAD_BRANCHES};
use super::ModelError;

type Result<T> = std::result::Result<T, ModelError>;

/// Block-diagonal composition `[[X, 0], [0, Z]]` of `[B, C, H, W]` maps.
pub fn ipl_compose<T: Scalar>(x: &Var<T>, z: &Var<T>) -> Result<Var<T>> {
    let (xs, zs) = (x.shape().to_vec(), z.shape().to_vec());
    if xs.len() != 4 || zs.len() != 4 || xs[..2] != zs[..2] {
        return Err(ModelError::Shape(format!("cannot compose {xs:?} with {zs:?}")));
    }
    let (b, c) = (xs[0], xs[1]);
    let o1 = Var::constant(Tensor::zeros(&[b, c, xs[2], zs[3]]));
    let o2 = Var::constant(Tensor::zeros(&[b, c, zs[2], xs[3]]));
    let top = Var::concat(&[x, &o1], 3)?;
    let bottom = Var::concat(&[&o2, z], 3)?;
    Ok(Var::concat(&[&top, &bottom], 2)?)
}

/// Returns the two diagonal blocks of a composed map. Extents are the
/// block sides at the current stride.
pub fn ipl_split<T: Scalar>(u: &Var<T>, x_extent: usize, z_extent: usize) -> Result<(Var<T>, Var<T>)> {
    let s = u.shape();
    if s.len() != 4 || s[2] != x_extent + z_extent || s[3] != x_extent + z_extent {
        return Err(ModelError::Shape(format!(
            "map {s:?} does not split into {x_extent} + {z_extent} blocks"
        )));
    }
    let x = u.narrow(2, 0, x_extent)?.narrow(3, 0, x_extent)?;
    let z = u.narrow(2, x_extent, z_extent)?.narrow(3, x_extent, z_extent)?;
    Ok((x, z))
}

/// `[B, C, H, W]` maps to `[B, N_z + N_x, C]` tokens, template first, each
/// map in row-major order.
pub fn tokens_from_maps<T: Scalar>(x: &Var<T>, z: &Var<T>) -> Result<Var<T>> {
    let flat = |m: &Var<T>| -> Result<Var<T>> {
        let s = m.shape();
        Ok(m.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])?)
    };
    Ok(Var::concat(&[&flat(z)?, &flat(x)?], 1)?)
}

/// Inverse of [`tokens_from_maps`] for square maps of the given sides.
pub fn maps_from_tokens<T: Scalar>(tokens: &Var<T>, x_side: usize, z_side: usize) -> Result<(Var<T>, Var<T>)> {
    let s = tokens.shape().to_vec();
    let (nz, nx) = (z_side * z_side, x_side * x_side);
    if s.len() != 3 || s[1] != nz + nx {
        return Err(ModelError::Shape(format!("{s:?} does not hold {nz} + {nx} tokens")));
    }
    let unflat = |t: Var<T>, side: usize| -> Result<Var<T>> {
        Ok(t.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], side, side])?)
    };
    let z = unflat(tokens.narrow(1, 0, nz)?, z_side)?;
    let x = unflat(tokens.narrow(1, nz, nx)?, x_side)?;
    Ok((x, z))
}

fn spike_conv(k: usize, stride: usize, groups: usize) -> Conv2dSpec {
    Conv2dSpec::new(stride, k / 2, groups)
}

/// `u' = u + SepConv(u)`, `u'' = u' + Conv(SN(Conv(SN(u'))))`.
pub fn snn_conv_block<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, prefix: &str, u: &Var<T>) -> Result<Var<T>> {
    let steps = ctx.weights.config.timesteps;
    let e = ctx.weights.get(&format!("{prefix}.sep.dw.weight"))?.shape()[0];
    let s = ctx.sn(u, steps)?;
    let v1 = ctx.conv(&format!("{prefix}.sep.pw1"), LayerKind::SpikeConv, &s, spike_conv(1, 1, 1))?;
    let s = ctx.sn(&v1, steps)?;
    let v2 = ctx.conv(&format!("{prefix}.sep.dw"), LayerKind::SpikeConv, &s, spike_conv(3, 1, e))?;
    let s = ctx.sn(&v2, steps)?;
    let sep = ctx.conv(&format!("{prefix}.sep.pw2"), LayerKind::SpikeConv, &s, spike_conv(1, 1, 1))?;
    let u1 = u.add(&sep)?;
    let s = ctx.sn(&u1, steps)?;
    let g1 = ctx.conv(&format!("{prefix}.group.conv1"), LayerKind::SpikeConv, &s, spike_conv(3, 1, 1))?;
    let s = ctx.sn(&g1, steps)?;
    let g2 = ctx.conv(&format!("{prefix}.group.conv2"), LayerKind::SpikeConv, &s, spike_conv(3, 1, 1))?;
    Ok(u1.add(&g2)?)
}

/// `u' = u + SSA(u)`, `u'' = u' + MLP(u')` on `[B, N, d]` tokens.
pub fn snn_transformer_block<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, prefix: &str, u: &Var<T>) -> Result<Var<T>> {
    let steps = ctx.weights.config.timesteps;
    let s = ctx.sn(u, steps)?;
    let mut qkv = Vec::with_capacity(3);
    for m in ["q", "k", "v"] {
        let y = ctx.linear(&format!("{prefix}.attn.{m}"), &s)?;
        qkv.push(ctx.sn(&y, steps)?);
    }
    let a = ctx.ssa(&format!("{prefix}.attn.ssa"), &qkv[0], &qkv[1], &qkv[2])?;
    let a = ctx.sn(&a, steps)?;
    let o = ctx.linear(&format!("{prefix}.attn.o"), &a)?;
    let u1 = u.add(&o)?;
    let s = ctx.sn(&u1, steps)?;
    let h = ctx.linear(&format!("{prefix}.mlp.fc1"), &s)?;
    let s = ctx.sn(&h, steps)?;
    let m = ctx.linear(&format!("{prefix}.mlp.fc2"), &s)?;
    Ok(u1.add(&m)?)
}

/// Raw head maps for a batch: logits `[B,1,H,W]`, offsets in `(-0.5, 0.5)`
/// and sizes in `(0, 1)`, both `[B,2,H,W]`.
#[derive(Debug, Clone)]
pub struct HeadOutput<T: Scalar> {
    pub score_logits: Var<T>,
    pub offset: Var<T>,
    pub size: Var<T>,
}

/// Center head on a `[B, d, H, W]` real-valued map. The first four convs of
/// each branch take spikes; the fifth takes the real-valued activation.
pub fn tracking_head<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, feat: &Var<T>) -> Result<HeadOutput<T>> {
    let mut outs = Vec::with_capacity(3);
    for (branch, _) in HEAD_BRANCHES {
        let mut h = feat.clone();
        for i in 1..=4 {
            let s = ctx.sn(&h, 1)?;
            h = ctx.conv(&format!("head.{branch}.conv{i}"), LayerKind::SpikeConv, &s, spike_conv(3, 1, 1))?;
        }
        outs.push(ctx.conv(&format!("head.{branch}.conv5"), LayerKind::FloatConv, &Act::Real(h), spike_conv(1, 1, 1))?);
    }
    let size = outs.pop().expect("three branches").sigmoid();
    let offset = outs.pop().expect("three branches").sigmoid().add_scalar(T::of(-0.5));
    let score_logits = outs.pop().expect("three branches");
    Ok(HeadOutput {
        score_logits,
        offset,
        size,
    })
}

/// Full network. Inputs are `[T, B, 3, H, W]` event images in 0..255 units.
pub fn forward<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, z: &Tensor<T>, x: &Tensor<T>) -> Result<HeadOutput<T>> {
    let cfg = ctx.weights.config.clone();
    cfg.validate()?;
    let (zs, xs) = (z.shape(), x.shape());
    let steps = cfg.timesteps;
    let ok = |s: &[usize], side: usize| s.len() == 5 && s[0] == steps && s[2] == 3 && s[3] == side && s[4] == side;
    if !ok(zs, cfg.template_size) || !ok(xs, cfg.search_size) || zs[1] != xs[1] {
        return Err(ModelError::Shape(format!(
            "template {zs:?} / search {xs:?} do not match T={steps}, sizes {}/{}",
            cfg.template_size, cfg.search_size
        )));
    }
    let b = xs[1];
    let norm = T::one() / T::of(255.0);
    let zv = Var::constant(z.reshape(&[steps * b, 3, cfg.template_size, cfg.template_size])?).scale(norm);
    let xv = Var::constant(x.reshape(&[steps * b, 3, cfg.search_size, cfg.search_size])?).scale(norm);
    let composed = ipl_compose(&xv, &zv)?;

    let mut u = ctx.conv("stem", LayerKind::FloatConv, &Act::Real(composed), Conv2dSpec::new(2, 1, 1))?;
    for (si, stage) in cfg.conv_stages.iter().enumerate() {
        let s = ctx.sn(&u, steps)?;
        u = ctx.conv(&format!("conv{si}.down"), LayerKind::SpikeConv, &s, Conv2dSpec::new(2, 1, 1))?;
        for bi in 0..stage.blocks {
            u = snn_conv_block(ctx, &format!("conv{si}.block{bi}"), &u)?;
        }
    }
    let (xf, zf) = ipl_split(&u, cfg.search_feat(), cfg.template_feat())?;
    let tokens = tokens_from_maps(&xf, &zf)?;
    let s = ctx.sn(&tokens, steps)?;
    let mut t = ctx.linear("tokenize", &s)?;
    let mut d = cfg.embed_dim(0);
    for (si, stage) in cfg.transformer_stages.iter().enumerate() {
        if cfg.c * stage.mult != d {
            let s = ctx.sn(&t, steps)?;
            t = ctx.linear(&format!("tf{si}.proj"), &s)?;
            d = cfg.c * stage.mult;
        }
        for bi in 0..stage.blocks {
            t = snn_transformer_block(ctx, &format!("tf{si}.block{bi}"), &t)?;
        }
    }
    let (xmap, _) = maps_from_tokens(&t, cfg.search_feat(), cfg.template_feat())?;
    // real-valued head input averaged over the outer timesteps
    let fused = xmap.mean_groups(steps)?;
    tracking_head(ctx, &fused)
}

/// Tracker output for one search region. Box is `(cx, cy, w, h)`
/// normalised to the search region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub bbox: [f64; 4],
    pub score: f64,
    pub score_map: Vec<f64>,
    pub side: usize,
}

/// Row-major index of the maximum; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Box read at cell `idx` of a `side × side` map: centre is
/// `(cell + 0.5 + offset) / side`, all components clamped to `[0, 1]`.
pub fn decode_box(idx: usize, side: usize, offset: [f64; 2], size: [f64; 2]) -> [f64; 4] {
    let (row, col) = (idx / side, idx % side);
    let s = side as f64;
    [
        ((col as f64 + 0.5 + offset[0]) / s).clamp(0.0, 1.0),
        ((row as f64 + 0.5 + offset[1]) / s).clamp(0.0, 1.0),
        size[0].clamp(0.0, 1.0),
        size[1].clamp(0.0, 1.0),
    ]
}

impl<T: Scalar> HeadOutput<T> {
    pub fn batch(&self) -> usize {
        self.score_logits.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.score_logits.shape()[2]
    }

    /// Decodes sample `i` at its score maximum.
    pub fn result(&self, i: usize) -> TrackResult {
        let side = self.side();
        let hw = side * side;
        let logits = &self.score_logits.value().data()[i * hw..(i + 1) * hw];
        let score_map: Vec<f64> = logits.iter().map(|&l| 1.0 / (1.0 + (-l.f64()).exp())).collect();
        let idx = argmax(&score_map);
        let at = |m: &Var<T>, ch: usize| m.value().data()[(i * 2 + ch) * hw + idx].f64();
        TrackResult {
            bbox: decode_box(idx, side, [at(&self.offset, 0), at(&self.offset, 1)], [at(&self.size, 0), at(&self.size, 1)]),
            score: score_map[idx],
            score_map,
            side,
        }
    }

    /// Differentiable `[B, 4]` boxes read at the given cells.
    pub fn boxes_at(&self, cells: &[usize]) -> Result<Var<T>> {
        let (b, side) = (self.batch(), self.side());
        let hw = side * side;
        if cells.len() != b || cells.iter().any(|&c| c >= hw) {
            return Err(ModelError::Shape(format!("{} cells for batch {b} on {side}x{side}", cells.len())));
        }
        let idx: Vec<usize> = cells.iter().flat_map(|&c| [c, c]).collect();
        let off = self.offset.reshape(&[b * 2, hw])?.gather_rows(&idx)?.reshape(&[b, 2])?;
        let size = self.size.reshape(&[b * 2, hw])?.gather_rows(&idx)?.reshape(&[b, 2])?;
        let base: Vec<T> = cells
            .iter()
            .flat_map(|&c| [T::of((c % side) as f64 + 0.5), T::of((c / side) as f64 + 0.5)])
            .collect();
        let centre = off
            .add(&Var::constant(Tensor::new(&[b, 2], base)?))?
            .scale(T::one() / T::of(side as f64));
        Ok(Var::concat(&[&centre, &size], 1)?)
    }

    pub fn argmax_cells(&self) -> Vec<usize> {
        (0..self.batch()).map(|i| argmax(&self.result(i).score_map)).collect()
    }
}

/// Gradient-free attention on `[B, N, d]` tensors with a single head. In
/// strict mode every operand must be binary.
pub fn ssa<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, scale: T, strict: bool) -> Result<Tensor<T>> {
    if strict {
        for (name, t) in [("q", q), ("k", k), ("v", v)] {
            if let Some((i, val)) = first_violation(t.data(), Coding::Binary) {
                return Err(ModelError::SpikeInput(format!("{name}[{i}] = {val} is not a spike")));
            }
        }
    }
    let kv = matmul(k, v, true, false)?;
    Ok(matmul(q, &kv, false, false)?.map(|x| x * scale))
}

/// Folds an eval-mode batch norm into the preceding bias-free convolution.
pub fn fold_bn<T: Scalar>(
    weight: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let cout = weight.shape()[0];
    if [gamma.len(), beta.len(), mean.len(), var.len()].iter().any(|&l| l != cout) {
        return Err(ModelError::Shape("batch-norm statistics length".into()));
    }
    let per = weight.numel() / cout;
    let k: Vec<T> = (0..cout).map(|c| gamma[c] / (var[c] + T::of(eps)).sqrt()).collect();
    let w = Tensor::new(
        weight.shape(),
        weight.data().iter().enumerate().map(|(i, &w)| w * k[i / per]).collect(),
    )?;
    let b = Tensor::new(&[cout], (0..cout).map(|c| beta[c] - mean[c] * k[c]).collect())?;
    Ok((w, b))
}
