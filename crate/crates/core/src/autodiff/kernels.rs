//! Raw compute kernels shared by the differentiable ops and the
//! gradient-free inference paths.

use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

pub(crate) fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: Conv2dSpec,
) -> Result<ConvGeometry, TensorError> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 4 || ws.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: is.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if spec.stride == 0 || spec.groups == 0 {
        return Err(TensorError::InvalidArgument("conv2d stride and groups must be positive".into()));
    }
    let (n, cin, h, w) = (is[0], is[1], is[2], is[3]);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d groups",
            lhs: is.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d kernel larger than padded input",
            lhs: is.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (w + 2 * spec.padding - kw) / spec.stride + 1;
    Ok(ConvGeometry {
        n,
        cin,
        h,
        w,
        cout,
        cin_g,
        cout_g: cout / spec.groups,
        kh,
        kw,
        ho,
        wo,
        stride: spec.stride,
        pad: spec.padding,
    })
}

/// Output columns `ox` for which `ox*stride + k - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>, TensorError> {
    let g = conv_geometry(input, weight, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![g.cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let x = input.data();
    let wt = weight.data();
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    out.par_chunks_mut(plane.max(1)).enumerate().for_each(|(idx, dst)| {
        let (n, co) = (idx / g.cout, idx % g.cout);
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b.data()[co]);
        }
        let group = co / g.cout_g;
        for cil in 0..g.cin_g {
            let ci = group * g.cin_g + cil;
            let src = &x[(n * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = wt[((co * g.cin_g + cil) * g.kh + ky) * g.kw + kx];
                    if wv.is_zero() {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * g.w..][..g.w];
                        let out_row = &mut dst[oy * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let off = kx as isize - g.pad as isize;
                            for ox in ox0..ox1 {
                                out_row[ox] += wv * row[(ox as isize + off) as usize];
                            }
                        } else {
                            for ox in ox0..ox1 {
                                out_row[ox] += wv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out))
}

pub(crate) fn conv2d_grad_input<T: Scalar>(g: &ConvGeometry, weight: &[T], grad_out: &[T]) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gin = vec![T::zero(); g.n * g.cin * plane_in];
    gin.par_chunks_mut(plane_in.max(1)).enumerate().for_each(|(idx, dst)| {
        let (n, ci) = (idx / g.cin, idx % g.cin);
        let group = ci / g.cin_g;
        let cil = ci % g.cin_g;
        for co in group * g.cout_g..(group + 1) * g.cout_g {
            let go = &grad_out[(n * g.cout + co) * plane_out..][..plane_out];
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = weight[((co * g.cin_g + cil) * g.kh + ky) * g.kw + kx];
                    if wv.is_zero() {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &mut dst[iy * g.w..][..g.w];
                        let go_row = &go[oy * g.wo..][..g.wo];
                        for ox in ox0..ox1 {
                            row[ox * g.stride + kx - g.pad] += wv * go_row[ox];
                        }
                    }
                }
            }
        }
    });
    gin
}

pub(crate) fn conv2d_grad_weight<T: Scalar>(g: &ConvGeometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    let per_co = g.cin_g * g.kh * g.kw;
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gw = vec![T::zero(); g.cout * per_co];
    gw.par_chunks_mut(per_co.max(1)).enumerate().for_each(|(co, dst)| {
        let group = co / g.cout_g;
        for n in 0..g.n {
            let go = &grad_out[(n * g.cout + co) * plane_out..][..plane_out];
            for cil in 0..g.cin_g {
                let ci = group * g.cin_g + cil;
                let src = &input[(n * g.cin + ci) * plane_in..][..plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.ho);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.wo);
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = &src[iy * g.w..][..g.w];
                            let go_row = &go[oy * g.wo..][..g.wo];
                            for ox in ox0..ox1 {
                                acc += go_row[ox] * row[ox * g.stride + kx - g.pad];
                            }
                        }
                        dst[(cil * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}

/// `out[b] = op(a[b]) · op(c[b])` for row-major matrices, where `op` optionally
/// transposes. Shapes are given after transposition: the product is `m×k · k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * n];
    if m == 0 || n == 0 {
        return out;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(row_idx, dst)| {
        let (bi, i) = (row_idx / m, row_idx % m);
        let a_mat = &a[bi * m * k..][..m * k];
        let b_mat = &b[bi * k * n..][..k * n];
        if trans_b {
            // b stored as n×k
            for (j, d) in dst.iter_mut().enumerate() {
                let mut acc = T::zero();
                for p in 0..k {
                    let av = if trans_a { a_mat[p * m + i] } else { a_mat[i * k + p] };
                    acc += av * b_mat[j * k + p];
                }
                *d = acc;
            }
        } else {
            for p in 0..k {
                let av = if trans_a { a_mat[p * m + i] } else { a_mat[i * k + p] };
                if av.is_zero() {
                    continue;
                }
                let b_row = &b_mat[p * n..][..n];
                for (d, &bv) in dst.iter_mut().zip(b_row) {
                    *d += av * bv;
                }
            }
        }
    });
    out
}

/// Per-channel statistics for data laid out as `[outer, channels, inner]`.
pub(crate) fn channel_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn channel_moments<T: Scalar>(x: &[T], outer: usize, c: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((outer * inner) as f64);
    let stats: Vec<(T, T)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = T::zero();
            for o in 0..outer {
                sum += x[(o * c + ch) * inner..][..inner].iter().copied().sum::<T>();
            }
            let mean = sum / count;
            let mut sq = T::zero();
            for o in 0..outer {
                for &v in &x[(o * c + ch) * inner..][..inner] {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            (mean, sq / count)
        })
        .collect();
    stats.into_iter().unzip()
}
