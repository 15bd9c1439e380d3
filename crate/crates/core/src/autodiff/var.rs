use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use super::kernels::{self, Conv2dSpec};
use super::tensor::{inverse_permutation, numel, Scalar, Tensor};
use super::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Maps the upstream gradient to one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A node in a dynamically built computation graph.
///
/// Nodes whose inputs do not require gradients keep neither parents nor a
/// backward closure, so inference builds no graph at all.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            value,
            grad: RefCell::new(None),
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn param(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// Node with a caller-defined backward, e.g. a surrogate-gradient
    /// nonlinearity. The closure returns one gradient per parent.
    pub fn custom(value: Tensor<T>, parents: &[&Var<T>], backward: BackwardFn<T>) -> Self {
        Self::from_op(value, parents, move || backward)
    }

    fn from_op(value: Tensor<T>, parents: &[&Var<T>], backward: impl FnOnce() -> BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            value,
            grad: RefCell::new(None),
            requires_grad,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            backward: Some(backward()),
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0
            .grad
            .borrow()
            .as_ref()
            .map(|g| Tensor::from_parts(self.shape().to_vec(), g.clone()))
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable node that requires them.
    pub fn backward(&self) -> Result<()> {
        if self.value().numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        *self.0.grad.borrow_mut() = Some(vec![T::one()]);
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let upstream = match node.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let grads = backward(&upstream);
            for (parent, grad) in node.0.parents.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !parent.0.requires_grad {
                    continue;
                }
                let mut slot = parent.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
                    None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        // (node, children expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.0);
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.0.requires_grad && !visited.contains(&Rc::as_ptr(&p.0)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().zip_map(other.value(), "add", |a, b| a + b)?;
        Ok(Self::from_op(value, &[self, other], || {
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())])
        }))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().zip_map(other.value(), "sub", |a, b| a - b)?;
        Ok(Self::from_op(value, &[self, other], || {
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())])
        }))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().zip_map(other.value(), "mul", |a, b| a * b)?;
        let (a, b) = (self.value().clone(), other.value().clone());
        Ok(Self::from_op(value, &[self, other], move || {
            Box::new(move |g| {
                vec![
                    Some(g.iter().zip(b.data()).map(|(&g, &b)| g * b).collect()),
                    Some(g.iter().zip(a.data()).map(|(&g, &a)| g * a).collect()),
                ]
            })
        }))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        let value = self.value().zip_map(other.value(), "div", |a, b| a / b)?;
        let (a, b) = (self.value().clone(), other.value().clone());
        Ok(Self::from_op(value, &[self, other], move || {
            Box::new(move |g| {
                vec![
                    Some(g.iter().zip(b.data()).map(|(&g, &b)| g / b).collect()),
                    Some(
                        g.iter()
                            .zip(a.data().iter().zip(b.data()))
                            .map(|(&g, (&a, &b))| -g * a / (b * b))
                            .collect(),
                    ),
                ]
            })
        }))
    }

    pub fn maximum(&self, other: &Var<T>) -> Result<Var<T>> {
        self.select(other, "maximum", |a, b| a >= b)
    }

    pub fn minimum(&self, other: &Var<T>) -> Result<Var<T>> {
        self.select(other, "minimum", |a, b| a <= b)
    }

    /// Picks `self` where `take_self(a, b)` holds, else `other`; the gradient
    /// routes to whichever operand was taken.
    fn select(&self, other: &Var<T>, op: &'static str, take_self: fn(T, T) -> bool) -> Result<Var<T>> {
        let value = self
            .value()
            .zip_map(other.value(), op, |a, b| if take_self(a, b) { a } else { b })?;
        let mask: Vec<bool> = self
            .value()
            .data()
            .iter()
            .zip(other.value().data())
            .map(|(&a, &b)| take_self(a, b))
            .collect();
        Ok(Self::from_op(value, &[self, other], move || {
            Box::new(move |g| {
                let ga = g.iter().zip(&mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect();
                let gb = g.iter().zip(&mask).map(|(&g, &m)| if m { T::zero() } else { g }).collect();
                vec![Some(ga), Some(gb)]
            })
        }))
    }

    pub fn scale(&self, c: T) -> Var<T> {
        let value = self.value().map(|v| v * c);
        Self::from_op(value, &[self], move || {
            Box::new(move |g| vec![Some(g.iter().map(|&v| v * c).collect())])
        })
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        let value = self.value().map(|v| v + c);
        Self::from_op(value, &[self], || Box::new(|g| vec![Some(g.to_vec())]))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    /// Elementwise map with a caller-supplied local derivative. Used for
    /// smooth functions and for surrogate-gradient nonlinearities alike.
    pub fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T) -> T + 'static,
    ) -> Var<T> {
        let value = self.value().map(&f);
        let x = self.value().clone();
        Self::from_op(value, &[self], move || {
            Box::new(move |g| {
                vec![Some(
                    g.iter().zip(x.data()).map(|(&g, &x)| g * df(x)).collect(),
                )]
            })
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        fn sig<T: Scalar>(x: T) -> T {
            T::one() / (T::one() + (-x).exp())
        }
        self.unary(sig, |x| {
            let s = sig(x);
            s * (T::one() - s)
        })
    }

    pub fn ln(&self) -> Var<T> {
        self.unary(|x| x.ln(), |x| T::one() / x)
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Clamp with pass-through gradient inside the range.
    pub fn clamp(&self, lo: T, hi: T) -> Var<T> {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    // ---- reductions -------------------------------------------------

    pub fn sum(&self) -> Var<T> {
        let value = Tensor::scalar(self.value().sum());
        let n = self.value().numel();
        Self::from_op(value, &[self], move || Box::new(move |g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// Averages `groups` equally sized slabs stacked along axis 0.
    pub fn mean_groups(&self, groups: usize) -> Result<Var<T>> {
        let shape = self.shape();
        if groups == 0 || shape.is_empty() || shape[0] % groups != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "cannot split axis 0 of {shape:?} into {groups} groups"
            )));
        }
        let slab = self.value().numel() / groups;
        let inv = T::one() / T::of(groups as f64);
        let src = self.value().data();
        let mut out = vec![T::zero(); slab];
        for gidx in 0..groups {
            for (o, &v) in out.iter_mut().zip(&src[gidx * slab..(gidx + 1) * slab]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape.to_vec();
        new_shape[0] /= groups;
        let value = Tensor::from_parts(new_shape, out);
        Ok(Self::from_op(value, &[self], move || {
            Box::new(move |g| {
                let mut full = Vec::with_capacity(slab * groups);
                for _ in 0..groups {
                    full.extend(g.iter().map(|&v| v * inv));
                }
                vec![Some(full)]
            })
        }))
    }

    // ---- shape ------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let value = self.value().reshape(shape)?;
        Ok(Self::from_op(value, &[self], || Box::new(|g| vec![Some(g.to_vec())])))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<T>> {
        let value = self.value().permute(perm)?;
        let inv = inverse_permutation(perm);
        let out_shape = value.shape().to_vec();
        Ok(Self::from_op(value, &[self], move || {
            Box::new(move |g| {
                let gt = Tensor::from_parts(out_shape.clone(), g.to_vec());
                vec![Some(gt.permute(&inv).expect("inverse permutation").into_vec())]
            })
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let value = self.value().narrow(axis, start, len)?;
        let shape = self.shape().to_vec();
        Ok(Self::from_op(value, &[self], move || {
            Box::new(move |g| {
                let outer = numel(&shape[..axis]);
                let inner = numel(&shape[axis + 1..]);
                let dim = shape[axis];
                let mut full = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(full)]
            })
        }))
    }

    pub fn concat(parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let out_shape = value.shape().to_vec();
        Ok(Self::from_op(value, parts, move || {
            Box::new(move |g| {
                let gt = Tensor::from_parts(out_shape.clone(), g.to_vec());
                let mut start = 0;
                sizes
                    .iter()
                    .map(|&len| {
                        let piece = gt.narrow(axis, start, len).expect("concat slice");
                        start += len;
                        Some(piece.into_vec())
                    })
                    .collect()
            })
        }))
    }

    /// Picks one element per row of a `[rows, cols]` tensor. Indices are
    /// treated as constants (no gradient through the selection).
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<T>> {
        let shape = self.shape();
        if shape.len() != 2 || indices.len() != shape[0] || indices.iter().any(|&i| i >= shape[1]) {
            return Err(TensorError::InvalidArgument(format!(
                "gather_rows: {} indices into {shape:?}",
                indices.len()
            )));
        }
        let cols = shape[1];
        let data = self.value().data();
        let value = Tensor::from_parts(
            vec![indices.len()],
            indices.iter().enumerate().map(|(r, &c)| data[r * cols + c]).collect(),
        );
        let idx = indices.to_vec();
        let n = self.value().numel();
        Ok(Self::from_op(value, &[self], move || {
            Box::new(move |g| {
                let mut full = vec![T::zero(); n];
                for (r, &c) in idx.iter().enumerate() {
                    full[r * cols + c] += g[r];
                }
                vec![Some(full)]
            })
        }))
    }

    // ---- linear algebra ---------------------------------------------

    /// Batched product of `[B, M, K]` and `[B, K, N]` (after optional
    /// transposition of the last two axes of either operand).
    pub fn matmul(&self, other: &Var<T>, trans_a: bool, trans_b: bool) -> Result<Var<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let batch = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(mismatch());
        }
        let out = kernels::gemm(self.value().data(), other.value().data(), batch, m, k, n, trans_a, trans_b);
        let value = Tensor::from_parts(vec![batch, m, n], out);
        let (a, b) = (self.value().clone(), other.value().clone());
        Ok(Self::from_op(value, &[self, other], move || {
            Box::new(move |g| {
                // C = op(A)·op(B); dop(A) = G·op(B)^T, dop(B) = op(A)^T·G
                let ga = if trans_a {
                    // dA (k×m) = op(B)·G^T
                    kernels::gemm(b.data(), g, batch, k, n, m, trans_b, true)
                } else {
                    kernels::gemm(g, b.data(), batch, m, n, k, false, !trans_b)
                };
                let gb = if trans_b {
                    // dB (n×k) = G^T·op(A)
                    kernels::gemm(g, a.data(), batch, n, m, k, true, trans_a)
                } else {
                    kernels::gemm(a.data(), g, batch, k, m, n, !trans_a, false)
                };
                vec![Some(ga), Some(gb)]
            })
        }))
    }

    /// `x·Wᵀ + b` for `x: [rows, in]`, `W: [out, in]`.
    pub fn linear(&self, weight: &Var<T>, bias: Option<&Var<T>>) -> Result<Var<T>> {
        let (sx, sw) = (self.shape(), weight.shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (rows, fin, fout) = (sx[0], sx[1], sw[0]);
        if let Some(b) = bias {
            if b.shape() != [fout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear bias",
                    lhs: vec![fout],
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let mut out = kernels::gemm(self.value().data(), weight.value().data(), 1, rows, fin, fout, false, true);
        if let Some(b) = bias {
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(b.value().data()).for_each(|(o, &b)| *o += b);
            }
        }
        let value = Tensor::from_parts(vec![rows, fout], out);
        let (x, w) = (self.value().clone(), weight.value().clone());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(Self::from_op(value, &parents, move || {
            Box::new(move |g| {
                let gx = kernels::gemm(g, w.data(), 1, rows, fout, fin, false, false);
                let gw = kernels::gemm(g, x.data(), 1, fout, rows, fin, true, false);
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    grads.push(Some(gb));
                }
                grads
            })
        }))
    }

    pub fn conv2d(&self, weight: &Var<T>, bias: Option<&Var<T>>, spec: Conv2dSpec) -> Result<Var<T>> {
        let bias_value = bias.map(|b| b.value());
        let value = kernels::conv2d_forward(self.value(), weight.value(), bias_value, spec)?;
        let geom = kernels::conv_geometry(self.value(), weight.value(), spec)?;
        let (x, w) = (self.value().clone(), weight.value().clone());
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        let (x_req, w_req) = (self.requires_grad(), weight.requires_grad());
        Ok(Self::from_op(value, &parents, move || {
            Box::new(move |g| {
                let gx = x_req.then(|| kernels::conv2d_grad_input(&geom, w.data(), g));
                let gw = w_req.then(|| kernels::conv2d_grad_weight(&geom, x.data(), g));
                let mut grads = vec![gx, gw];
                if has_bias {
                    let plane = geom.ho * geom.wo;
                    let mut gb = vec![T::zero(); geom.cout];
                    for (idx, chunk) in g.chunks(plane.max(1)).enumerate() {
                        gb[idx % geom.cout] += chunk.iter().copied().sum::<T>();
                    }
                    grads.push(Some(gb));
                }
                grads
            })
        }))
    }

    /// Batch normalisation with statistics of the current batch. Channels sit
    /// on `axis`. Returns the output together with the batch mean and the
    /// biased batch variance.
    pub fn batch_norm_train(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        axis: usize,
        eps: T,
    ) -> Result<(Var<T>, Vec<T>, Vec<T>)> {
        let (outer, c, inner) = self.bn_layout(gamma, beta, axis)?;
        let x = self.value().data();
        let (mean, var) = kernels::channel_moments(x, outer, c, inner);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::from_parts(self.shape().to_vec(), out);
        let gamma_v = gamma.value().clone();
        let count = T::of((outer * inner) as f64);
        let inv_std_c = inv_std.clone();
        let node = Self::from_op(value, &[self, gamma, beta], move || {
            Box::new(move |g| {
                let gm = gamma_v.data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        let k = gm[ch] * inv_std_c[ch];
                        let mg = sum_g[ch] / count;
                        let mgx = sum_gx[ch] / count;
                        for i in base..base + inner {
                            gx[i] = k * (g[i] - mg - xhat[i] * mgx);
                        }
                    }
                }
                vec![Some(gx), Some(sum_gx), Some(sum_g)]
            })
        });
        Ok((node, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics: a per-channel
    /// affine map.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<T>,
        beta: &Var<T>,
        running_mean: &[T],
        running_var: &[T],
        axis: usize,
        eps: T,
    ) -> Result<Var<T>> {
        let (outer, c, inner) = self.bn_layout(gamma, beta, axis)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(TensorError::InvalidArgument("running statistics length".into()));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value().data();
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - running_mean[ch]) * inv_std[ch];
                    out[i] = gm[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let value = Tensor::from_parts(self.shape().to_vec(), out);
        let gamma_v = gamma.value().clone();
        Ok(Self::from_op(value, &[self, gamma, beta], move || {
            Box::new(move |g| {
                let gm = gamma_v.data();
                let mut gx = vec![T::zero(); g.len()];
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for i in base..base + inner {
                            gx[i] = g[i] * gm[ch] * inv_std[ch];
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                vec![Some(gx), Some(sum_gx), Some(sum_g)]
            })
        }))
    }

    fn bn_layout(&self, gamma: &Var<T>, beta: &Var<T>, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() || gamma.shape() != [shape[axis]] || beta.shape() != [shape[axis]] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: shape.to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        Ok(kernels::channel_layout(shape, axis))
    }
}
