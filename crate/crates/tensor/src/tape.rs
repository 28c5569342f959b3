//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the vector-Jacobian product. Node ids are allocated in execution order,
//! so the node list is already topologically sorted and backward is one
//! reverse sweep. Subgraphs that do not reach a `requires_grad` leaf are
//! skipped entirely, which is what keeps frozen host layers cheap.

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, GroupStats, UpGeom};
use crate::scalar::{gemm, MatLayout, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    ScaleBy { x: Var, s: Var },
    MulSpatial { x: Var, m: Var },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    Sigmoid(Var),
    Relu(Var),
    Clamp { x: Var, lo: T, hi: T },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, c_out: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: UpGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats<T> },
    AvgPool(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Bce { p: Var, target: Tensor<T>, eps: T },
    Focal { p: Var, target: Tensor<T>, cfg: FocalParams<T>, norm: T },
    MaskedL1 { pred: Var, target: Tensor<T>, mask: Vec<bool>, norm: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Exponents and clamp of the Gaussian focal heatmap loss.
#[derive(Clone, Copy, Debug)]
pub struct FocalParams<T> {
    pub alpha: T,
    pub beta: T,
    pub eps: T,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `var` is disconnected from the loss or does not require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::Usage("tape already consumed by backward".into()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        assert!(!self.consumed, "tape already consumed by backward");
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn var(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf(value, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return dim_err(op, sa, sb);
        }
        Ok(())
    }

    fn chw(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => dim_err(op, s, &[0, 0, 0]),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let y = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push(y, Op::Affine { x, scale }, &[x])
    }

    /// Multiply every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return dim_err("scale_by", self.shape(x), self.shape(s));
        }
        let sv = self.value(s).item();
        let y = self.value(x).map(|v| v * sv);
        self.push(y, Op::ScaleBy { x, s }, &[x, s])
    }

    /// `x[c,h,w] * m[0,h,w]`: a spatial map broadcast over channels.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = self.chw("mul_spatial", x)?;
        if self.shape(m) != [1, h, w] {
            return dim_err("mul_spatial", self.shape(x), self.shape(m));
        }
        let hw = h * w;
        let mv = self.value(m).data();
        let mut y = self.value(x).clone();
        for ch in 0..c {
            for (v, &mm) in y.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(mv) {
                *v *= mm;
            }
        }
        self.push(y, Op::MulSpatial { x, m }, &[x, m])
    }

    /// `gamma[c] * x[c,h,w] + beta[c]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (c, h, w) = self.chw("channel_affine", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err("channel_affine", self.shape(x), self.shape(gamma));
        }
        let hw = h * w;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut y = self.value(x).clone();
        for ch in 0..c {
            for v in &mut y.data_mut()[ch * hw..(ch + 1) * hw] {
                *v = g[ch] * *v + b[ch];
            }
        }
        self.push(y, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x), &[x])
    }

    /// Elementwise clamp; the subgradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::Config(format!("clamp bounds {lo} > {hi}")));
        }
        let y = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(y, Op::Clamp { x, lo, hi }, &[x])
    }

    /// `y = x W^T + b` for `x` of shape `[in]` or `[n, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (out, inp) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return dim_err("linear", self.shape(x), s),
        };
        let xs = self.shape(x).to_vec();
        let rows = match xs.as_slice() {
            [i] if *i == inp => 1,
            [n, i] if *i == inp => *n,
            _ => return dim_err("linear", &xs, self.shape(w)),
        };
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return dim_err("linear", self.shape(w), self.shape(b));
            }
        }
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bv);
            }
        }
        gemm(
            T::one(),
            self.value(x).data(),
            MatLayout::row_major(rows, inp),
            self.value(w).data(),
            MatLayout::transposed(out, inp),
            T::one(),
            &mut y,
            MatLayout::row_major(rows, out),
        );
        let shape = if xs.len() == 1 { vec![out] } else { vec![rows, out] };
        let y = Tensor::from_vec(&shape, y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, Op::Linear { x, w, b, rows }, &inputs)
    }

    /// 2-D cross-correlation of `x[c_in,h,w]` with `w[c_out,c_in,k,k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.chw("conv2d", x)?;
        let (c_out, k) = match *self.shape(w) {
            [o, i, k1, k2] if i == c_in && k1 == k2 => (o, k1),
            ref s => return dim_err("conv2d", self.shape(x), s),
        };
        if k % 2 == 0 {
            return Err(TensorError::Config(format!("conv2d kernel size {k} must be odd")));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return dim_err("conv2d", self.shape(w), self.shape(b));
            }
        }
        let geom = ConvGeom { c_in, h, w: wd, k, stride, pad, dilation: dilation.max(1) };
        let (ho, wo) = match geom.out_hw() {
            Some(hw) => hw,
            None => return dim_err("conv2d", self.shape(x), self.shape(w)),
        };
        let y = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            c_out,
            &geom,
        );
        let y = Tensor::from_vec(&[c_out, ho, wo], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, Op::Conv { x, w, b, geom, c_out }, &inputs)
    }

    /// Transposed conv with kernel size equal to `stride`, weights `[c_in, c_out, s, s]`.
    ///
    /// The full output is `(h*s, w*s)`; `out_hw` crops it from the top-left corner,
    /// which is how an odd-sized map survives a stride-8 down/up path.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        out_hw: Option<(usize, usize)>,
    ) -> Result<Var> {
        let (c_in, h, wd) = self.chw("conv_transpose2d", x)?;
        if stride == 0 {
            return Err(TensorError::Config("conv_transpose2d stride must be >= 1".into()));
        }
        let c_out = match *self.shape(w) {
            [i, o, k1, k2] if i == c_in && k1 == stride && k2 == stride => o,
            ref s => return dim_err("conv_transpose2d", self.shape(x), s),
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return dim_err("conv_transpose2d", self.shape(w), self.shape(b));
            }
        }
        let (full_h, full_w) = (h * stride, wd * stride);
        let (out_h, out_w) = out_hw.unwrap_or((full_h, full_w));
        if out_h > full_h || out_w > full_w || out_h == 0 || out_w == 0 {
            return dim_err("conv_transpose2d", &[full_h, full_w], &[out_h, out_w]);
        }
        let geom = UpGeom { c_in, c_out, h, w: wd, stride, out_h, out_w };
        let y = kernels::conv_transpose_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let y = Tensor::from_vec(&[c_out, out_h, out_w], y)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(y, Op::ConvT { x, w, b, geom }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (c, h, w) = self.chw("group_norm", x)?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Config(format!("{c} channels not divisible into {groups} groups")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err("group_norm", self.shape(x), self.shape(gamma));
        }
        let (y, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            c,
            h * w,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let y = Tensor::from_vec(&[c, h, w], y)?;
        self.push(y, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta])
    }

    /// Spatial mean: `[c,h,w] -> [c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.chw("global_avg_pool", x)?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let y: Vec<T> = (0..c).map(|ch| xv[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv).collect();
        let y = Tensor::from_vec(&[c], y)?;
        self.push(y, Op::AvgPool(x), &[x])
    }

    /// Concatenate along the leading (channel) dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_first(&values)?;
        self.push(y, Op::Concat(parts.to_vec()), parts)
    }

    /// Rows `start..start+len` of the leading dimension.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return dim_err("narrow", &shape, &[start, len]);
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let y = Tensor::from_vec(&out_shape, data)?;
        self.push(y, Op::Narrow { x, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).mean());
        self.push(y, Op::Mean(x), &[x])
    }

    /// Mean binary cross-entropy; `p` is clamped to `[eps, 1-eps]` inside the logs.
    pub fn bce(&mut self, p: Var, target: Tensor<T>, eps: T) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return dim_err("bce", self.shape(p), target.shape());
        }
        let pv = self.value(p).data();
        let n = T::from_usize(pv.len().max(1)).unwrap();
        let total: T = pv
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let pc = p.max(eps).min(T::one() - eps);
                -(t * pc.ln() + (T::one() - t) * (T::one() - pc).ln())
            })
            .sum();
        let y = Tensor::scalar(total / n);
        self.push(y, Op::Bce { p, target, eps }, &[p])
    }

    /// Gaussian focal loss on a probability heatmap, normalized by the number of
    /// exact-one peaks (floor 1).
    pub fn focal_loss(&mut self, p: Var, target: Tensor<T>, cfg: FocalParams<T>) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return dim_err("focal_loss", self.shape(p), target.shape());
        }
        let num_pos = target.data().iter().filter(|&&t| t == T::one()).count();
        let norm = T::one() / T::from_usize(num_pos.max(1)).unwrap();
        let total: T = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| focal_term(p, t, &cfg).0)
            .sum();
        let y = Tensor::scalar(total * norm);
        self.push(y, Op::Focal { p, target, cfg, norm }, &[p])
    }

    /// Mean absolute error over entries where `mask` is set (count floor 1).
    pub fn masked_l1(&mut self, pred: Var, target: Tensor<T>, mask: Vec<bool>) -> Result<Var> {
        if self.shape(pred) != target.shape() || mask.len() != target.numel() {
            return dim_err("masked_l1", self.shape(pred), target.shape());
        }
        let count = mask.iter().filter(|&&m| m).count();
        let norm = T::one() / T::from_usize(count.max(1)).unwrap();
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((&a, &b), _)| (a - b).abs())
            .sum();
        let y = Tensor::scalar(total * norm);
        self.push(y, Op::MaskedL1 { pred, target, mask, norm }, &[pred])
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape: a second call, or
    /// recording further ops, is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::Usage("backward called twice on the same tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backprop_node(id, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, id: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in [a, b] {
                    if self.rg(v) {
                        accumulate(grads, v, gy.clone());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.zip_map(val(*b), |g, y| g * y).unwrap());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy.zip_map(val(*a), |g, x| g * x).unwrap());
                }
            }
            Op::Affine { x, scale } => {
                if self.rg(*x) {
                    let s = *scale;
                    accumulate(grads, *x, gy.map(|g| g * s));
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = val(*s).item();
                if self.rg(*x) {
                    accumulate(grads, *x, gy.map(|g| g * sv));
                }
                if self.rg(*s) {
                    let d: T = gy.data().iter().zip(val(*x).data()).map(|(&g, &v)| g * v).sum();
                    accumulate(grads, *s, Tensor::from_vec(val(*s).shape(), vec![d]).unwrap());
                }
            }
            Op::MulSpatial { x, m } => {
                let xv = val(*x);
                let (c, hw) = (xv.shape()[0], xv.shape()[1] * xv.shape()[2]);
                let mv = val(*m).data();
                if self.rg(*x) {
                    let mut dx = gy.clone();
                    for ch in 0..c {
                        for (d, &mm) in dx.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().zip(mv) {
                            *d *= mm;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.rg(*m) {
                    let mut dm = Tensor::zeros(val(*m).shape());
                    for ch in 0..c {
                        let (g, xs) = (&gy.data()[ch * hw..(ch + 1) * hw], &xv.data()[ch * hw..(ch + 1) * hw]);
                        for ((d, &gg), &xx) in dm.data_mut().iter_mut().zip(g).zip(xs) {
                            *d += gg * xx;
                        }
                    }
                    accumulate(grads, *m, dm);
                }
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let xv = val(*x);
                let (c, hw) = (xv.shape()[0], xv.shape()[1] * xv.shape()[2]);
                let gv = val(*gamma).data();
                if self.rg(*x) {
                    let mut dx = gy.clone();
                    for ch in 0..c {
                        dx.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d *= gv[ch]);
                    }
                    accumulate(grads, *x, dx);
                }
                if self.rg(*gamma) {
                    let d: Vec<T> = (0..c)
                        .map(|ch| {
                            gy.data()[ch * hw..(ch + 1) * hw]
                                .iter()
                                .zip(&xv.data()[ch * hw..(ch + 1) * hw])
                                .map(|(&g, &v)| g * v)
                                .sum()
                        })
                        .collect();
                    accumulate(grads, *gamma, Tensor::from_vec(&[c], d).unwrap());
                }
                if self.rg(*beta) {
                    let d: Vec<T> = (0..c).map(|ch| gy.data()[ch * hw..(ch + 1) * hw].iter().copied().sum()).collect();
                    accumulate(grads, *beta, Tensor::from_vec(&[c], d).unwrap());
                }
            }
            Op::Sigmoid(x) => {
                if self.rg(*x) {
                    let d = gy.zip_map(&node.value, |g, s| g * s * (T::one() - s)).unwrap();
                    accumulate(grads, *x, d);
                }
            }
            Op::Relu(x) => {
                if self.rg(*x) {
                    let d = gy.zip_map(val(*x), |g, v| if v > T::zero() { g } else { T::zero() }).unwrap();
                    accumulate(grads, *x, d);
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.rg(*x) {
                    let (lo, hi) = (*lo, *hi);
                    let d = gy.zip_map(val(*x), |g, v| if v >= lo && v <= hi { g } else { T::zero() }).unwrap();
                    accumulate(grads, *x, d);
                }
            }
            Op::Linear { x, w, b, rows } => {
                let (out, inp) = (val(*w).shape()[0], val(*w).shape()[1]);
                let rows = *rows;
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(val(*x).shape());
                    gemm(
                        T::one(),
                        gy.data(),
                        MatLayout::row_major(rows, out),
                        val(*w).data(),
                        MatLayout::row_major(out, inp),
                        T::zero(),
                        dx.data_mut(),
                        MatLayout::row_major(rows, inp),
                    );
                    accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(&[out, inp]);
                    gemm(
                        T::one(),
                        gy.data(),
                        MatLayout::transposed(rows, out),
                        val(*x).data(),
                        MatLayout::row_major(rows, inp),
                        T::zero(),
                        dw.data_mut(),
                        MatLayout::row_major(out, inp),
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = Tensor::zeros(&[out]);
                    for r in 0..rows {
                        for (d, &g) in db.data_mut().iter_mut().zip(&gy.data()[r * out..(r + 1) * out]) {
                            *d += g;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Conv { x, w, b, geom, c_out } => {
                let mut dx = self.rg(*x).then(|| Tensor::zeros(val(*x).shape()));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(val(*w).shape()));
                let b_rg = b.filter(|b| self.rg(*b));
                let mut db = b_rg.map(|_| Tensor::zeros(&[*c_out]));
                kernels::conv2d_backward(
                    val(*x).data(),
                    val(*w).data(),
                    gy.data(),
                    *c_out,
                    geom,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b_rg, db) {
                    accumulate(grads, b, db);
                }
            }
            Op::ConvT { x, w, b, geom } => {
                let mut dx = self.rg(*x).then(|| Tensor::zeros(val(*x).shape()));
                let mut dw = self.rg(*w).then(|| Tensor::zeros(val(*w).shape()));
                let b_rg = b.filter(|b| self.rg(*b));
                let mut db = b_rg.map(|_| Tensor::zeros(&[geom.c_out]));
                kernels::conv_transpose_backward(
                    val(*x).data(),
                    val(*w).data(),
                    gy.data(),
                    geom,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b_rg, db) {
                    accumulate(grads, b, db);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xv = val(*x);
                let (c, hw) = (xv.shape()[0], xv.shape()[1] * xv.shape()[2]);
                let mut dx = self.rg(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dg = self.rg(*gamma).then(|| Tensor::zeros(&[c]));
                let mut db = self.rg(*beta).then(|| Tensor::zeros(&[c]));
                kernels::group_norm_backward(
                    xv.data(),
                    c,
                    hw,
                    *groups,
                    val(*gamma).data(),
                    stats,
                    gy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dg.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dg) = dg {
                    accumulate(grads, *gamma, dg);
                }
                if let Some(db) = db {
                    accumulate(grads, *beta, db);
                }
            }
            Op::AvgPool(x) => {
                if self.rg(*x) {
                    let shape = val(*x).shape();
                    let hw = shape[1] * shape[2];
                    let inv = T::one() / T::from_usize(hw).unwrap();
                    let mut dx = Tensor::zeros(shape);
                    for (ch, &g) in gy.data().iter().enumerate() {
                        dx.data_mut()[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = g * inv);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if self.rg(p) {
                        let d = Tensor::from_vec(val(p).shape(), gy.data()[offset..offset + len].to_vec()).unwrap();
                        accumulate(grads, p, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, start } => {
                if self.rg(*x) {
                    let shape = val(*x).shape();
                    let inner: usize = shape[1..].iter().product();
                    let mut dx = Tensor::zeros(shape);
                    let off = start * inner;
                    dx.data_mut()[off..off + gy.numel()].copy_from_slice(gy.data());
                    accumulate(grads, *x, dx);
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, gy.clone().reshape(val(*x).shape()).unwrap());
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    accumulate(grads, *x, Tensor::full(val(*x).shape(), gy.item()));
                }
            }
            Op::Mean(x) => {
                if self.rg(*x) {
                    let n = T::from_usize(val(*x).numel().max(1)).unwrap();
                    accumulate(grads, *x, Tensor::full(val(*x).shape(), gy.item() / n));
                }
            }
            Op::Bce { p, target, eps } => {
                if self.rg(*p) {
                    let eps = *eps;
                    let scale = gy.item() / T::from_usize(target.numel().max(1)).unwrap();
                    let d = val(*p)
                        .zip_map(target, |p, t| {
                            if p < eps || p > T::one() - eps {
                                T::zero()
                            } else {
                                scale * (-t / p + (T::one() - t) / (T::one() - p))
                            }
                        })
                        .unwrap();
                    accumulate(grads, *p, d);
                }
            }
            Op::Focal { p, target, cfg, norm } => {
                if self.rg(*p) {
                    let scale = gy.item() * *norm;
                    let d = val(*p).zip_map(target, |p, t| scale * focal_term(p, t, cfg).1).unwrap();
                    accumulate(grads, *p, d);
                }
            }
            Op::MaskedL1 { pred, target, mask, norm } => {
                if self.rg(*pred) {
                    let scale = gy.item() * *norm;
                    let mut d = Tensor::zeros(target.shape());
                    for (i, ((&a, &b), &m)) in val(*pred).data().iter().zip(target.data()).zip(mask).enumerate() {
                        if m {
                            d.data_mut()[i] = scale * sign(a - b);
                        }
                    }
                    accumulate(grads, *pred, d);
                }
            }
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Loss value and derivative w.r.t. `p` of one heatmap cell.
fn focal_term<T: Scalar>(p: T, t: T, cfg: &FocalParams<T>) -> (T, T) {
    let one = T::one();
    let clamped = p < cfg.eps || p > one - cfg.eps;
    let p = p.max(cfg.eps).min(one - cfg.eps);
    let (value, grad) = if t == one {
        let w = (one - p).powf(cfg.alpha);
        let v = -w * p.ln();
        let g = cfg.alpha * (one - p).powf(cfg.alpha - one) * p.ln() - w / p;
        (v, g)
    } else {
        let nw = (one - t).powf(cfg.beta);
        let pa = p.powf(cfg.alpha);
        let l1p = (one - p).ln();
        let v = -nw * pa * l1p;
        let g = -nw * (cfg.alpha * p.powf(cfg.alpha - one) * l1p - pa / (one - p));
        (v, g)
    };
    (value, if clamped { T::zero() } else { grad })
}
