//! Slice-level kernels behind the tape ops. Layout is always `[C, H, W]`.

use crate::scalar::{gemm, MatLayout, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Output spatial size, or `None` when the window does not fit.
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let span = self.dilation * (self.k - 1) + 1;
        let hp = self.h + 2 * self.pad;
        let wp = self.w + 2 * self.pad;
        if self.stride == 0 || hp < span || wp < span {
            return None;
        }
        Some(((hp - span) / self.stride + 1, (wp - span) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, ho: usize, wo: usize) -> Vec<T> {
    let n = ho * wo;
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    let drow = &mut dst[oh * wo..(oh + 1) * wo];
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            *d = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, ho: usize, wo: usize, dx: &mut [T]) {
    let n = ho * wo;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oh in 0..ho {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..wo {
                        let iw = (ow * g.stride + kj * g.dilation) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            drow[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y = W * x + b`, weights `[c_out, c_in, k, k]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, c_out: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw().expect("validated conv geometry");
    let n = ho * wo;
    let kk = g.patch_len();
    let mut y = vec![T::zero(); c_out * n];
    if let Some(b) = b {
        for (co, &bv) in b.iter().enumerate() {
            y[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = bv);
        }
    }
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x
    } else {
        owned = im2col(x, g, ho, wo);
        &owned
    };
    gemm(
        T::one(),
        w,
        MatLayout::row_major(c_out, kk),
        cols,
        MatLayout::row_major(kk, n),
        T::one(),
        &mut y,
        MatLayout::row_major(c_out, n),
    );
    y
}

/// Accumulates gradients of a conv2d into whichever of `dx`, `dw`, `db` are requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    c_out: usize,
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw().expect("validated conv geometry");
    let n = ho * wo;
    let kk = g.patch_len();
    if let Some(db) = db {
        for co in 0..c_out {
            db[co] += dy[co * n..(co + 1) * n].iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let owned;
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            owned = im2col(x, g, ho, wo);
            &owned
        };
        gemm(
            T::one(),
            dy,
            MatLayout::row_major(c_out, n),
            cols,
            MatLayout::transposed(kk, n),
            T::one(),
            dw,
            MatLayout::row_major(c_out, kk),
        );
    }
    if let Some(dx) = dx {
        if g.is_pointwise() {
            gemm(
                T::one(),
                w,
                MatLayout::transposed(c_out, kk),
                dy,
                MatLayout::row_major(c_out, n),
                T::one(),
                dx,
                MatLayout::row_major(kk, n),
            );
        } else {
            let mut dcols = vec![T::zero(); kk * n];
            gemm(
                T::one(),
                w,
                MatLayout::transposed(c_out, kk),
                dy,
                MatLayout::row_major(c_out, n),
                T::zero(),
                &mut dcols,
                MatLayout::row_major(kk, n),
            );
            col2im(&dcols, g, ho, wo, dx);
        }
    }
}

/// Geometry of a transposed conv whose kernel equals its stride, cropped to `out_h x out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `y[co, i*s+a, j*s+b] = b[co] + sum_ci x[ci,i,j] W[ci,co,a,b]`, weights `[c_in, c_out, s, s]`.
pub fn conv_transpose_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &UpGeom) -> Vec<T> {
    let s = g.stride;
    let rows = g.c_out * s * s;
    let n = g.h * g.w;
    let mut cols = vec![T::zero(); rows * n];
    gemm(
        T::one(),
        w,
        MatLayout::transposed(g.c_in, rows),
        x,
        MatLayout::row_major(g.c_in, n),
        T::zero(),
        &mut cols,
        MatLayout::row_major(rows, n),
    );
    let mut y = vec![T::zero(); g.c_out * g.out_h * g.out_w];
    for co in 0..g.c_out {
        let bias = b.map_or(T::zero(), |b| b[co]);
        let plane = &mut y[co * g.out_h * g.out_w..(co + 1) * g.out_h * g.out_w];
        for oh in 0..g.out_h {
            let (i, a) = (oh / s, oh % s);
            for ow in 0..g.out_w {
                let (j, bb) = (ow / s, ow % s);
                let row = (co * s + a) * s + bb;
                plane[oh * g.out_w + ow] = cols[row * n + i * g.w + j] + bias;
            }
        }
    }
    y
}

pub fn conv_transpose_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &UpGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let s = g.stride;
    let rows = g.c_out * s * s;
    let n = g.h * g.w;
    let plane_len = g.out_h * g.out_w;
    if let Some(db) = db {
        for co in 0..g.c_out {
            db[co] += dy[co * plane_len..(co + 1) * plane_len].iter().copied().sum::<T>();
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut dcols = vec![T::zero(); rows * n];
    for co in 0..g.c_out {
        let plane = &dy[co * plane_len..(co + 1) * plane_len];
        for oh in 0..g.out_h {
            let (i, a) = (oh / s, oh % s);
            for ow in 0..g.out_w {
                let (j, bb) = (ow / s, ow % s);
                let row = (co * s + a) * s + bb;
                dcols[row * n + i * g.w + j] = plane[oh * g.out_w + ow];
            }
        }
    }
    if let Some(dx) = dx {
        gemm(
            T::one(),
            w,
            MatLayout::row_major(g.c_in, rows),
            &dcols,
            MatLayout::row_major(rows, n),
            T::one(),
            dx,
            MatLayout::row_major(g.c_in, n),
        );
    }
    if let Some(dw) = dw {
        gemm(
            T::one(),
            x,
            MatLayout::row_major(g.c_in, n),
            &dcols,
            MatLayout::transposed(rows, n),
            T::one(),
            dw,
            MatLayout::row_major(g.c_in, rows),
        );
    }
}

/// Per-group statistics saved by the group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Scalar>(
    x: &[T],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, GroupStats<T>) {
    let cpg = c / groups;
    let n = cpg * hw;
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut y = vec![T::zero(); x.len()];
    let mut stats = GroupStats { mean: Vec::with_capacity(groups), rstd: Vec::with_capacity(groups) };
    for gi in 0..groups {
        let seg = &x[gi * n..(gi + 1) * n];
        let mean = seg.iter().copied().sum::<T>() * inv_n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        for cl in 0..cpg {
            let ch = gi * cpg + cl;
            for p in 0..hw {
                let idx = ch * hw + p;
                y[idx] = (x[idx] - mean) * rstd * gamma[ch] + beta[ch];
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    (y, stats)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Scalar>(
    x: &[T],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[T],
    stats: &GroupStats<T>,
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let cpg = c / groups;
    let n = cpg * hw;
    let nf = T::from_usize(n).unwrap();
    let xhat = |idx: usize, gi: usize| (x[idx] - stats.mean[gi]) * stats.rstd[gi];
    if let Some(dgamma) = dgamma {
        for ch in 0..c {
            let gi = ch / cpg;
            let mut acc = T::zero();
            for p in 0..hw {
                let idx = ch * hw + p;
                acc += dy[idx] * xhat(idx, gi);
            }
            dgamma[ch] += acc;
        }
    }
    if let Some(dbeta) = dbeta {
        for ch in 0..c {
            dbeta[ch] += dy[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
        }
    }
    if let Some(dx) = dx {
        for gi in 0..groups {
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for cl in 0..cpg {
                let ch = gi * cpg + cl;
                for p in 0..hw {
                    let idx = ch * hw + p;
                    let d = dy[idx] * gamma[ch];
                    sum_d += d;
                    sum_dx += d * xhat(idx, gi);
                }
            }
            let scale = stats.rstd[gi] / nf;
            for cl in 0..cpg {
                let ch = gi * cpg + cl;
                for p in 0..hw {
                    let idx = ch * hw + p;
                    let d = dy[idx] * gamma[ch];
                    dx[idx] += scale * (nf * d - sum_d - xhat(idx, gi) * sum_dx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], c_out: usize, g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.out_hw().unwrap();
        let mut y = vec![0.0; c_out * ho * wo];
        for co in 0..c_out {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let ih = (oh * g.stride + ki * g.dilation) as isize - g.pad as isize;
                                let iw = (ow * g.stride + kj * g.dilation) as isize - g.pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < g.h && (iw as usize) < g.w {
                                    acc += x[(ci * g.h + ih as usize) * g.w + iw as usize]
                                        * w[((co * g.c_in + ci) * g.k + ki) * g.k + kj];
                                }
                            }
                        }
                    }
                    y[(co * ho + oh) * wo + ow] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeom { c_in: 3, h: 7, w: 6, k: 3, stride: 2, pad: 2, dilation: 2 };
        let x: Vec<f64> = (0..3 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
        let got = conv2d_forward(&x, &w, None, 4, &g);
        assert_eq!(got, naive_conv(&x, &w, 4, &g));
    }

    #[test]
    fn output_size_rejects_oversized_kernel() {
        let g = ConvGeom { c_in: 1, h: 2, w: 2, k: 5, stride: 1, pad: 0, dilation: 1 };
        assert_eq!(g.out_hw(), None);
    }
}
