//! 2-D convolution (im2col + matrix product) and group normalization over
//! `[B, C, H, W]` tensors.

use crate::error::{Result, TensorError};
use crate::graph::{BackwardOp, Contributions, Graph, GraphView, Var};
use crate::kernels::{gemm, Transpose};
use crate::real::Real;
use crate::tensor::Tensor;

/// Square kernel geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2dGeometry {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent along one spatial axis, `None` if the kernel does not fit.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

struct Dims {
    c_in: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

/// Output columns `[lo, hi)` whose input coordinate `o * stride + tap - pad`
/// falls inside `0..extent`.
fn valid_range(out: usize, extent: usize, tap: usize, geo: &Conv2dGeometry) -> (usize, usize) {
    let lo = geo.padding.saturating_sub(tap).div_ceil(geo.stride);
    let hi = if extent + geo.padding > tap {
        ((extent + geo.padding - tap - 1) / geo.stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one image into columns `offset..offset + ho*wo` of a matrix whose
/// rows are `row_stride` long. Entries outside the image must already be zero.
fn im2col<T: Real>(x: &[T], dims: &Dims, geo: &Conv2dGeometry, cols: &mut [T], row_stride: usize, offset: usize) {
    let k = geo.kernel;
    for c in 0..dims.c_in {
        let plane = &x[c * dims.h * dims.w..(c + 1) * dims.h * dims.w];
        for ki in 0..k {
            let (y0, y1) = valid_range(dims.ho, dims.h, ki, geo);
            for kj in 0..k {
                let (x0, x1) = valid_range(dims.wo, dims.w, kj, geo);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * row_stride + offset..];
                for oy in y0..y1 {
                    let iy = oy * geo.stride + ki - geo.padding;
                    let src = &plane[iy * dims.w..(iy + 1) * dims.w];
                    let d = &mut dst[oy * dims.wo..(oy + 1) * dims.wo];
                    for ox in x0..x1 {
                        d[ox] = src[ox * geo.stride + kj - geo.padding];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], dims: &Dims, geo: &Conv2dGeometry, x: &mut [T], row_stride: usize, offset: usize) {
    let k = geo.kernel;
    for c in 0..dims.c_in {
        let plane = &mut x[c * dims.h * dims.w..(c + 1) * dims.h * dims.w];
        for ki in 0..k {
            let (y0, y1) = valid_range(dims.ho, dims.h, ki, geo);
            for kj in 0..k {
                let (x0, x1) = valid_range(dims.wo, dims.w, kj, geo);
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * row_stride + offset..];
                for oy in y0..y1 {
                    let iy = oy * geo.stride + ki - geo.padding;
                    let dst = &mut plane[iy * dims.w..(iy + 1) * dims.w];
                    let s = &src[oy * dims.wo..(oy + 1) * dims.wo];
                    for ox in x0..x1 {
                        dst[ox * geo.stride + kj - geo.padding] += s[ox];
                    }
                }
            }
        }
    }
}

/// `[B, C, n]` to `[C, B*n]`.
fn to_channel_major<T: Real>(src: &[T], batch: usize, channels: usize, n: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for b in 0..batch {
        for c in 0..channels {
            dst[c * batch * n + b * n..][..n].copy_from_slice(&src[(b * channels + c) * n..][..n]);
        }
    }
    dst
}

struct Conv2dOp<T> {
    x: Var,
    w: Var,
    bias: Option<Var>,
    geo: Conv2dGeometry,
    batch: usize,
    c_out: usize,
    dims: Dims,
    cols: Vec<T>,
}

impl<T: Real> BackwardOp<T> for Conv2dOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], v: &GraphView<'_, T>) -> Contributions<T> {
        let d = &self.dims;
        let n = d.ho * d.wo;
        let ckk = d.c_in * self.geo.kernel * self.geo.kernel;
        let wv = v.value(self.w).data();
        let mut out = Vec::with_capacity(3);

        let bn = self.batch * n;
        let gt = to_channel_major(g, self.batch, self.c_out, n);
        if v.tracked(self.w) {
            let mut gw = vec![T::zero(); self.c_out * ckk];
            gemm(Transpose::No, Transpose::Yes, self.c_out, bn, ckk, &gt, &self.cols, T::zero(), &mut gw);
            out.push((self.w, gw));
        }
        if let Some(bias) = self.bias {
            if v.tracked(bias) {
                let gbias = gt.chunks_exact(bn).map(|r| r.iter().copied().sum::<T>()).collect();
                out.push((bias, gbias));
            }
        }
        if v.tracked(self.x) {
            let plane = d.c_in * d.h * d.w;
            let mut gx = vec![T::zero(); self.batch * plane];
            let mut gcols = vec![T::zero(); ckk * bn];
            gemm(Transpose::Yes, Transpose::No, ckk, self.c_out, bn, wv, &gt, T::zero(), &mut gcols);
            for b in 0..self.batch {
                col2im(&gcols, d, &self.geo, &mut gx[b * plane..(b + 1) * plane], bn, b * n);
            }
            out.push((self.x, gx));
        }
        out
    }
}

struct GroupNormOp<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    channels: usize,
    groups: usize,
    spatial: usize,
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> BackwardOp<T> for GroupNormOp<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], v: &GraphView<'_, T>) -> Contributions<T> {
        let gamma = v.value(self.gamma).data();
        let cg = self.channels / self.groups;
        let group_len = cg * self.spatial;
        let inv = T::one() / T::from_usize(group_len).expect("group size fits");
        let mut gx = vec![T::zero(); g.len()];
        let mut ggamma = vec![T::zero(); self.channels];
        let mut gbeta = vec![T::zero(); self.channels];
        let mut gxhat = vec![T::zero(); group_len];
        for (gi, ((gr, xh), dx)) in g
            .chunks_exact(group_len)
            .zip(self.xhat.chunks_exact(group_len))
            .zip(gx.chunks_exact_mut(group_len))
            .enumerate()
        {
            let c0 = (gi % self.groups) * cg;
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for (j, (&gv, &xv)) in gr.iter().zip(xh).enumerate() {
                let c = c0 + j / self.spatial;
                ggamma[c] += gv * xv;
                gbeta[c] += gv;
                gxhat[j] = gv * gamma[c];
                mean_g += gxhat[j];
                mean_gx += gxhat[j] * xv;
            }
            mean_g *= inv;
            mean_gx *= inv;
            let rs = self.rstd[gi];
            for j in 0..group_len {
                dx[j] = rs * (gxhat[j] - mean_g - xh[j] * mean_gx);
            }
        }
        vec![(self.x, gx), (self.gamma, ggamma), (self.beta, gbeta)]
    }
}

impl<T: Real> Graph<T> {
    /// Convolution of `x: [B, C_in, H, W]` with `w: [C_out, C_in, k, k]` and
    /// optional per-channel `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geo: Conv2dGeometry) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(w)?;
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != geo.kernel || sw[3] != geo.kernel {
            return Err(TensorError::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            self.check_var(b)?;
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::shape("conv2d", &sw, self.shape(b)));
            }
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let c_out = sw[0];
        let (ho, wo) = match (geo.output_size(h), geo.output_size(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(TensorError::shape("conv2d", &sx, &sw)),
        };
        let dims = Dims { c_in, h, w: wd, ho, wo };
        let n = ho * wo;
        let ckk = c_in * geo.kernel * geo.kernel;
        let bn = batch * n;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = vec![T::zero(); ckk * bn];
        let plane = c_in * h * wd;
        for b in 0..batch {
            im2col(&xv[b * plane..(b + 1) * plane], &dims, &geo, &mut cols, bn, b * n);
        }
        let mut prod = vec![T::zero(); c_out * bn];
        gemm(Transpose::No, Transpose::No, c_out, ckk, bn, wv, &cols, T::zero(), &mut prod);
        let bias_v = bias.map(|b| self.value(b).data());
        let mut data = vec![T::zero(); batch * c_out * n];
        for b in 0..batch {
            for c in 0..c_out {
                let dst = &mut data[(b * c_out + c) * n..][..n];
                dst.copy_from_slice(&prod[c * bn + b * n..][..n]);
                if let Some(bv) = bias_v {
                    for v in dst.iter_mut() {
                        *v += bv[c];
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch, c_out, ho, wo], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let keep_cols = if self.grad_enabled() { cols } else { Vec::new() };
        Ok(self.push_op(
            out,
            &inputs,
            Conv2dOp {
                x,
                w,
                bias,
                geo,
                batch,
                c_out,
                dims,
                cols: keep_cols,
            },
        ))
    }

    /// Group normalization of `x: [B, C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(gamma)?;
        self.check_var(beta)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Contract(format!("group_norm expects [B, C, H, W], got {s:?}")));
        }
        let channels = s[1];
        if groups == 0 || channels % groups != 0 {
            return Err(TensorError::Contract(format!(
                "group_norm: {channels} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(TensorError::shape("group_norm", &s, self.shape(gamma)));
        }
        let spatial = s[2] * s[3];
        let cg = channels / groups;
        let group_len = cg * spatial;
        let inv = T::one() / T::from_usize(group_len).expect("group size fits");
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut data = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / group_len);
        for (gi, ((xr, xh), yr)) in xv
            .chunks_exact(group_len)
            .zip(xhat.chunks_exact_mut(group_len))
            .zip(data.chunks_exact_mut(group_len))
            .enumerate()
        {
            let c0 = (gi % groups) * cg;
            let mean = xr.iter().copied().sum::<T>() * inv;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
            let rs = T::one() / (var + eps).sqrt();
            for j in 0..group_len {
                let c = c0 + j / spatial;
                xh[j] = (xr[j] - mean) * rs;
                yr[j] = xh[j] * gv[c] + bv[c];
            }
            rstd.push(rs);
        }
        let out = Tensor::new(s, data)?;
        Ok(self.push_op(
            out,
            &[x, gamma, beta],
            GroupNormOp {
                x,
                gamma,
                beta,
                channels,
                groups,
                spatial,
                xhat,
                rstd,
            },
        ))
    }
}
