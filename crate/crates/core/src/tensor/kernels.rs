//! Raw numeric kernels on channels-last buffers.
//!
//! Convolution and transposed convolution share one index relation between a
//! "small" grid and a "big" grid:
//!
//! `small[ys, xs, g*cs_g + j]  <->  big[ys*s - p + ky*dil, xs*s - p + kx*dil, cb]`
//!
//! with packed weights `wt[ky][kx][cb][j]` and `g = cb / cb_g`. A convolution
//! gathers big (input) into small (output); a transposed convolution scatters
//! small (input) into big (output).

use super::Tensor;
use crate::error::{CstError, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub hs: usize,
    pub ws: usize,
    pub cs: usize,
    pub hb: usize,
    pub wb: usize,
    pub cb: usize,
    pub groups: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

impl Geometry {
    #[inline]
    fn big_coord(&self, small: usize, k: usize) -> Option<usize> {
        let v = (small * self.stride + k * self.dil) as isize - self.pad as isize;
        if v < 0 {
            None
        } else {
            Some(v as usize)
        }
    }

    fn cs_g(&self) -> usize {
        self.cs / self.groups
    }

    fn cb_g(&self) -> usize {
        self.cb / self.groups
    }

    /// `small += big (*) wt`
    pub fn gather(&self, big: &[f64], wt: &[f64], small: &mut [f64]) {
        let (cs_g, cb_g) = (self.cs_g(), self.cb_g());
        for ys in 0..self.hs {
            for ky in 0..self.kh {
                let Some(yb) = self.big_coord(ys, ky) else { continue };
                if yb >= self.hb {
                    continue;
                }
                for xs in 0..self.ws {
                    let out = &mut small[(ys * self.ws + xs) * self.cs..][..self.cs];
                    for kx in 0..self.kw {
                        let Some(xb) = self.big_coord(xs, kx) else { continue };
                        if xb >= self.wb {
                            continue;
                        }
                        let bin = &big[(yb * self.wb + xb) * self.cb..][..self.cb];
                        let wk = &wt[(ky * self.kw + kx) * self.cb * cs_g..];
                        for (cb, &v) in bin.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let g = cb / cb_g;
                            let wrow = &wk[cb * cs_g..][..cs_g];
                            let orow = &mut out[g * cs_g..][..cs_g];
                            for (o, &w) in orow.iter_mut().zip(wrow) {
                                *o += v * w;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `big += small (*)^T wt`
    pub fn scatter(&self, small: &[f64], wt: &[f64], big: &mut [f64]) {
        let (cs_g, cb_g) = (self.cs_g(), self.cb_g());
        for ys in 0..self.hs {
            for ky in 0..self.kh {
                let Some(yb) = self.big_coord(ys, ky) else { continue };
                if yb >= self.hb {
                    continue;
                }
                for xs in 0..self.ws {
                    let sin = &small[(ys * self.ws + xs) * self.cs..][..self.cs];
                    for kx in 0..self.kw {
                        let Some(xb) = self.big_coord(xs, kx) else { continue };
                        if xb >= self.wb {
                            continue;
                        }
                        let bout = &mut big[(yb * self.wb + xb) * self.cb..][..self.cb];
                        let wk = &wt[(ky * self.kw + kx) * self.cb * cs_g..];
                        for (cb, b) in bout.iter_mut().enumerate() {
                            let g = cb / cb_g;
                            let wrow = &wk[cb * cs_g..][..cs_g];
                            let srow = &sin[g * cs_g..][..cs_g];
                            let mut acc = 0.0;
                            for (&s, &w) in srow.iter().zip(wrow) {
                                acc += s * w;
                            }
                            *b += acc;
                        }
                    }
                }
            }
        }
    }

    /// `dwt += big x small` (outer products over matching sites).
    pub fn weight_grad(&self, big: &[f64], small: &[f64], dwt: &mut [f64]) {
        let (cs_g, cb_g) = (self.cs_g(), self.cb_g());
        for ys in 0..self.hs {
            for ky in 0..self.kh {
                let Some(yb) = self.big_coord(ys, ky) else { continue };
                if yb >= self.hb {
                    continue;
                }
                for xs in 0..self.ws {
                    let sin = &small[(ys * self.ws + xs) * self.cs..][..self.cs];
                    for kx in 0..self.kw {
                        let Some(xb) = self.big_coord(xs, kx) else { continue };
                        if xb >= self.wb {
                            continue;
                        }
                        let bin = &big[(yb * self.wb + xb) * self.cb..][..self.cb];
                        let wk = &mut dwt[(ky * self.kw + kx) * self.cb * cs_g..];
                        for (cb, &v) in bin.iter().enumerate() {
                            if v == 0.0 {
                                continue;
                            }
                            let g = cb / cb_g;
                            let wrow = &mut wk[cb * cs_g..][..cs_g];
                            let srow = &sin[g * cs_g..][..cs_g];
                            for (w, &s) in wrow.iter_mut().zip(srow) {
                                *w += v * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Hyper-parameters shared by conv2d and transposed conv2d.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

fn out_extent(len: usize, k: usize, p: ConvParams) -> Option<usize> {
    let span = p.dilation * (k - 1) + 1;
    let padded = len + 2 * p.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / p.stride + 1)
}

/// Conv2d geometry: input `[H, W, Cin]`, weight `[Cout, Cin/g, kh, kw]`.
pub(crate) fn conv_geometry(input: &[usize], weight: &[usize], p: ConvParams) -> Result<Geometry> {
    if input.len() != 3 || weight.len() != 4 || p.groups == 0 || p.stride == 0 || p.dilation == 0 {
        return Err(CstError::dims("conv2d", input, weight));
    }
    let (h, w, cin) = (input[0], input[1], input[2]);
    let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if cin % p.groups != 0 || cout % p.groups != 0 || cin / p.groups != cin_g {
        return Err(CstError::dims("conv2d", input, weight));
    }
    let (Some(ho), Some(wo)) = (out_extent(h, kh, p), out_extent(w, kw, p)) else {
        return Err(CstError::dims("conv2d", input, weight));
    };
    Ok(Geometry {
        hs: ho,
        ws: wo,
        cs: cout,
        hb: h,
        wb: w,
        cb: cin,
        groups: p.groups,
        kh,
        kw,
        stride: p.stride,
        pad: p.padding,
        dil: p.dilation,
    })
}

/// Transposed conv2d geometry: input `[H, W, Cin]`, weight `[Cin, Cout/g, kh, kw]`.
pub(crate) fn conv_t_geometry(input: &[usize], weight: &[usize], p: ConvParams) -> Result<Geometry> {
    if input.len() != 3 || weight.len() != 4 || p.groups == 0 || p.stride == 0 || p.dilation == 0 {
        return Err(CstError::dims("conv_transpose2d", input, weight));
    }
    let (h, w, cin) = (input[0], input[1], input[2]);
    let (wcin, cout_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if wcin != cin || cin % p.groups != 0 {
        return Err(CstError::dims("conv_transpose2d", input, weight));
    }
    let span_h = (h - 1) * p.stride + p.dilation * (kh - 1) + 1;
    let span_w = (w - 1) * p.stride + p.dilation * (kw - 1) + 1;
    if span_h <= 2 * p.padding || span_w <= 2 * p.padding {
        return Err(CstError::dims("conv_transpose2d", input, weight));
    }
    Ok(Geometry {
        hs: h,
        ws: w,
        cs: cin,
        hb: span_h - 2 * p.padding,
        wb: span_w - 2 * p.padding,
        cb: cout_g * p.groups,
        groups: p.groups,
        kh,
        kw,
        stride: p.stride,
        pad: p.padding,
        dil: p.dilation,
    })
}

/// Conv weight `[Cout, Cin_g, kh, kw]` -> packed `[kh][kw][Cin][Cout_g]`.
pub(crate) fn pack_conv_weight(w: &[f64], geo: &Geometry) -> Vec<f64> {
    let (cs_g, cb_g) = (geo.cs / geo.groups, geo.cb / geo.groups);
    let mut out = vec![0.0; w.len()];
    for oc in 0..geo.cs {
        let g = oc / cs_g;
        let j = oc % cs_g;
        for icl in 0..cb_g {
            let cb = g * cb_g + icl;
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    out[((ky * geo.kw + kx) * geo.cb + cb) * cs_g + j] =
                        w[((oc * cb_g + icl) * geo.kh + ky) * geo.kw + kx];
                }
            }
        }
    }
    out
}

pub(crate) fn unpack_conv_weight(wt: &[f64], geo: &Geometry) -> Vec<f64> {
    let (cs_g, cb_g) = (geo.cs / geo.groups, geo.cb / geo.groups);
    let mut out = vec![0.0; wt.len()];
    for oc in 0..geo.cs {
        let g = oc / cs_g;
        let j = oc % cs_g;
        for icl in 0..cb_g {
            let cb = g * cb_g + icl;
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    out[((oc * cb_g + icl) * geo.kh + ky) * geo.kw + kx] =
                        wt[((ky * geo.kw + kx) * geo.cb + cb) * cs_g + j];
                }
            }
        }
    }
    out
}

/// Transposed-conv weight `[Cin, Cout_g, kh, kw]` -> packed `[kh][kw][Cout][Cin_g]`.
pub(crate) fn pack_conv_t_weight(w: &[f64], geo: &Geometry) -> Vec<f64> {
    let (cs_g, cb_g) = (geo.cs / geo.groups, geo.cb / geo.groups);
    let mut out = vec![0.0; w.len()];
    for ic in 0..geo.cs {
        let g = ic / cs_g;
        let j = ic % cs_g;
        for ocl in 0..cb_g {
            let cb = g * cb_g + ocl;
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    out[((ky * geo.kw + kx) * geo.cb + cb) * cs_g + j] =
                        w[((ic * cb_g + ocl) * geo.kh + ky) * geo.kw + kx];
                }
            }
        }
    }
    out
}

pub(crate) fn unpack_conv_t_weight(wt: &[f64], geo: &Geometry) -> Vec<f64> {
    let (cs_g, cb_g) = (geo.cs / geo.groups, geo.cb / geo.groups);
    let mut out = vec![0.0; wt.len()];
    for ic in 0..geo.cs {
        let g = ic / cs_g;
        let j = ic % cs_g;
        for ocl in 0..cb_g {
            let cb = g * cb_g + ocl;
            for ky in 0..geo.kh {
                for kx in 0..geo.kw {
                    out[((ic * cb_g + ocl) * geo.kh + ky) * geo.kw + kx] =
                        wt[((ky * geo.kw + kx) * geo.cb + cb) * cs_g + j];
                }
            }
        }
    }
    out
}

/// Plain conv2d on a channels-last input, without recording.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, p: ConvParams) -> Result<Tensor> {
    let geo = conv_geometry(input.shape(), weight.shape(), p)?;
    let wt = pack_conv_weight(weight.data(), &geo);
    let mut out = vec![0.0; geo.hs * geo.ws * geo.cs];
    if let Some(b) = bias {
        if b.len() != geo.cs {
            return Err(CstError::dims("conv2d bias", b.shape(), &[geo.cs]));
        }
        for site in out.chunks_mut(geo.cs) {
            site.copy_from_slice(b.data());
        }
    }
    geo.gather(input.data(), &wt, &mut out);
    Tensor::new(&[geo.hs, geo.ws, geo.cs], out)
}

/// Plain transposed conv2d on a channels-last input, without recording.
pub fn conv_transpose2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    p: ConvParams,
) -> Result<Tensor> {
    let geo = conv_t_geometry(input.shape(), weight.shape(), p)?;
    let wt = pack_conv_t_weight(weight.data(), &geo);
    let mut out = vec![0.0; geo.hb * geo.wb * geo.cb];
    if let Some(b) = bias {
        if b.len() != geo.cb {
            return Err(CstError::dims("conv_transpose2d bias", b.shape(), &[geo.cb]));
        }
        for site in out.chunks_mut(geo.cb) {
            site.copy_from_slice(b.data());
        }
    }
    geo.scatter(input.data(), &wt, &mut out);
    Tensor::new(&[geo.hb, geo.wb, geo.cb], out)
}

/// Batched `out[b] (+)= op(a[b]) * op(b[b])` where `op` optionally transposes
/// the last two axes. `a` is `[batch, n, k]` (or `[batch, k, n]` if `ta`),
/// `b` is `[batch, k, m]` (or `[batch, m, k]` if `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
) {
    for bi in 0..batch {
        let a = &a[bi * n * k..][..n * k];
        let b = &b[bi * k * m..][..k * m];
        let out = &mut out[bi * n * m..][..n * m];
        for i in 0..n {
            let orow = &mut out[i * m..][..m];
            for p in 0..k {
                let av = if ta { a[p * n + i] } else { a[i * k + p] };
                if av == 0.0 {
                    continue;
                }
                if tb {
                    for (j, o) in orow.iter_mut().enumerate() {
                        *o += av * b[j * k + p];
                    }
                } else {
                    let brow = &b[p * m..][..m];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
    }
}

/// `[n, k] x [k, m]` without recording.
pub fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(CstError::dims("matmul", sa, sb));
    }
    let mut out = vec![0.0; sa[0] * sb[1]];
    gemm(1, sa[0], sa[1], sb[1], a.data(), false, b.data(), false, &mut out);
    Tensor::new(&[sa[0], sb[1]], out)
}
