//! Raw forward/backward kernels over flat slices.
//!
//! Everything here is shape-checked by the caller; the functions assume
//! consistent extents.

use crate::error::{Error, Result};

/// Resolved geometry of a stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad: usize,
    pub dil: usize,
    pub groups: usize,
}

impl ConvShape {
    pub fn resolve(
        xdims: &[usize],
        wdims: &[usize],
        pad: usize,
        dil: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, w] = xdims[..] else {
            return Err(Error::shape(format!("conv input must be rank 4, got {xdims:?}")));
        };
        let [cout, cin_g, kh, kw] = wdims[..] else {
            return Err(Error::shape(format!("conv weight must be rank 4, got {wdims:?}")));
        };
        if groups == 0 || dil == 0 {
            return Err(Error::shape("groups and dilation must be at least 1"));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(format!(
                "channels in={cin} out={cout} not divisible by groups={groups}"
            )));
        }
        if cin / groups != cin_g {
            return Err(Error::shape(format!(
                "weight expects {cin_g} input channels per group, input gives {}",
                cin / groups
            )));
        }
        let span_h = dil * (kh - 1);
        let span_w = dil * (kw - 1);
        if h + 2 * pad <= span_h || w + 2 * pad <= span_w {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} (dilation {dil}) does not fit padded input {h}x{w}"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: h + 2 * pad - span_h,
            wo: w + 2 * pad - span_w,
            pad,
            dil,
            groups,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }
}

/// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above describe the extent of every
    // strided access; callers pass slices sized from the same extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Valid output range `[lo, hi)` along one axis for tap offset `off`
/// (input index = output index + off).
#[inline]
fn valid_range(off: isize, out_len: usize, in_len: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = ((in_len as isize - off).min(out_len as isize)).max(0) as usize;
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], s: &ConvShape, col: &mut [f64]) {
    let hw_out = s.ho * s.wo;
    col.fill(0.0);
    for ci in 0..s.cin_g() {
        let plane = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            let oy_off = (ky * s.dil) as isize - s.pad as isize;
            let (y0, y1) = valid_range(oy_off, s.ho, s.h);
            for kx in 0..s.kw {
                let ox_off = (kx * s.dil) as isize - s.pad as isize;
                let (x0, x1) = valid_range(ox_off, s.wo, s.w);
                let row = (ci * s.kh + ky) * s.kw + kx;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                for oy in y0..y1 {
                    let iy = (oy as isize + oy_off) as usize;
                    let src = &plane[iy * s.w..(iy + 1) * s.w];
                    let drow = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                    for ox in x0..x1 {
                        drow[ox] = src[(ox as isize + ox_off) as usize];
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], s: &ConvShape, dx: &mut [f64]) {
    let hw_out = s.ho * s.wo;
    for ci in 0..s.cin_g() {
        let plane = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            let oy_off = (ky * s.dil) as isize - s.pad as isize;
            let (y0, y1) = valid_range(oy_off, s.ho, s.h);
            for kx in 0..s.kw {
                let ox_off = (kx * s.dil) as isize - s.pad as isize;
                let (x0, x1) = valid_range(ox_off, s.wo, s.w);
                let row = (ci * s.kh + ky) * s.kw + kx;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                for oy in y0..y1 {
                    let iy = (oy as isize + oy_off) as usize;
                    let drow = &mut plane[iy * s.w..(iy + 1) * s.w];
                    let srow = &src[oy * s.wo..(oy + 1) * s.wo];
                    for ox in x0..x1 {
                        drow[(ox as isize + ox_off) as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, s: &ConvShape) -> Vec<f64> {
    let hw_in = s.h * s.w;
    let hw_out = s.ho * s.wo;
    let mut out = vec![0.0; s.n * s.cout * hw_out];
    if s.is_depthwise() && !s.is_pointwise() {
        depthwise_forward(x, w, s, &mut out);
    } else {
        let k = s.k();
        let mut col = if s.is_pointwise() { Vec::new() } else { vec![0.0; k * hw_out] };
        for n in 0..s.n {
            for g in 0..s.groups {
                let xg = &x[(n * s.cin + g * s.cin_g()) * hw_in..][..s.cin_g() * hw_in];
                let patches: &[f64] = if s.is_pointwise() {
                    xg
                } else {
                    im2col(xg, s, &mut col);
                    &col
                };
                let wg = &w[g * s.cout_g() * k..(g + 1) * s.cout_g() * k];
                let og = &mut out[(n * s.cout + g * s.cout_g()) * hw_out..][..s.cout_g() * hw_out];
                gemm(
                    s.cout_g(),
                    k,
                    hw_out,
                    1.0,
                    wg,
                    (k, 1),
                    patches,
                    (hw_out, 1),
                    0.0,
                    og,
                    (hw_out, 1),
                );
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..s.n {
            for co in 0..s.cout {
                let plane = &mut out[(n * s.cout + co) * hw_out..][..hw_out];
                plane.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

fn depthwise_forward(x: &[f64], w: &[f64], s: &ConvShape, out: &mut [f64]) {
    let hw_in = s.h * s.w;
    let hw_out = s.ho * s.wo;
    for n in 0..s.n {
        for c in 0..s.cin {
            let plane = &x[(n * s.cin + c) * hw_in..][..hw_in];
            let dst = &mut out[(n * s.cout + c) * hw_out..][..hw_out];
            let kernel = &w[c * s.kh * s.kw..(c + 1) * s.kh * s.kw];
            for ky in 0..s.kh {
                let oy_off = (ky * s.dil) as isize - s.pad as isize;
                let (y0, y1) = valid_range(oy_off, s.ho, s.h);
                for kx in 0..s.kw {
                    let tap = kernel[ky * s.kw + kx];
                    if tap == 0.0 {
                        continue;
                    }
                    let ox_off = (kx * s.dil) as isize - s.pad as isize;
                    let (x0, x1) = valid_range(ox_off, s.wo, s.w);
                    for oy in y0..y1 {
                        let iy = (oy as isize + oy_off) as usize;
                        let src = &plane[iy * s.w..(iy + 1) * s.w];
                        let drow = &mut dst[oy * s.wo..(oy + 1) * s.wo];
                        for ox in x0..x1 {
                            drow[ox] += tap * src[(ox as isize + ox_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    s: &ConvShape,
    gy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let hw_in = s.h * s.w;
    let hw_out = s.ho * s.wo;
    let taps = s.kh * s.kw;
    for n in 0..s.n {
        for c in 0..s.cin {
            let plane = &x[(n * s.cin + c) * hw_in..][..hw_in];
            let g = &gy[(n * s.cout + c) * hw_out..][..hw_out];
            for ky in 0..s.kh {
                let oy_off = (ky * s.dil) as isize - s.pad as isize;
                let (y0, y1) = valid_range(oy_off, s.ho, s.h);
                for kx in 0..s.kw {
                    let ox_off = (kx * s.dil) as isize - s.pad as isize;
                    let (x0, x1) = valid_range(ox_off, s.wo, s.w);
                    let tap = w[c * taps + ky * s.kw + kx];
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = (oy as isize + oy_off) as usize;
                        let grow = &g[oy * s.wo..(oy + 1) * s.wo];
                        if dw.is_some() {
                            let src = &plane[iy * s.w..(iy + 1) * s.w];
                            for ox in x0..x1 {
                                acc += grow[ox] * src[(ox as isize + ox_off) as usize];
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[(n * s.cin + c) * hw_in + iy * s.w..][..s.w];
                            for ox in x0..x1 {
                                drow[(ox as isize + ox_off) as usize] += tap * grow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[c * taps + ky * s.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients into the provided buffers.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    s: &ConvShape,
    gy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let hw_in = s.h * s.w;
    let hw_out = s.ho * s.wo;
    if let Some(db) = db {
        for n in 0..s.n {
            for co in 0..s.cout {
                db[co] += gy[(n * s.cout + co) * hw_out..][..hw_out].iter().sum::<f64>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    if s.is_depthwise() && !s.is_pointwise() {
        depthwise_backward(x, w, s, gy, dx, dw);
        return;
    }
    let k = s.k();
    let pointwise = s.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * hw_out] };
    let mut dcol = if pointwise { Vec::new() } else { vec![0.0; k * hw_out] };
    for n in 0..s.n {
        for g in 0..s.groups {
            let x_off = (n * s.cin + g * s.cin_g()) * hw_in;
            let xg = &x[x_off..][..s.cin_g() * hw_in];
            let gyg = &gy[(n * s.cout + g * s.cout_g()) * hw_out..][..s.cout_g() * hw_out];
            let wg = &w[g * s.cout_g() * k..(g + 1) * s.cout_g() * k];
            if let Some(dw) = dw.as_deref_mut() {
                let patches: &[f64] = if pointwise {
                    xg
                } else {
                    im2col(xg, s, &mut col);
                    &col
                };
                let dwg = &mut dw[g * s.cout_g() * k..(g + 1) * s.cout_g() * k];
                // dW += dY · colᵀ
                gemm(
                    s.cout_g(),
                    hw_out,
                    k,
                    1.0,
                    gyg,
                    (hw_out, 1),
                    patches,
                    (1, hw_out),
                    1.0,
                    dwg,
                    (k, 1),
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxg = &mut dx[x_off..][..s.cin_g() * hw_in];
                // dcol = Wᵀ · dY
                if pointwise {
                    gemm(k, s.cout_g(), hw_out, 1.0, wg, (1, k), gyg, (hw_out, 1), 1.0, dxg, (hw_out, 1));
                } else {
                    gemm(k, s.cout_g(), hw_out, 1.0, wg, (1, k), gyg, (hw_out, 1), 0.0, &mut dcol, (hw_out, 1));
                    col2im_add(&dcol, s, dxg);
                }
            }
        }
    }
}

/// 2×2 stride-2 max pooling. Returns the pooled values and, per output, the
/// flat input index that won (first in row-major window order on ties).
pub(crate) fn maxpool2_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Source index pair and weight of the second tap for each output
/// coordinate of a ×2 half-pixel-centre bilinear resampling.
pub(crate) fn up2_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_up2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * wo + ox] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

pub(crate) fn bilinear_up2_backward(gy: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    let ty = up2_taps(h);
    let tx = up2_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    for p in 0..planes {
        let g = &gy[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox];
                let top = (1.0 - fy) * v;
                let bot = fy * v;
                d[y0 * w + x0] += (1.0 - fx) * top;
                d[y0 * w + x1] += fx * top;
                d[y1 * w + x0] += (1.0 - fx) * bot;
                d[y1 * w + x1] += fx * bot;
            }
        }
    }
}
