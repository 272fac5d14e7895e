//! Grouped 2-D convolution (cross-correlation) with zero padding.
//!
//! Dense groups go through im2col + GEMM; the depth-wise case
//! (one input and one output channel per group) uses direct loops.

use super::ops::gemm;
use super::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
}

fn geometry(input: &[usize], kernel: &[usize], stride: usize, pad: usize, groups: usize) -> Result<Geometry> {
    let [batch, cin, h, w] = *input else {
        return Err(Error::shape("conv2d", format!("input must be [B,C,H,W], got {input:?}")));
    };
    let [cout, cin_g, kh, kw] = *kernel else {
        return Err(Error::shape("conv2d", format!("kernel must be [Cout,Cin/g,kH,kW], got {kernel:?}")));
    };
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("groups {groups} must divide input channels {cin} and output channels {cout}"),
        ));
    }
    if cin_g != cin / groups {
        return Err(Error::shape(
            "conv2d",
            format!("kernel expects {cin_g} channels per group, input provides {}", cin / groups),
        ));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, w + 2 * pad)));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    Ok(Geometry { batch, cin, h, w, cout, kh, kw, stride, pad, groups, ho, wo })
}

/// Unfolds the channels of group `gi` in sample `bi` into `[Cin_g·kH·kW, Ho·Wo]`.
fn im2col(x: &[f64], g: &Geometry, bi: usize, gi: usize, col: &mut [f64]) {
    let npix = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let ch = bi * g.cin + gi * g.cin_g() + c;
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * npix..(row + 1) * npix];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back into the input gradient.
fn col2im(col: &[f64], g: &Geometry, bi: usize, gi: usize, dx: &mut [f64]) {
    let npix = g.ho * g.wo;
    for c in 0..g.cin_g() {
        let ch = bi * g.cin + gi * g.cin_g() + c;
        let plane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * npix..(row + 1) * npix];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let prow = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            prow[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k`.
fn tap_range(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < n_in
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n_in + pad > k { ((n_in + pad - k - 1) / stride + 1).min(n_out) } else { 0 };
    (lo, hi.max(lo))
}

fn depthwise_forward(x: &[f64], k: &[f64], g: &Geometry, out: &mut [f64]) {
    let npix = g.ho * g.wo;
    for bi in 0..g.batch {
        for c in 0..g.cin {
            let plane = &x[(bi * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let o = &mut out[(bi * g.cout + c) * npix..][..npix];
            let kern = &k[c * g.kh * g.kw..][..g.kh * g.kw];
            for ki in 0..g.kh {
                let (i_lo, i_hi) = tap_range(ki, g.pad, g.stride, g.h, g.ho);
                for kj in 0..g.kw {
                    let wv = kern[ki * g.kw + kj];
                    let (j_lo, j_hi) = tap_range(kj, g.pad, g.stride, g.w, g.wo);
                    for oi in i_lo..i_hi {
                        let ii = oi * g.stride + ki - g.pad;
                        let src = &plane[ii * g.w..];
                        let dst = &mut o[oi * g.wo..];
                        for oj in j_lo..j_hi {
                            dst[oj] += wv * src[oj * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(x: &[f64], k: &[f64], g: &Geometry, gout: &[f64], dx: Option<&mut [f64]>, dk: Option<&mut [f64]>) {
    let npix = g.ho * g.wo;
    let mut dx = dx;
    let mut dk = dk;
    for bi in 0..g.batch {
        for c in 0..g.cin {
            let base_in = (bi * g.cin + c) * g.h * g.w;
            let go = &gout[(bi * g.cout + c) * npix..][..npix];
            for ki in 0..g.kh {
                let (i_lo, i_hi) = tap_range(ki, g.pad, g.stride, g.h, g.ho);
                for kj in 0..g.kw {
                    let kidx = c * g.kh * g.kw + ki * g.kw + kj;
                    let wv = k[kidx];
                    let (j_lo, j_hi) = tap_range(kj, g.pad, g.stride, g.w, g.wo);
                    let mut acc = 0.0;
                    for oi in i_lo..i_hi {
                        let ii = oi * g.stride + ki - g.pad;
                        for oj in j_lo..j_hi {
                            let jj = oj * g.stride + kj - g.pad;
                            let gv = go[oi * g.wo + oj];
                            acc += gv * x[base_in + ii * g.w + jj];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[base_in + ii * g.w + jj] += gv * wv;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    geo: Geometry,
}

impl Backward for Conv2dBackward {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, gout: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = &self.geo;
        let (x, k) = (inputs[0].data(), inputs[1].data());
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dk = needs[1].then(|| vec![0.0; k.len()]);
        if g.depthwise() {
            depthwise_backward(x, k, g, gout.data(), dx.as_deref_mut(), dk.as_deref_mut());
        } else {
            let npix = g.ho * g.wo;
            let rows = g.col_rows();
            let mut col = vec![0.0; rows * npix];
            let mut dcol = vec![0.0; rows * npix];
            for bi in 0..g.batch {
                for gi in 0..g.groups {
                    let go = &gout.data()[(bi * g.cout + gi * g.cout_g()) * npix..][..g.cout_g() * npix];
                    let kg = &k[gi * g.cout_g() * rows..][..g.cout_g() * rows];
                    if let Some(dk) = dk.as_mut() {
                        let src: &[f64] = if g.pointwise() {
                            &x[(bi * g.cin + gi * g.cin_g()) * npix..][..rows * npix]
                        } else {
                            im2col(x, g, bi, gi, &mut col);
                            &col
                        };
                        let dkg = &mut dk[gi * g.cout_g() * rows..][..g.cout_g() * rows];
                        gemm(g.cout_g(), npix, rows, go, false, src, true, dkg, true);
                    }
                    if let Some(dx) = dx.as_mut() {
                        if g.pointwise() {
                            let dxg = &mut dx[(bi * g.cin + gi * g.cin_g()) * npix..][..rows * npix];
                            gemm(rows, g.cout_g(), npix, kg, true, go, false, dxg, true);
                        } else {
                            gemm(rows, g.cout_g(), npix, kg, true, go, false, &mut dcol, false);
                            col2im(&dcol, g, bi, gi, dx);
                        }
                    }
                }
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::new(inputs[0].shape(), d)).transpose()?,
            dk.map(|d| Tensor::new(inputs[1].shape(), d)).transpose()?,
        ])
    }
}

/// Plain-value convolution, shared by the tape op and by callers that do not
/// need gradients.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize, groups: usize) -> Result<Tensor> {
    let g = geometry(input.shape(), kernel.shape(), stride, padding, groups)?;
    let npix = g.ho * g.wo;
    let mut out = vec![0.0; g.batch * g.cout * npix];
    let (x, k) = (input.data(), kernel.data());
    if g.depthwise() {
        depthwise_forward(x, k, &g, &mut out);
    } else {
        let rows = g.col_rows();
        let mut col = vec![0.0; if g.pointwise() { 0 } else { rows * npix }];
        for bi in 0..g.batch {
            for gi in 0..g.groups {
                let src: &[f64] = if g.pointwise() {
                    &x[(bi * g.cin + gi * g.cin_g()) * npix..][..rows * npix]
                } else {
                    im2col(x, &g, bi, gi, &mut col);
                    &col
                };
                let kg = &k[gi * g.cout_g() * rows..][..g.cout_g() * rows];
                let og = &mut out[(bi * g.cout + gi * g.cout_g()) * npix..][..g.cout_g() * npix];
                gemm(g.cout_g(), rows, npix, kg, false, src, false, og, false);
            }
        }
    }
    Tensor::new(&[g.batch, g.cout, g.ho, g.wo], out)
}

impl Tape {
    /// Cross-correlation of `[B,C_in,H,W]` with `[C_out,C_in/groups,kH,kW]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        let geo = geometry(self.shape(input), self.shape(kernel), stride, padding, groups)?;
        let value = conv2d_forward(self.value(input), self.value(kernel), stride, padding, groups)?;
        Ok(self.push_op(value, &[input, kernel], Conv2dBackward { geo }))
    }
}
