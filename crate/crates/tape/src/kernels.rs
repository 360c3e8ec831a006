//! Dense inner loops. Everything here is single threaded and runs in a fixed
//! summation order, so results are bit-reproducible for a given input.

use crate::tensor::Real;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn sum<T: Real>(x: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += x[c * 8 + l];
        }
    }
    let mut tail = T::zero();
    for &v in &x[chunks * 8..] {
        tail += v;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Valid output range `[lo, hi)` for a tap at `offset` relative to the output
/// position, on an input of length `len`.
#[inline]
fn tap_range(offset: isize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, out_len as isize) as usize;
    (lo, hi.max(lo))
}

#[derive(Clone, Copy, Debug)]
pub struct Conv1dDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv1dDims {
    pub fn out_len(&self) -> usize {
        self.len + 2 * self.pad + 1 - self.kernel
    }
}

/// Stride-1 1-D convolution (cross-correlation), `x: [B, Ci, L]`, `w: [Co, Ci, K]`.
pub fn conv1d_forward<T: Real>(d: Conv1dDims, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let lo_out = d.out_len();
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            let out = &mut y[(b * d.out_ch + co) * lo_out..][..lo_out];
            let b0 = bias.map_or(T::zero(), |bv| bv[co]);
            out.iter_mut().for_each(|v| *v = b0);
            for ci in 0..d.in_ch {
                let xr = &x[(b * d.in_ch + ci) * d.len..][..d.len];
                let wr = &w[(co * d.in_ch + ci) * d.kernel..][..d.kernel];
                for (k, &wk) in wr.iter().enumerate() {
                    let off = k as isize - d.pad as isize;
                    let (lo, hi) = tap_range(off, d.len, lo_out);
                    let src = (lo as isize + off) as usize;
                    axpy(wk, &xr[src..src + (hi - lo)], &mut out[lo..hi]);
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of [`conv1d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Real>(
    d: Conv1dDims,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let lo_out = d.out_len();
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            let g = &dy[(b * d.out_ch + co) * lo_out..][..lo_out];
            if let Some(db) = db.as_deref_mut() {
                db[co] += sum(g);
            }
            for ci in 0..d.in_ch {
                let xr = &x[(b * d.in_ch + ci) * d.len..][..d.len];
                let wbase = (co * d.in_ch + ci) * d.kernel;
                for k in 0..d.kernel {
                    let off = k as isize - d.pad as isize;
                    let (lo, hi) = tap_range(off, d.len, lo_out);
                    let src = (lo as isize + off) as usize;
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[wbase + k] += dot(&g[lo..hi], &xr[src..src + (hi - lo)]);
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let dxr = &mut dx[(b * d.in_ch + ci) * d.len..][..d.len];
                        axpy(w[wbase + k], &g[lo..hi], &mut dxr[src..src + (hi - lo)]);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl Conv2dDims {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            self.height + 2 * self.pad + 1 - self.kernel,
            self.width + 2 * self.pad + 1 - self.kernel,
        )
    }
}

/// Stride-1 2-D cross-correlation, `x: [B, Ci, H, W]`, `w: [Co, Ci, K, K]`.
pub fn conv2d_forward<T: Real>(d: Conv2dDims, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let (oh, ow) = d.out_hw();
    let plane = d.height * d.width;
    let kk = d.kernel * d.kernel;
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            let out = &mut y[(b * d.out_ch + co) * oh * ow..][..oh * ow];
            let b0 = bias.map_or(T::zero(), |bv| bv[co]);
            out.iter_mut().for_each(|v| *v = b0);
            for ci in 0..d.in_ch {
                let xp = &x[(b * d.in_ch + ci) * plane..][..plane];
                let wk = &w[(co * d.in_ch + ci) * kk..][..kk];
                for kh in 0..d.kernel {
                    let roff = kh as isize - d.pad as isize;
                    let (rlo, rhi) = tap_range(roff, d.height, oh);
                    for kw in 0..d.kernel {
                        let wv = wk[kh * d.kernel + kw];
                        let coff = kw as isize - d.pad as isize;
                        let (clo, chi) = tap_range(coff, d.width, ow);
                        let n = chi - clo;
                        let csrc = (clo as isize + coff) as usize;
                        for r in rlo..rhi {
                            let sr = (r as isize + roff) as usize;
                            axpy(wv, &xp[sr * d.width + csrc..][..n], &mut out[r * ow + clo..][..n]);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    d: Conv2dDims,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let (oh, ow) = d.out_hw();
    let plane = d.height * d.width;
    let kk = d.kernel * d.kernel;
    for b in 0..d.batch {
        for co in 0..d.out_ch {
            let g = &dy[(b * d.out_ch + co) * oh * ow..][..oh * ow];
            if let Some(db) = db.as_deref_mut() {
                db[co] += sum(g);
            }
            for ci in 0..d.in_ch {
                let xp = &x[(b * d.in_ch + ci) * plane..][..plane];
                let wbase = (co * d.in_ch + ci) * kk;
                for kh in 0..d.kernel {
                    let roff = kh as isize - d.pad as isize;
                    let (rlo, rhi) = tap_range(roff, d.height, oh);
                    for kw in 0..d.kernel {
                        let coff = kw as isize - d.pad as isize;
                        let (clo, chi) = tap_range(coff, d.width, ow);
                        let n = chi - clo;
                        let csrc = (clo as isize + coff) as usize;
                        let wi = wbase + kh * d.kernel + kw;
                        if let Some(dw) = dw.as_deref_mut() {
                            let mut acc = T::zero();
                            for r in rlo..rhi {
                                let sr = (r as isize + roff) as usize;
                                acc += dot(&g[r * ow + clo..][..n], &xp[sr * d.width + csrc..][..n]);
                            }
                            dw[wi] += acc;
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxp = &mut dx[(b * d.in_ch + ci) * plane..][..plane];
                            for r in rlo..rhi {
                                let sr = (r as isize + roff) as usize;
                                axpy(w[wi], &g[r * ow + clo..][..n], &mut dxp[sr * d.width + csrc..][..n]);
                            }
                        }
                    }
                }
            }
        }
    }
}
