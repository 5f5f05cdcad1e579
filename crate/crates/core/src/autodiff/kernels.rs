//! Raw forward/backward kernels on row-major slices. Shapes are validated by
//! the graph layer before these are called.

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Unfold `input` into a `(c_in*kh*kw) x (out_h*out_w)` column matrix,
/// zero-filling taps that land in the padding.
pub fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npos = oh * ow;
    cols.clear();
    cols.resize(g.patch() * npos, T::zero());
    let pad = g.pad as isize;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let dst_row = &mut dst[oi * ow..(oi + 1) * ow];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < g.w as isize {
                            *d = src_row[jj as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npos = oh * ow;
    let pad = g.pad as isize;
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * npos..(row + 1) * npos];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj >= 0 && jj < g.w as isize {
                            dst_row[jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with optional per-channel bias.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    let npos = g.out_h() * g.out_w();
    let k = g.patch();
    let mut out = vec![T::zero(); g.c_out * npos];
    if let Some(b) = bias {
        for (c, chunk) in out.chunks_mut(npos).enumerate() {
            chunk.fill(b[c]);
        }
    }
    let mut cols = Vec::new();
    im2col(g, input, &mut cols);
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        g.c_out,
        k,
        npos,
        T::one(),
        kernel,
        k as isize,
        1,
        &cols,
        npos as isize,
        1,
        beta,
        &mut out,
        npos as isize,
        1,
    );
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let npos = g.out_h() * g.out_w();
    let k = g.patch();
    let kernel_grad = want_kernel.then(|| {
        let mut cols = Vec::new();
        im2col(g, input, &mut cols);
        let mut dk = vec![T::zero(); g.c_out * k];
        // dK = dY * cols^T
        T::gemm(
            g.c_out,
            npos,
            k,
            T::one(),
            grad_out,
            npos as isize,
            1,
            &cols,
            1,
            npos as isize,
            T::zero(),
            &mut dk,
            k as isize,
            1,
        );
        dk
    });
    let input_grad = want_input.then(|| {
        let mut dcols = vec![T::zero(); k * npos];
        // dcols = K^T * dY
        T::gemm(
            k,
            g.c_out,
            npos,
            T::one(),
            kernel,
            1,
            k as isize,
            grad_out,
            npos as isize,
            1,
            T::zero(),
            &mut dcols,
            npos as isize,
            1,
        );
        let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
        col2im(g, &dcols, &mut dx);
        dx
    });
    let bias_grad =
        want_bias.then(|| grad_out.chunks(npos).map(|ch| ch.iter().fold(T::zero(), |a, &x| a + x)).collect());
    ConvGrads { input: input_grad, kernel: kernel_grad, bias: bias_grad }
}

/// Max pooling without padding. Returns the pooled values and, per output,
/// the flat input index that won (first maximum in scan order).
pub fn max_pool_forward<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * stride * w + oj * stride;
                for di in 0..size {
                    for dj in 0..size {
                        let idx = base + (oi * stride + di) * w + oj * stride + dj;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

/// Interpolation taps for one axis of a 2x bilinear upsample with
/// half-pixel centers and edge clamping.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let t = src - i0 as f64;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

pub fn upsample2x_forward<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let rows = upsample_taps(h);
    let cols = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oi, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::of(wr0), T::of(wr1));
            for (oj, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                let (wc0, wc1) = (T::of(wc0), T::of(wc1));
                dst[oi * ow + oj] = wr0 * (wc0 * src[r0 * w + c0] + wc1 * src[r0 * w + c1])
                    + wr1 * (wc0 * src[r1 * w + c0] + wc1 * src[r1 * w + c1]);
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let rows = upsample_taps(h);
    let cols = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let gsrc = &grad_out[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            let (wr0, wr1) = (T::of(wr0), T::of(wr1));
            for (oj, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                let (wc0, wc1) = (T::of(wc0), T::of(wc1));
                let go = gsrc[oi * ow + oj];
                dst[r0 * w + c0] += go * wr0 * wc0;
                dst[r0 * w + c1] += go * wr0 * wc1;
                dst[r1 * w + c0] += go * wr1 * wc0;
                dst[r1 * w + c1] += go * wr1 * wc1;
            }
        }
    }
    dx
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^-|x|), stable for large |x|
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
