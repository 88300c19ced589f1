//! Dense NCHW tensors and the handful of layers the U-Net needs, each with
//! an explicit backward pass.
//!
//! Everything is generic over [`Real`] so the same code trains in `f32` and
//! runs finite-difference checks in `f64`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Floating-point element type.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha·A·B + beta·C` with explicit row/column strides.
    ///
    /// # Safety
    /// Every strided index must be in bounds of its slice; see [`gemm`].
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A matrix view: slice plus row and column strides.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rs: usize, cs: usize) -> Self {
        Self { data, rs, cs }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Bounds-checked `C = alpha·A·B + beta·C` for `A: m×k`, `B: k×n`,
/// `C: m×n` stored with row stride `rsc` and unit column stride.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: Mat<'_, T>,
    b: Mat<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
) {
    assert!(span(m, k, a.rs, a.cs) <= a.data.len(), "gemm: A out of bounds");
    assert!(span(k, n, b.rs, b.cs) <= b.data.len(), "gemm: B out of bounds");
    assert!(span(m, n, rsc, 1) <= c.len(), "gemm: C out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all strided accesses were checked against the slice lengths.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

/// Batch of `n` images with `c` channels of `h × w`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// All channels of sample `i`.
    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.c * self.hw();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.c * self.hw();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn plane(&self, i: usize, ch: usize) -> &[T] {
        let p = self.hw();
        let o = (i * self.c + ch) * p;
        &self.data[o..o + p]
    }

    pub fn plane_mut(&mut self, i: usize, ch: usize) -> &mut [T] {
        let p = self.hw();
        let o = (i * self.c + ch) * p;
        &mut self.data[o..o + p]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Geometry of a square, stride-1, zero-padded "same" convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    /// Odd kernel size; padding is `k / 2` on every side.
    pub k: usize,
}

impl ConvShape {
    pub fn weights(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

/// Upper bound on the im2col buffer, in elements.
const COL_BUDGET: usize = 1 << 21;

fn rows_per_chunk(s: ConvShape, h: usize, w: usize) -> usize {
    let per_row = s.cin * s.k * s.k * w;
    (COL_BUDGET / per_row.max(1)).clamp(1, h)
}

/// Unrolls rows `r0..r1` of a `cin × h × w` image into a
/// `(cin·k·k) × ((r1−r0)·w)` matrix.
fn im2col<T: Real>(x: &[T], s: ConvShape, h: usize, w: usize, r0: usize, r1: usize, cols: &mut [T]) {
    let pad = (s.k / 2) as isize;
    let p = (r1 - r0) * w;
    let mut row = 0;
    for ci in 0..s.cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let dst = &mut cols[row * p..(row + 1) * p];
                let dx = kx as isize - pad;
                for (ri, r) in (r0..r1).enumerate() {
                    let yy = r as isize + ky as isize - pad;
                    let out = &mut dst[ri * w..(ri + 1) * w];
                    if yy < 0 || yy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[yy as usize * w..(yy as usize + 1) * w];
                    for (c, o) in out.iter_mut().enumerate() {
                        let xx = c as isize + dx;
                        *o = if xx < 0 || xx >= w as isize {
                            T::zero()
                        } else {
                            src[xx as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the columns back into the image.
fn col2im_add<T: Real>(cols: &[T], s: ConvShape, h: usize, w: usize, r0: usize, r1: usize, x: &mut [T]) {
    let pad = (s.k / 2) as isize;
    let p = (r1 - r0) * w;
    let mut row = 0;
    for ci in 0..s.cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let src = &cols[row * p..(row + 1) * p];
                let dx = kx as isize - pad;
                for (ri, r) in (r0..r1).enumerate() {
                    let yy = r as isize + ky as isize - pad;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[yy as usize * w..(yy as usize + 1) * w];
                    for (c, v) in src[ri * w..(ri + 1) * w].iter().enumerate() {
                        let xx = c as isize + dx;
                        if xx >= 0 && xx < w as isize {
                            dst[xx as usize] += *v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Stride-1 "same" convolution. `w` is `[cout, cin, k, k]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &[T], b: Option<&[T]>, s: ConvShape) -> Tensor<T> {
    assert_eq!(x.c, s.cin, "conv input channels");
    assert_eq!(w.len(), s.weights());
    let (h, wd) = (x.h, x.w);
    let p = h * wd;
    let kk = s.cin * s.k * s.k;
    let mut y = Tensor::zeros(x.n, s.cout, h, wd);
    let wm = Mat::new(w, kk, 1);
    let mut cols = Vec::new();
    for i in 0..x.n {
        let xs = x.sample(i);
        let ys = y.sample_mut(i);
        if s.k == 1 {
            gemm(s.cout, kk, p, T::one(), wm, Mat::new(xs, p, 1), T::zero(), ys, p);
        } else {
            let chunk = rows_per_chunk(s, h, wd);
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + chunk).min(h);
                let pc = (r1 - r0) * wd;
                cols.resize(kk * pc, T::zero());
                im2col(xs, s, h, wd, r0, r1, &mut cols);
                gemm(s.cout, kk, pc, T::one(), wm, Mat::new(&cols, pc, 1), T::zero(), &mut ys[r0 * wd..], p);
                r0 = r1;
            }
        }
        if let Some(b) = b {
            for (co, &bv) in b.iter().enumerate() {
                ys[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients of [`conv2d`] and returns the input
/// gradient when `need_dx` is set.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    s: ConvShape,
    dw: &mut [T],
    db: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (h, wd) = (x.h, x.w);
    let p = h * wd;
    let kk = s.cin * s.k * s.k;
    let mut dx = need_dx.then(|| Tensor::zeros(x.n, s.cin, h, wd));
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for i in 0..x.n {
        let xs = x.sample(i);
        let dys = dy.sample(i);
        if s.k == 1 {
            // dW += dY · Xᵀ ; dX = Wᵀ · dY
            gemm(s.cout, p, kk, T::one(), Mat::new(dys, p, 1), Mat::new(xs, 1, p), T::one(), dw, kk);
            if let Some(dx) = dx.as_mut() {
                gemm(kk, s.cout, p, T::one(), Mat::new(w, 1, kk), Mat::new(dys, p, 1), T::zero(), dx.sample_mut(i), p);
            }
        } else {
            let chunk = rows_per_chunk(s, h, wd);
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + chunk).min(h);
                let pc = (r1 - r0) * wd;
                cols.resize(kk * pc, T::zero());
                im2col(xs, s, h, wd, r0, r1, &mut cols);
                let dyc = Mat::new(&dys[r0 * wd..], p, 1);
                gemm(s.cout, pc, kk, T::one(), dyc, Mat::new(&cols, 1, pc), T::one(), dw, kk);
                if let Some(dx) = dx.as_mut() {
                    dcols.resize(kk * pc, T::zero());
                    gemm(kk, s.cout, pc, T::one(), Mat::new(w, 1, kk), dyc, T::zero(), &mut dcols, pc);
                    col2im_add(&dcols, s, h, wd, r0, r1, dx.sample_mut(i));
                }
                r0 = r1;
            }
        }
    }
    if let Some(db) = db {
        for i in 0..dy.n {
            for (co, g) in db.iter_mut().enumerate() {
                *g += dy.plane(i, co).iter().copied().sum::<T>();
            }
        }
    }
    dx
}

/// Per-channel 2×2 convolution, zero-padded one pixel on the right and
/// bottom so the output keeps the input size. `w` is `[c, 2, 2]`.
pub fn depthwise2x2<T: Real>(x: &Tensor<T>, w: &[T], b: &[T]) -> Tensor<T> {
    assert_eq!(w.len(), x.c * 4);
    let (h, wd) = (x.h, x.w);
    let mut y = Tensor::zeros(x.n, x.c, h, wd);
    for i in 0..x.n {
        for c in 0..x.c {
            let k = &w[c * 4..c * 4 + 4];
            let src = x.plane(i, c);
            let dst = y.plane_mut(i, c);
            for r in 0..h {
                for col in 0..wd {
                    let mut acc = b[c] + k[0] * src[r * wd + col];
                    if col + 1 < wd {
                        acc += k[1] * src[r * wd + col + 1];
                    }
                    if r + 1 < h {
                        acc += k[2] * src[(r + 1) * wd + col];
                        if col + 1 < wd {
                            acc += k[3] * src[(r + 1) * wd + col + 1];
                        }
                    }
                    dst[r * wd + col] = acc;
                }
            }
        }
    }
    y
}

pub fn depthwise2x2_backward<T: Real>(
    x: &Tensor<T>,
    w: &[T],
    dy: &Tensor<T>,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (h, wd) = (x.h, x.w);
    let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, h, wd));
    for i in 0..x.n {
        for c in 0..x.c {
            let k = &w[c * 4..c * 4 + 4];
            let src = x.plane(i, c);
            let g = dy.plane(i, c);
            let mut acc = [T::zero(); 5];
            let mut dxp = dx.as_mut().map(|d| d.plane_mut(i, c));
            for r in 0..h {
                for col in 0..wd {
                    let gv = g[r * wd + col];
                    acc[4] += gv;
                    let taps = [
                        (true, r * wd + col, 0),
                        (col + 1 < wd, r * wd + col + 1, 1),
                        (r + 1 < h, (r + 1) * wd + col, 2),
                        (r + 1 < h && col + 1 < wd, (r + 1) * wd + col + 1, 3),
                    ];
                    for (ok, idx, t) in taps {
                        if ok {
                            acc[t] += gv * src[idx];
                            if let Some(d) = dxp.as_deref_mut() {
                                d[idx] += gv * k[t];
                            }
                        }
                    }
                }
            }
            for t in 0..4 {
                dw[c * 4 + t] += acc[t];
            }
            db[c] += acc[4];
        }
    }
    dx
}

/// Saved state of a batch-norm application.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and unbiased variance (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub train: bool,
}

/// Batch normalization followed by ReLU. In train mode the batch statistics
/// are used; otherwise the supplied running statistics.
#[allow(clippy::too_many_arguments)]
pub fn bn_relu<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
    train: bool,
) -> (Tensor<T>, BnCache<T>) {
    let p = x.hw();
    let m = x.n * p;
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = vec![T::zero(); x.c];
    let mut batch_mean = Vec::new();
    let mut batch_var = Vec::new();
    for c in 0..x.c {
        let (mean, var) = if train {
            let mut s = 0.0;
            for i in 0..x.n {
                s += x.plane(i, c).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = s / m as f64;
            let mut ss = 0.0;
            for i in 0..x.n {
                ss += x.plane(i, c).iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
            }
            batch_mean.push(mean);
            batch_var.push(if m > 1 { ss / (m - 1) as f64 } else { 0.0 });
            (mean, ss / m as f64)
        } else {
            (running_mean[c].as_f64(), running_var[c].as_f64())
        };
        let is = 1.0 / (var + eps).sqrt();
        inv_std[c] = T::of(is);
        let (mu, ist) = (T::of(mean), T::of(is));
        for i in 0..x.n {
            let o = (i * x.c + c) * p;
            for (dst, &v) in xhat[o..o + p].iter_mut().zip(x.plane(i, c)) {
                *dst = (v - mu) * ist;
            }
        }
    }
    let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
    for i in 0..x.n {
        for c in 0..x.c {
            let o = (i * x.c + c) * p;
            let (g, b) = (gamma[c], beta[c]);
            for (dst, &xh) in y.data[o..o + p].iter_mut().zip(&xhat[o..o + p]) {
                *dst = (g * xh + b).max(T::zero());
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
            train,
        },
    )
}

/// Backward of [`bn_relu`]; returns the gradient with respect to its input.
pub fn bn_relu_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &[T],
    beta: &[T],
    dy: &Tensor<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let p = dy.hw();
    let m = (dy.n * p) as f64;
    let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
    // Gradient after the ReLU mask, staged in dx.
    for i in 0..dy.n {
        for c in 0..dy.c {
            let o = (i * dy.c + c) * p;
            let (g, b) = (gamma[c], beta[c]);
            for ((d, &gy), &xh) in dx.data[o..o + p].iter_mut().zip(&dy.data[o..o + p]).zip(&cache.xhat[o..o + p]) {
                *d = if g * xh + b > T::zero() { gy } else { T::zero() };
            }
        }
    }
    for c in 0..dy.c {
        let (mut sd, mut sdx) = (0.0f64, 0.0f64);
        for i in 0..dy.n {
            let o = (i * dy.c + c) * p;
            for (&d, &xh) in dx.data[o..o + p].iter().zip(&cache.xhat[o..o + p]) {
                sd += d.as_f64();
                sdx += (d * xh).as_f64();
            }
        }
        dgamma[c] += T::of(sdx);
        dbeta[c] += T::of(sd);
        let g = gamma[c].as_f64();
        let is = cache.inv_std[c].as_f64();
        for i in 0..dy.n {
            let o = (i * dy.c + c) * p;
            if cache.train {
                // dx = γ·σ⁻¹/m · (m·d − Σd − x̂·Σ(d·x̂))
                let k = T::of(g * is / m);
                let (msd, msdx) = (T::of(sd), T::of(sdx));
                let mm = T::of(m);
                for (d, &xh) in dx.data[o..o + p].iter_mut().zip(&cache.xhat[o..o + p]) {
                    *d = k * (mm * *d - msd - xh * msdx);
                }
            } else {
                let k = T::of(g * is);
                dx.data[o..o + p].iter_mut().for_each(|d| *d *= k);
            }
        }
    }
    dx
}

/// 2×2 max pooling with stride 2. Returns the output and, per output cell,
/// the flat in-plane index of the winning input.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "max pooling needs even dims");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; y.data.len()];
    for i in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(i, c);
            let base = (i * x.c + c) * oh * ow;
            for r in 0..oh {
                for col in 0..ow {
                    let mut best = 2 * r * x.w + 2 * col;
                    for idx in [best + 1, best + x.w, best + x.w + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    y.data[base + r * ow + col] = src[best];
                    arg[base + r * ow + col] = best as u32;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u32]) -> Tensor<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let op = dy.hw();
    for plane in 0..dy.n * dy.c {
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for k in 0..op {
            dst[arg[plane * op + k] as usize] += dy.data[plane * op + k];
        }
    }
    dx
}

/// Interpolation used to double the spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum UpsampleMode {
    /// Half-pixel-centred bilinear.
    #[default]
    Bilinear,
    Nearest,
}

/// Source taps `(i0, i1, w0, w1)` for each of the `2s` outputs.
fn taps<T: Real>(s: usize, mode: UpsampleMode) -> Vec<(usize, usize, T, T)> {
    (0..2 * s)
        .map(|o| match mode {
            UpsampleMode::Nearest => (o / 2, o / 2, T::one(), T::zero()),
            UpsampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let i0 = src as usize;
                let i1 = (i0 + 1).min(s - 1);
                let f = src - i0 as f64;
                (i0, i1, T::of(1.0 - f), T::of(f))
            }
        })
        .collect()
}

/// Doubles height and width.
pub fn upsample2<T: Real>(x: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let ty = taps::<T>(x.h, mode);
    let tx = taps::<T>(x.w, mode);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut tmp = vec![T::zero(); x.h * ow];
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.hw()..(plane + 1) * x.hw()];
        for r in 0..x.h {
            let row = &src[r * x.w..(r + 1) * x.w];
            for (o, &(a, b, wa, wb)) in tx.iter().enumerate() {
                tmp[r * ow + o] = wa * row[a] + wb * row[b];
            }
        }
        let dst = &mut y.data[plane * oh * ow..(plane + 1) * oh * ow];
        for (o, &(a, b, wa, wb)) in ty.iter().enumerate() {
            for c in 0..ow {
                dst[o * ow + c] = wa * tmp[a * ow + c] + wb * tmp[b * ow + c];
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`].
pub fn upsample2_backward<T: Real>(dy: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let ty = taps::<T>(h, mode);
    let tx = taps::<T>(w, mode);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let mut tmp = vec![T::zero(); h * dy.w];
    for plane in 0..dy.n * dy.c {
        let src = &dy.data[plane * dy.hw()..(plane + 1) * dy.hw()];
        tmp.fill(T::zero());
        for (o, &(a, b, wa, wb)) in ty.iter().enumerate() {
            for c in 0..dy.w {
                let g = src[o * dy.w + c];
                tmp[a * dy.w + c] += wa * g;
                tmp[b * dy.w + c] += wb * g;
            }
        }
        let dst = &mut dx.data[plane * h * w..(plane + 1) * h * w];
        for r in 0..h {
            for (o, &(a, b, wa, wb)) in tx.iter().enumerate() {
                let g = tmp[r * dy.w + o];
                dst[r * w + a] += wa * g;
                dst[r * w + b] += wb * g;
            }
        }
    }
    dx
}

/// Logistic function, held strictly inside (0, 1) where it would round to
/// an endpoint.
#[inline]
pub fn sigmoid<T: Real>(q: T) -> T {
    let s = if q >= T::zero() {
        T::one() / (T::one() + (-q).exp())
    } else {
        let e = q.exp();
        e / (T::one() + e)
    };
    s.max(T::min_positive_value()).min(T::one() - T::epsilon() / T::of(2.0))
}

/// Channel-wise concatenation of two batches.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat dims");
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec(a.n, a.c + b.c, a.h, a.w, data)
}

/// Inverse of [`concat`]: the first `ca` channels and the rest.
pub fn split<T: Real>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let cb = x.c - ca;
    let p = x.hw();
    let mut a = Vec::with_capacity(x.n * ca * p);
    let mut b = Vec::with_capacity(x.n * cb * p);
    for i in 0..x.n {
        let s = x.sample(i);
        a.extend_from_slice(&s[..ca * p]);
        b.extend_from_slice(&s[ca * p..]);
    }
    (Tensor::from_vec(x.n, ca, x.h, x.w, a), Tensor::from_vec(x.n, cb, x.h, x.w, b))
}

/// Inverted dropout mask: each entry is 0 with probability `p`, otherwise
/// `1/(1−p)`.
pub fn dropout_mask<T: Real>(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

pub fn apply_mask<T: Real>(x: &mut Tensor<T>, mask: &[T]) {
    x.data.iter_mut().zip(mask).for_each(|(v, m)| *v *= *m);
}

/// Seeded generator for dropout and initialization streams.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let step = T::of(lr / c1);
        let c2s = T::of(c2.sqrt());
        let eps = T::of(self.eps);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + ob1 * g;
            self.v[i] = b2 * self.v[i] + ob2 * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() / c2s + eps);
        }
    }
}
