//! Forward kernels and their adjoints as plain functions over [`Tensor`].
//!
//! All spatial kernels take channel-last `H × W × C` inputs. The graph layer
//! in `graph.rs` wires these into recorded operations; they are exposed so
//! that cost accounting and tests can call them without a tape.

use super::{axis_extents, Scalar, Tensor};
use crate::error::{Error, Result};

/// Kernel size, stride and zero padding of a square 2-D window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Window { kernel, stride, padding }
    }

    /// `floor((n + 2p - k) / s) + 1`, or an error when that is not positive.
    pub fn out_extent(&self, op: &'static str, n: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::dim(op, "kernel and stride must be positive"));
        }
        let padded = n + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::dim(
                op,
                format!("extent {n} with padding {} is smaller than kernel {}", self.padding, self.kernel),
            ));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed (fractionally strided) convolution.
    pub fn transposed_extent(&self, op: &'static str, n: usize) -> Result<usize> {
        let full = (n - 1) * self.stride + self.kernel;
        if self.kernel == 0 || self.stride == 0 || full <= 2 * self.padding {
            return Err(Error::dim(op, format!("invalid transposed geometry {self:?} for extent {n}")));
        }
        Ok(full - 2 * self.padding)
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }
}

// ---------------------------------------------------------------------------
// matmul

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(&[m, n], out)
}

pub(crate) fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        (sa, sb) => Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"))),
    }
}

/// Returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut da = vec![T::zero(); m * k];
    T::gemm(m, n, k, g.data(), false, b.data(), true, &mut da, false);
    let mut db = vec![T::zero(); k * n];
    T::gemm(k, m, n, a.data(), true, g.data(), false, &mut db, false);
    (Tensor { shape: vec![m, k], data: da }, Tensor { shape: vec![k, n], data: db })
}

// ---------------------------------------------------------------------------
// dense convolution

/// Upper bound on im2col scratch elements; larger maps are processed in row bands.
const IM2COL_BUDGET: usize = 1 << 22;

fn conv_shapes<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    win: Window,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (h, wd, cin) = x.hwc(op)?;
    let [k1, k2, wcin, cout] = w.shape()[..] else {
        return Err(Error::dim(op, format!("weight must be k×k×Cin×Cout, got {:?}", w.shape())));
    };
    if k1 != win.kernel || k2 != win.kernel || wcin != cin {
        return Err(Error::dim(
            op,
            format!("weight {:?} incompatible with input {:?} and kernel {}", w.shape(), x.shape(), win.kernel),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim(op, format!("bias shape {:?} != [{cout}]", b.shape())));
        }
    }
    let ho = win.out_extent(op, h)?;
    let wo = win.out_extent(op, wd)?;
    Ok((h, wd, cin, cout, ho, wo))
}

fn is_pointwise(win: Window) -> bool {
    win.kernel == 1 && win.stride == 1 && win.padding == 0
}

#[allow(clippy::too_many_arguments)]
fn im2col_band<T: Scalar>(
    x: &[T],
    (h, wd, cin): (usize, usize, usize),
    wo: usize,
    win: Window,
    rows: std::ops::Range<usize>,
    cols: &mut Vec<T>,
) {
    let kk = win.kernel * win.kernel * cin;
    cols.clear();
    cols.resize(rows.len() * wo * kk, T::zero());
    for (r, oy) in rows.enumerate() {
        for ox in 0..wo {
            let base = (r * wo + ox) * kk;
            for ky in 0..win.kernel {
                let Some(iy) = win.src(oy, ky, h) else { continue };
                for kx in 0..win.kernel {
                    let Some(ix) = win.src(ox, kx, wd) else { continue };
                    let dst = base + (ky * win.kernel + kx) * cin;
                    let src = (iy * wd + ix) * cin;
                    cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
}

fn band_rows(wo: usize, kk: usize) -> usize {
    (IM2COL_BUDGET / (wo * kk).max(1)).max(1)
}

/// Cross-correlation with zero padding. `w` is `k × k × Cin × Cout`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, win: Window) -> Result<Tensor<T>> {
    let (h, wd, cin, cout, ho, wo) = conv_shapes("conv2d", x, w, bias, win)?;
    let mut out = vec![T::zero(); ho * wo * cout];
    let kk = win.kernel * win.kernel * cin;
    if is_pointwise(win) {
        T::gemm(ho * wo, cin, cout, x.data(), false, w.data(), false, &mut out, false);
    } else {
        let band = band_rows(wo, kk);
        let mut cols = Vec::new();
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + band).min(ho);
            im2col_band(x.data(), (h, wd, cin), wo, win, r0..r1, &mut cols);
            let m = (r1 - r0) * wo;
            let dst = &mut out[r0 * wo * cout..r1 * wo * cout];
            T::gemm(m, kk, cout, &cols, false, w.data(), false, dst, false);
            r0 = r1;
        }
    }
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::new(&[ho, wo, cout], out)
}

/// Adjoints of [`conv2d`] with respect to input, weight and (optionally) bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    win: Window,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo, cout) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let kk = win.kernel * win.kernel * cin;
    let mut dx = vec![T::zero(); h * wd * cin];
    let mut dw = vec![T::zero(); kk * cout];
    if is_pointwise(win) {
        T::gemm(h * wd, cout, cin, g.data(), false, w.data(), true, &mut dx, false);
        T::gemm(cin, h * wd, cout, x.data(), true, g.data(), false, &mut dw, false);
    } else {
        let band = band_rows(wo, kk);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + band).min(ho);
            let m = (r1 - r0) * wo;
            let gb = &g.data()[r0 * wo * cout..r1 * wo * cout];
            im2col_band(x.data(), (h, wd, cin), wo, win, r0..r1, &mut cols);
            T::gemm(kk, m, cout, &cols, true, gb, false, &mut dw, true);
            dcols.clear();
            dcols.resize(m * kk, T::zero());
            T::gemm(m, cout, kk, gb, false, w.data(), true, &mut dcols, false);
            // col2im
            for (r, oy) in (r0..r1).enumerate() {
                for ox in 0..wo {
                    let base = (r * wo + ox) * kk;
                    for ky in 0..win.kernel {
                        let Some(iy) = win.src(oy, ky, h) else { continue };
                        for kx in 0..win.kernel {
                            let Some(ix) = win.src(ox, kx, wd) else { continue };
                            let src = base + (ky * win.kernel + kx) * cin;
                            let dst = (iy * wd + ix) * cin;
                            for c in 0..cin {
                                dx[dst + c] += dcols[src + c];
                            }
                        }
                    }
                }
            }
            r0 = r1;
        }
    }
    let db = with_bias.then(|| {
        let mut db = vec![T::zero(); cout];
        for row in g.data().chunks_exact(cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        Tensor { shape: vec![cout], data: db }
    });
    (
        Tensor { shape: x.shape().to_vec(), data: dx },
        Tensor { shape: w.shape().to_vec(), data: dw },
        db,
    )
}

// ---------------------------------------------------------------------------
// depthwise convolution

fn depthwise_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    win: Window,
) -> Result<(usize, usize, usize, usize, usize)> {
    const OP: &str = "depthwise_conv2d";
    let (h, wd, c) = x.hwc(OP)?;
    if w.shape() != [win.kernel, win.kernel, c] {
        return Err(Error::dim(OP, format!("weight {:?} != [{k}, {k}, {c}]", w.shape(), k = win.kernel)));
    }
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(Error::dim(OP, format!("bias shape {:?} != [{c}]", b.shape())));
        }
    }
    Ok((h, wd, c, win.out_extent(OP, h)?, win.out_extent(OP, wd)?))
}

/// Per-channel cross-correlation. `w` is `k × k × C`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    win: Window,
) -> Result<Tensor<T>> {
    let (h, wd, c, ho, wo) = depthwise_shapes(x, w, bias, win)?;
    let mut out = vec![T::zero(); ho * wo * c];
    let (xd, wdat) = (x.data(), w.data());
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * c..][..c];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for ky in 0..win.kernel {
                let Some(iy) = win.src(oy, ky, h) else { continue };
                for kx in 0..win.kernel {
                    let Some(ix) = win.src(ox, kx, wd) else { continue };
                    let xs = &xd[(iy * wd + ix) * c..][..c];
                    let ws = &wdat[(ky * win.kernel + kx) * c..][..c];
                    for ((o, &xv), &wv) in o.iter_mut().zip(xs).zip(ws) {
                        *o += xv * wv;
                    }
                }
            }
        }
    }
    Tensor::new(&[ho, wo, c], out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    win: Window,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (g.shape()[0], g.shape()[1]);
    let mut dx = vec![T::zero(); h * wd * c];
    let mut dw = vec![T::zero(); w.numel()];
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    for oy in 0..ho {
        for ox in 0..wo {
            let gs = &gd[(oy * wo + ox) * c..][..c];
            for ky in 0..win.kernel {
                let Some(iy) = win.src(oy, ky, h) else { continue };
                for kx in 0..win.kernel {
                    let Some(ix) = win.src(ox, kx, wd) else { continue };
                    let xo = (iy * wd + ix) * c;
                    let wo_ = (ky * win.kernel + kx) * c;
                    for ch in 0..c {
                        dx[xo + ch] += gs[ch] * wdat[wo_ + ch];
                        dw[wo_ + ch] += gs[ch] * xd[xo + ch];
                    }
                }
            }
        }
    }
    let db = with_bias.then(|| {
        let mut db = vec![T::zero(); c];
        for row in gd.chunks_exact(c) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        Tensor { shape: vec![c], data: db }
    });
    (
        Tensor { shape: x.shape().to_vec(), data: dx },
        Tensor { shape: w.shape().to_vec(), data: dw },
        db,
    )
}

// ---------------------------------------------------------------------------
// transposed convolution

fn tconv_shapes<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    win: Window,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    const OP: &str = "transpose_conv2d";
    let (h, wd, cin) = x.hwc(OP)?;
    let [k1, k2, wcin, cout] = w.shape()[..] else {
        return Err(Error::dim(OP, format!("weight must be k×k×Cin×Cout, got {:?}", w.shape())));
    };
    if k1 != win.kernel || k2 != win.kernel || wcin != cin {
        return Err(Error::dim(OP, format!("weight {:?} incompatible with input {:?}", w.shape(), x.shape())));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim(OP, format!("bias shape {:?} != [{cout}]", b.shape())));
        }
    }
    Ok((h, wd, cin, cout, win.transposed_extent(OP, h)?, win.transposed_extent(OP, wd)?))
}

/// Output coordinate receiving input index `i` through kernel tap `k`.
#[inline]
fn tconv_dst(win: Window, i: usize, k: usize, n_out: usize) -> Option<usize> {
    let o = (i * win.stride + k) as isize - win.padding as isize;
    (o >= 0 && (o as usize) < n_out).then_some(o as usize)
}

/// Transposed convolution: every input cell scatters `x[i]·w[ky,kx]` into
/// output cell `i·s − p + (ky,kx)`. `w` is `k × k × Cin × Cout`.
pub fn transpose_conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    win: Window,
) -> Result<Tensor<T>> {
    let (h, wd, cin, cout, ho, wo) = tconv_shapes(x, w, bias, win)?;
    let mut out = vec![T::zero(); ho * wo * cout];
    let mut tap = vec![T::zero(); h * wd * cout];
    for ky in 0..win.kernel {
        for kx in 0..win.kernel {
            let wk = &w.data()[(ky * win.kernel + kx) * cin * cout..][..cin * cout];
            T::gemm(h * wd, cin, cout, x.data(), false, wk, false, &mut tap, false);
            for iy in 0..h {
                let Some(oy) = tconv_dst(win, iy, ky, ho) else { continue };
                for ix in 0..wd {
                    let Some(ox) = tconv_dst(win, ix, kx, wo) else { continue };
                    let src = &tap[(iy * wd + ix) * cout..][..cout];
                    let dst = &mut out[(oy * wo + ox) * cout..][..cout];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    Tensor::new(&[ho, wo, cout], out)
}

pub fn transpose_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    with_bias: bool,
    win: Window,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo, cout) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut dx = vec![T::zero(); h * wd * cin];
    let mut dw = vec![T::zero(); w.numel()];
    let mut gathered = vec![T::zero(); h * wd * cout];
    for ky in 0..win.kernel {
        for kx in 0..win.kernel {
            gathered.iter_mut().for_each(|v| *v = T::zero());
            for iy in 0..h {
                let Some(oy) = tconv_dst(win, iy, ky, ho) else { continue };
                for ix in 0..wd {
                    let Some(ox) = tconv_dst(win, ix, kx, wo) else { continue };
                    gathered[(iy * wd + ix) * cout..][..cout]
                        .copy_from_slice(&g.data()[(oy * wo + ox) * cout..][..cout]);
                }
            }
            let off = (ky * win.kernel + kx) * cin * cout;
            let wk = &w.data()[off..off + cin * cout];
            T::gemm(h * wd, cout, cin, &gathered, false, wk, true, &mut dx, true);
            T::gemm(cin, h * wd, cout, x.data(), true, &gathered, false, &mut dw[off..off + cin * cout], false);
        }
    }
    let db = with_bias.then(|| {
        let mut db = vec![T::zero(); cout];
        for row in g.data().chunks_exact(cout) {
            for (d, &v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        Tensor { shape: vec![cout], data: db }
    });
    (
        Tensor { shape: x.shape().to_vec(), data: dx },
        Tensor { shape: w.shape().to_vec(), data: dw },
        db,
    )
}

// ---------------------------------------------------------------------------
// pooling

/// Window mean with a fixed `1/k²` divisor (padded zeros count).
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, win: Window) -> Result<Tensor<T>> {
    const OP: &str = "avg_pool";
    let (h, wd, c) = x.hwc(OP)?;
    let ho = win.out_extent(OP, h)?;
    let wo = win.out_extent(OP, wd)?;
    let scale = T::one() / T::of((win.kernel * win.kernel) as f64);
    let mut out = vec![T::zero(); ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * c..][..c];
            for ky in 0..win.kernel {
                let Some(iy) = win.src(oy, ky, h) else { continue };
                for kx in 0..win.kernel {
                    let Some(ix) = win.src(ox, kx, wd) else { continue };
                    for (o, &v) in o.iter_mut().zip(&x.data()[(iy * wd + ix) * c..][..c]) {
                        *o += v;
                    }
                }
            }
            o.iter_mut().for_each(|v| *v *= scale);
        }
    }
    Tensor::new(&[ho, wo, c], out)
}

pub fn avg_pool_backward<T: Scalar>(in_shape: &[usize], win: Window, g: &Tensor<T>) -> Tensor<T> {
    let (h, wd, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (g.shape()[0], g.shape()[1]);
    let scale = T::one() / T::of((win.kernel * win.kernel) as f64);
    let mut dx = vec![T::zero(); h * wd * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let gs = &g.data()[(oy * wo + ox) * c..][..c];
            for ky in 0..win.kernel {
                let Some(iy) = win.src(oy, ky, h) else { continue };
                for kx in 0..win.kernel {
                    let Some(ix) = win.src(ox, kx, wd) else { continue };
                    for (d, &gv) in dx[(iy * wd + ix) * c..][..c].iter_mut().zip(gs) {
                        *d += gv * scale;
                    }
                }
            }
        }
    }
    Tensor { shape: in_shape.to_vec(), data: dx }
}

/// Window maximum without padding. Returns the flat input index chosen for
/// every output element; ties go to the first cell in row-major order.
pub fn max_pool<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    const OP: &str = "max_pool";
    let (h, wd, c) = x.hwc(OP)?;
    let win = Window::new(kernel, stride, 0);
    for n in [h, wd] {
        if n < kernel || !(n - kernel).is_multiple_of(stride) {
            return Err(Error::dim(OP, format!("extent {n} does not tile with kernel {kernel} stride {stride}")));
        }
    }
    let ho = win.out_extent(OP, h)?;
    let wo = win.out_extent(OP, wd)?;
    let mut out = vec![T::zero(); ho * wo * c];
    let mut arg = vec![0usize; ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut best = (oy * stride * wd + ox * stride) * c + ch;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = ((oy * stride + ky) * wd + ox * stride + kx) * c + ch;
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                }
                let o = (oy * wo + ox) * c + ch;
                out[o] = x.data()[best];
                arg[o] = best;
            }
        }
    }
    Ok((Tensor::new(&[ho, wo, c], out)?, arg))
}

pub fn max_pool_backward<T: Scalar>(in_shape: &[usize], argmax: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut dx = vec![T::zero(); in_shape.iter().product()];
    for (&i, &gv) in argmax.iter().zip(g.data()) {
        dx[i] += gv;
    }
    Tensor { shape: in_shape.to_vec(), data: dx }
}

// ---------------------------------------------------------------------------
// bilinear resampling

/// Source taps `(i0, i1, frac)` for each output index, half-pixel centers
/// (align-corners = false), clamped at the borders.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize to `(out_h, out_w)`.
pub fn bilinear_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, wd, c) = x.hwc("bilinear_upsample")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_upsample", "output extent must be positive"));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(wd, out_w);
    let mut out = vec![T::zero(); out_h * out_w * c];
    let xd = x.data();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let w00 = T::of((1.0 - fy) * (1.0 - fx));
            let w01 = T::of((1.0 - fy) * fx);
            let w10 = T::of(fy * (1.0 - fx));
            let w11 = T::of(fy * fx);
            let o = &mut out[(oy * out_w + ox) * c..][..c];
            let (a, b) = (&xd[(y0 * wd + x0) * c..][..c], &xd[(y0 * wd + x1) * c..][..c]);
            let (cc, d) = (&xd[(y1 * wd + x0) * c..][..c], &xd[(y1 * wd + x1) * c..][..c]);
            for ch in 0..c {
                o[ch] = w00 * a[ch] + w01 * b[ch] + w10 * cc[ch] + w11 * d[ch];
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}

pub fn bilinear_resize_backward<T: Scalar>(in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let (h, wd, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (out_h, out_w) = (g.shape()[0], g.shape()[1]);
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(wd, out_w);
    let mut dx = vec![T::zero(); h * wd * c];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let gs = &g.data()[(oy * out_w + ox) * c..][..c];
            for (yy, xx, wgt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                let wgt = T::of(wgt);
                for (d, &gv) in dx[(yy * wd + xx) * c..][..c].iter_mut().zip(gs) {
                    *d += wgt * gv;
                }
            }
        }
    }
    Tensor { shape: in_shape.to_vec(), data: dx }
}

// ---------------------------------------------------------------------------
// softmax / layer norm / activations

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::dim("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..len {
                m = m.max(out[idx(j)]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (out[idx(j)] - m).exp();
                out[idx(j)] = e;
                s += e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / s;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// `dx = y ⊙ (g − Σ_axis g⊙y)`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, axis: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = axis_extents(y.shape(), axis);
    let mut dx = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let dot: T = (0..len).map(|j| g.data()[idx(j)] * y.data()[idx(j)]).sum();
            for j in 0..len {
                dx[idx(j)] = y.data()[idx(j)] * (g.data()[idx(j)] - dot);
            }
        }
    }
    Tensor { shape: y.shape().to_vec(), data: dx }
}

/// Normalized values and per-row reciprocal std saved by [`layer_norm`].
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes every vector along the last axis, then applies `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(
            "layer_norm",
            format!("affine shapes {:?}/{:?} do not match channels {c}", gamma.shape(), beta.shape()),
        ));
    }
    let rows = x.numel() / c;
    let inv_c = T::one() / T::of(c as f64);
    let eps = T::of(eps);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = vec![T::zero(); rows];
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let xs = &x.data()[r * c..][..c];
        let mean = xs.iter().copied().sum::<T>() * inv_c;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let xh = (xs[j] - mean) * rs;
            xhat[r * c + j] = xh;
            out[r * c + j] = xh * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, LayerNormCache { xhat, rstd }))
}

/// Adjoints `(dx, dgamma, dbeta)` of [`layer_norm`].
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let rows = g.numel() / c;
    let inv_c = T::one() / T::of(c as f64);
    let mut dx = vec![T::zero(); g.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for r in 0..rows {
        let gs = &g.data()[r * c..][..c];
        let xh = &cache.xhat[r * c..][..c];
        for j in 0..c {
            dgamma[j] += gs[j] * xh[j];
            dbeta[j] += gs[j];
            dxhat[j] = gs[j] * gamma.data()[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() * inv_c;
        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
        for j in 0..c {
            dx[r * c + j] = cache.rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    (
        Tensor { shape: g.shape().to_vec(), data: dx },
        Tensor { shape: vec![c], data: dgamma },
        Tensor { shape: vec![c], data: dbeta },
    )
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(v: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(SQRT_2_OVER_PI) * (v + T::of(GELU_CUBIC) * v * v * v);
    half * v * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(v: T) -> T {
    let half = T::of(0.5);
    let k = T::of(SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let inner = k * (v + a * v * v * v);
    let t = inner.tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + T::of(3.0) * a * v * v)
}
