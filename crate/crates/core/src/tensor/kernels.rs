//! Raw forward/backward kernels over flat slices. Shapes are validated by the
//! graph layer before these are called.

use super::{Scalar, Shape};

/// Geometry of one 2-D sliding-window (conv-style) mapping.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose stride-1 tap `kx` lands inside the row.
fn valid_range(win: &Window, kx: usize) -> (usize, usize) {
    let lo = win.pad.saturating_sub(kx).min(win.out_w);
    let hi = (win.w + win.pad).saturating_sub(kx).min(win.out_w).max(lo);
    (lo, hi)
}

/// Unfolds one image `[channels, h, w]` into `[channels·kh·kw, out_h·out_w]`.
pub(crate) fn im2col<T: Scalar>(img: &[T], win: &Window, cols: &mut [T]) {
    let ncols = win.cols();
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &img[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.out_h {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    let out_row = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    if iy < 0 || iy >= win.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * win.w..(iy as usize + 1) * win.w];
                    if win.stride == 1 {
                        let (lo, hi) = valid_range(win, kx);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if lo < hi {
                            let off = lo + kx - win.pad;
                            out_row[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        *o = if ix < 0 || ix >= win.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], win: &Window, img: &mut [T]) {
    let ncols = win.cols();
    let mut row = 0;
    for c in 0..win.channels {
        let plane = &mut img[c * win.h * win.w..(c + 1) * win.h * win.w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..win.out_h {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= win.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * win.w..(iy as usize + 1) * win.w];
                    let in_row = &src[oy * win.out_w..(oy + 1) * win.out_w];
                    if win.stride == 1 {
                        let (lo, hi) = valid_range(win, kx);
                        if lo < hi {
                            let off = lo + kx - win.pad;
                            for (d, &v) in dst[off..off + hi - lo].iter_mut().zip(&in_row[lo..hi]) {
                                *d = *d + v;
                            }
                        }
                        continue;
                    }
                    for (ox, &v) in in_row.iter().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && ix < win.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv_window(xs: Shape, ws: Shape, stride: usize, pad: usize) -> Window {
    Window {
        channels: xs.c,
        h: xs.h,
        w: xs.w,
        kh: ws.h,
        kw: ws.w,
        stride,
        pad,
        out_h: (xs.h + 2 * pad - ws.h) / stride + 1,
        out_w: (xs.w + 2 * pad - ws.w) / stride + 1,
    }
}

/// Cross-correlation. `w: [co, ci, kh, kw]`, `b: [co]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    b: &[T],
    stride: usize,
    pad: usize,
) -> (Vec<T>, Shape) {
    let win = conv_window(xs, ws, stride, pad);
    let co = ws.n;
    let os = Shape::new(xs.n, co, win.out_h, win.out_w);
    let mut out = vec![T::zero(); os.numel()];
    let mut cols = if win.is_identity() {
        Vec::new()
    } else {
        vec![T::zero(); win.rows() * win.cols()]
    };
    let in_img = xs.c * xs.plane();
    let out_img = co * win.cols();
    for n in 0..xs.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        let dst = &mut out[n * out_img..(n + 1) * out_img];
        for (c, row) in dst.chunks_mut(win.cols()).enumerate() {
            row.fill(b[c]);
        }
        let rhs: &[T] = if win.is_identity() {
            img
        } else {
            im2col(img, &win, &mut cols);
            &cols
        };
        T::gemm(co, win.rows(), win.cols(), w, false, rhs, false, dst, true);
    }
    (out, os)
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    dout: &[T],
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let win = conv_window(xs, ws, stride, pad);
    let co = ws.n;
    let k = win.rows();
    let p = win.cols();
    let in_img = xs.c * xs.plane();
    let mut dw = vec![T::zero(); ws.numel()];
    let mut db = vec![T::zero(); co];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut cols = vec![T::zero(); k * p];
    let mut dcols = if need_dx && !win.is_identity() {
        vec![T::zero(); k * p]
    } else {
        Vec::new()
    };
    for n in 0..xs.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        let g = &dout[n * co * p..(n + 1) * co * p];
        for (c, row) in g.chunks(p).enumerate() {
            db[c] = row.iter().fold(db[c], |acc, &v| acc + v);
        }
        let rhs: &[T] = if win.is_identity() {
            img
        } else {
            im2col(img, &win, &mut cols);
            &cols
        };
        // dW[co, k] += dout[co, p] · cols[k, p]^T
        T::gemm(co, p, k, g, false, rhs, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[n * in_img..(n + 1) * in_img];
            if win.is_identity() {
                T::gemm(k, co, p, w, true, g, false, dimg, true);
            } else {
                T::gemm(k, co, p, w, true, g, false, &mut dcols, false);
                col2im(&dcols, &win, dimg);
            }
        }
    }
    (dx, dw, db)
}

fn deconv_window(xs: Shape, co: usize) -> Window {
    Window {
        channels: co,
        h: 2 * xs.h,
        w: 2 * xs.w,
        kh: 4,
        kw: 4,
        stride: 2,
        pad: 1,
        out_h: xs.h,
        out_w: xs.w,
    }
}

/// Transposed convolution, kernel 4, stride 2, pad 1. `w: [ci, co, 4, 4]`.
pub(crate) fn deconv2d_forward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    b: &[T],
) -> (Vec<T>, Shape) {
    let co = ws.c;
    let win = deconv_window(xs, co);
    let os = Shape::new(xs.n, co, 2 * xs.h, 2 * xs.w);
    let mut out = vec![T::zero(); os.numel()];
    let mut cols = vec![T::zero(); win.rows() * win.cols()];
    let in_img = xs.c * xs.plane();
    let out_img = co * os.plane();
    for n in 0..xs.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        // cols[co·16, hw] = W[ci, co·16]^T · x[ci, hw]
        T::gemm(win.rows(), xs.c, win.cols(), w, true, img, false, &mut cols, false);
        let dst = &mut out[n * out_img..(n + 1) * out_img];
        for (c, row) in dst.chunks_mut(os.plane()).enumerate() {
            row.fill(b[c]);
        }
        col2im(&cols, &win, dst);
    }
    (out, os)
}

pub(crate) fn deconv2d_backward<T: Scalar>(
    x: &[T],
    xs: Shape,
    w: &[T],
    ws: Shape,
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let co = ws.c;
    let win = deconv_window(xs, co);
    let k = win.rows();
    let p = win.cols();
    let in_img = xs.c * xs.plane();
    let out_img = co * 4 * xs.plane();
    let mut dw = vec![T::zero(); ws.numel()];
    let mut db = vec![T::zero(); co];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dcols = vec![T::zero(); k * p];
    for n in 0..xs.n {
        let img = &x[n * in_img..(n + 1) * in_img];
        let g = &dout[n * out_img..(n + 1) * out_img];
        for (c, row) in g.chunks(4 * xs.plane()).enumerate() {
            db[c] = row.iter().fold(db[c], |acc, &v| acc + v);
        }
        im2col(g, &win, &mut dcols);
        // dW[ci, co·16] += x[ci, hw] · dcols[co·16, hw]^T
        T::gemm(xs.c, p, k, img, false, &dcols, true, &mut dw, true);
        if let Some(dx) = dx.as_mut() {
            let dimg = &mut dx[n * in_img..(n + 1) * in_img];
            T::gemm(xs.c, k, p, w, false, &dcols, false, dimg, false);
        }
    }
    (dx, dw, db)
}

/// 2×2/stride-2 max pooling; returns flat argmax indices into `x`.
pub(crate) fn maxpool2_forward<T: Scalar>(x: &[T], xs: Shape) -> (Vec<T>, Vec<usize>, Shape) {
    let os = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    for nc in 0..xs.n * xs.c {
        let base = nc * xs.plane();
        for oy in 0..os.h {
            for ox in 0..os.w {
                let mut best = base + 2 * oy * xs.w + 2 * ox;
                // row-major window order; strict '>' keeps the first maximum
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * xs.w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg, os)
}

pub(crate) struct BnForward<T> {
    pub out: Vec<T>,
    pub xhat: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalisation with batch statistics (biased variance).
pub(crate) fn batch_norm_train<T: Scalar>(
    x: &[T],
    xs: Shape,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BnForward<T> {
    let p = xs.plane();
    let count = T::from_usize(xs.n * p).unwrap();
    let mut mean = vec![T::zero(); xs.c];
    let mut var = vec![T::zero(); xs.c];
    for c in 0..xs.c {
        let mut s = T::zero();
        for n in 0..xs.n {
            let base = (n * xs.c + c) * p;
            s = x[base..base + p].iter().fold(s, |a, &v| a + v);
        }
        let m = s / count;
        let mut sq = T::zero();
        for n in 0..xs.n {
            let base = (n * xs.c + c) * p;
            sq = x[base..base + p].iter().fold(sq, |a, &v| a + (v - m) * (v - m));
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * p;
            for i in base..base + p {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    BnForward {
        out,
        xhat,
        mean,
        var,
        inv_std,
    }
}

/// Returns `(dx, dgamma, dbeta)` for the train-mode normalisation.
pub(crate) fn batch_norm_train_backward<T: Scalar>(
    dout: &[T],
    xs: Shape,
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let p = xs.plane();
    let count = T::from_usize(xs.n * p).unwrap();
    let mut dgamma = vec![T::zero(); xs.c];
    let mut dbeta = vec![T::zero(); xs.c];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * p;
            for i in base..base + p {
                dgamma[c] = dgamma[c] + dout[i] * xhat[i];
                dbeta[c] = dbeta[c] + dout[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dout.len()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            let base = (n * xs.c + c) * p;
            // with dxhat = dy·γ: Σdxhat = γ·dβ and Σdxhat·xhat = γ·dγ
            let scale = gamma[c] * inv_std[c] / count;
            for i in base..base + p {
                dx[i] = scale * (count * dout[i] - dbeta[c] - xhat[i] * dgamma[c]);
            }
        }
    }
    (dx, dgamma, dbeta)
}
