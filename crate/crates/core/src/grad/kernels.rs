//! Forward/backward kernels for the shape-heavy ops.
//!
//! Convolution runs as im2col + GEMM with every product accumulated in `f64`;
//! per-element reduction order depends only on the shapes, so results are
//! bit-reproducible.

use crate::tensor::Scalar;

/// `C = A·B + beta·C` in `f64`. `A` is `m×k`, `B` is `k×n`, `C` is row-major
/// `m×n`. Each operand is described by (row stride, col stride) so
/// transposed views cost nothing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: bounds checked above; the three buffers are distinct borrows.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }
}

/// Output columns `ox` whose input column `ox·stride + k − pad` lies inside
/// `0..w`.
fn valid_range(k: usize, stride: usize, pad: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride).min(ow);
    let hi = if w + pad > k { ((w + pad - k - 1) / stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds one image (`c_in×h×w`, already widened to `f64`) into a
/// `(c_in·kh·kw) × (oh·ow)` matrix.
fn im2col(g: &ConvGeom, img: &[f64], col: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_range(kj, g.stride, g.pad, g.w, g.ow);
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if hi > lo {
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *v = x;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a column matrix back onto an image, accumulating overlaps.
fn col2im(g: &ConvGeom, col: &[f64], img: &mut [f64]) {
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_range(kj, g.stride, g.pad, g.w, g.ow);
                let src = &col[row * cols..(row + 1) * cols];
                row += 1;
                if hi <= lo {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn to_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.to_f64()).collect()
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let w64 = to_f64(weight);
    let mut col = vec![0.0; rows * cols];
    let mut acc = vec![0.0; g.c_out * cols];
    let mut out = Vec::with_capacity(g.n * g.c_out * cols);
    let in_stride = g.c_in * g.h * g.w;
    for i in 0..g.n {
        im2col(g, &to_f64(&input[i * in_stride..(i + 1) * in_stride]), &mut col);
        match bias {
            Some(b) => {
                for (o, chunk) in acc.chunks_mut(cols).enumerate() {
                    chunk.fill(b[o].to_f64());
                }
            }
            None => acc.fill(0.0),
        }
        gemm(g.c_out, rows, cols, &w64, (rows, 1), &col, (cols, 1), 1.0, &mut acc);
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_in, need_w, need_b) = need;
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * cols;
    let w64 = to_f64(weight);
    let mut col = vec![0.0; rows * cols];
    let mut gcol = vec![0.0; rows * cols];
    let mut gimg = vec![0.0; in_stride];
    let mut gw = vec![0.0; if need_w { g.c_out * rows } else { 0 }];
    let mut gb = vec![0.0; if need_b { g.c_out } else { 0 }];
    let mut gin = Vec::with_capacity(if need_in { g.n * in_stride } else { 0 });

    for i in 0..g.n {
        let go = to_f64(&grad_out[i * out_stride..(i + 1) * out_stride]);
        if need_w {
            im2col(g, &to_f64(&input[i * in_stride..(i + 1) * in_stride]), &mut col);
            // gw[o, r] += sum_p go[o, p] * col[r, p]
            gemm(g.c_out, cols, rows, &go, (cols, 1), &col, (1, cols), 1.0, &mut gw);
        }
        if need_b {
            for (o, chunk) in go.chunks(cols).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
        }
        if need_in {
            // gcol[r, p] = sum_o w[o, r] * go[o, p]
            gemm(rows, g.c_out, cols, &w64, (1, rows), &go, (cols, 1), 0.0, &mut gcol);
            gimg.fill(0.0);
            col2im(g, &gcol, &mut gimg);
            gin.extend(gimg.iter().map(|&v| T::from_f64(v)));
        }
    }

    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
    ConvGrads {
        input: need_in.then_some(gin),
        weight: need_w.then(|| cast(gw)),
        bias: need_b.then(|| cast(gb)),
    }
}

/// `y[n, m] = sum_k x[n, k] * w[m, k] + b[m]`
pub(crate) fn linear_forward<T: Scalar>(
    n: usize,
    k: usize,
    m: usize,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let x64 = to_f64(x);
    let w64 = to_f64(w);
    let mut y = vec![0.0; n * m];
    if let Some(b) = b {
        for row in y.chunks_mut(m) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v = bb.to_f64();
            }
        }
    }
    gemm(n, k, m, &x64, (k, 1), &w64, (1, k), 1.0, &mut y);
    y.into_iter().map(T::from_f64).collect()
}

pub(crate) fn linear_backward<T: Scalar>(
    n: usize,
    k: usize,
    m: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let gy64 = to_f64(gy);
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
    let input = need.0.then(|| {
        let w64 = to_f64(w);
        let mut gx = vec![0.0; n * k];
        gemm(n, m, k, &gy64, (m, 1), &w64, (k, 1), 0.0, &mut gx);
        cast(gx)
    });
    let weight = need.1.then(|| {
        let x64 = to_f64(x);
        let mut gw = vec![0.0; m * k];
        gemm(m, n, k, &gy64, (1, m), &x64, (k, 1), 0.0, &mut gw);
        cast(gw)
    });
    let bias = need.2.then(|| {
        let mut gb = vec![0.0; m];
        for row in gy64.chunks(m) {
            for (a, v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        cast(gb)
    });
    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// Max pooling without padding. Returns outputs and, per output, the flat
/// input index it came from (first maximum wins ties).
pub(crate) fn maxpool_forward<T: Scalar>(
    shape: &[usize],
    x: &[T],
    k: usize,
    stride: usize,
) -> (Vec<usize>, Vec<T>, Vec<u32>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (vec![n, c, oh, ow], out, arg)
}
