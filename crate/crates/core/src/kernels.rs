//! Forward and backward kernels for the convolutional primitives, on raw
//! NCHW buffers.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
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

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            line[ix as usize] = line[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let in_stride = g.in_c * g.in_h * g.in_w;
    let out_stride = g.out_c * g.col_cols();
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..g.batch {
        im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut col);
        T::gemm(
            g.out_c,
            g.col_rows(),
            g.col_cols(),
            w,
            false,
            &col,
            false,
            T::zero(),
            &mut out[n * out_stride..(n + 1) * out_stride],
        );
    }
    out
}

/// Returns `(dx, dw)` for upstream gradient `dy`. Either side may be skipped.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_stride = g.in_c * g.in_h * g.in_w;
    let out_stride = g.out_c * g.col_cols();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..g.batch {
        let dy_n = &dy[n * out_stride..(n + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut col);
            T::gemm(
                g.out_c,
                g.col_cols(),
                g.col_rows(),
                dy_n,
                false,
                &col,
                true,
                T::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            T::gemm(
                g.col_rows(),
                g.out_c,
                g.col_cols(),
                w,
                true,
                dy_n,
                false,
                T::zero(),
                &mut col,
            );
            col2im_add(g, &col, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }
}

/// Max pooling; also returns the flat input index of each selected value.
/// Ties resolve to the first element in row-major window order.
pub fn max_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    let mut arg = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = base + oy * g.stride * g.in_w + ox * g.stride;
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let i = base + (oy * g.stride + ky) * g.in_w + ox * g.stride + kx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward<T: Scalar>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let norm = T::of(1.0 / (g.kernel * g.kernel) as f64);
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    for kx in 0..g.kernel {
                        acc = acc + x[row + kx];
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(g: &PoolGeom, dy: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let norm = T::of(1.0 / (g.kernel * g.kernel) as f64);
    let mut dx = vec![T::zero(); g.planes * g.in_h * g.in_w];
    for p in 0..g.planes {
        let base = p * g.in_h * g.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let v = dy[(p * oh + oy) * ow + ox] * norm;
                for ky in 0..g.kernel {
                    let row = base + (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    for kx in 0..g.kernel {
                        dx[row + kx] = dx[row + kx] + v;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel batch statistics, with the variance left biased.
pub fn channel_moments<T: Scalar>(x: &[T], batch: usize, channels: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of((batch * inner) as f64);
    let mut mean = vec![T::zero(); channels];
    let mut var = vec![T::zero(); channels];
    for c in 0..channels {
        let mut acc = T::zero();
        for n in 0..batch {
            let s = (n * channels + c) * inner;
            acc = acc + x[s..s + inner].iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for n in 0..batch {
            let s = (n * channels + c) * inner;
            sq = sq + x[s..s + inner].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}
