//! Raw numeric kernels on slices. No autodiff bookkeeping lives here.

use crate::scalar::Scalar;

/// Strided view description of a matrix operand: `(row_stride, col_stride)`.
pub type Layout = (usize, usize);

/// Row-major `rows x cols` layout.
#[inline]
pub fn rm(cols: usize) -> Layout {
    (cols, 1)
}

/// Transposed view of a row-major `cols x rows` buffer, i.e. logical `rows x cols`.
#[inline]
pub fn tr(rows: usize) -> Layout {
    (1, rows)
}

fn max_index(rows: usize, cols: usize, (rs, cs): Layout) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `c <- alpha * a(m x k) * b(k x n) + beta * c(m x n)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * lc.0 + j * lc.1;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(max_index(m, k, la) < a.len(), "gemm: lhs out of bounds");
    assert!(max_index(k, n, lb) < b.len(), "gemm: rhs out of bounds");
    assert!(max_index(m, n, lc) < c.len(), "gemm: output out of bounds");
    // SAFETY: bounds asserted above; strides are non-negative.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.0 as isize,
            la.1 as isize,
            b.as_ptr(),
            lb.0 as isize,
            lb.1 as isize,
            beta,
            c.as_mut_ptr(),
            lc.0 as isize,
            lc.1 as isize,
        )
    }
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
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

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// 1x1 stride-1 convolutions read the input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x[cin,h,w]` into `col[cin*kh*kw, oh*ow]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx[cin,h,w]`.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    for c in 0..g.cin {
        let xc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution for a batch. `w` is `[cout, cin*kh*kw]`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, plane) = (g.patch(), g.out_h() * g.out_w());
    let in_sz = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); n * cout * plane];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
    for s in 0..n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let ys = &mut out[s * cout * plane..(s + 1) * cout * plane];
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        gemm(cout, k, plane, T::one(), w, rm(k), cols, rm(plane), T::zero(), ys, rm(plane));
        if let Some(b) = bias {
            for (c, &bc) in b.iter().enumerate() {
                for v in &mut ys[c * plane..(c + 1) * plane] {
                    *v += bc;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    cout: usize,
    dy: &[T],
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (k, plane) = (g.patch(), g.out_h() * g.out_w());
    let in_sz = g.cin * g.h * g.w;
    let mut dw = vec![T::zero(); cout * k];
    let mut db = vec![T::zero(); cout];
    let mut dx = if want_dx { Some(vec![T::zero(); n * in_sz]) } else { None };
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
    let mut dcol = if want_dx && !g.is_pointwise() { vec![T::zero(); k * plane] } else { Vec::new() };
    for s in 0..n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let dys = &dy[s * cout * plane..(s + 1) * cout * plane];
        for (c, d) in db.iter_mut().enumerate() {
            *d += dys[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
        }
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        // dW += dY * col^T
        gemm(cout, plane, k, T::one(), dys, rm(plane), cols, tr(plane), T::one(), &mut dw, rm(k));
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * in_sz..(s + 1) * in_sz];
            if g.is_pointwise() {
                gemm(k, cout, plane, T::one(), w, tr(k), dys, rm(plane), T::zero(), dxs, rm(plane));
            } else {
                gemm(k, cout, plane, T::one(), w, tr(k), dys, rm(plane), T::zero(), &mut dcol, rm(plane));
                col2im(&dcol, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Numerically stable in-place softmax over `len` contiguous groups laid out
/// as `[outer, len, inner]`, normalizing along the middle axis.
pub fn softmax_axis<T: Scalar>(data: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(data[base + j * inner + i]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (data[base + j * inner + i] - mx).exp();
                data[base + j * inner + i] = e;
                sum += e;
            }
            for j in 0..len {
                data[base + j * inner + i] /= sum;
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], g: &ConvGeom, w: &[f64], cout: usize) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.cin {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += x[(c * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((o * g.cin + c) * g.kh + ki) * g.kw + kj];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (4, 0, 4)] {
            let g = ConvGeom { cin: 3, h: 8, w: 8, kh: k, kw: k, stride, pad };
            let x: Vec<f64> = (0..3 * 64).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..2 * g.patch()).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
            let got = conv2d_forward(&x, 1, &g, &w, 2, None);
            let want = naive_conv(&x, &g, &w, 2);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom { cin: 2, h: 5, w: 6, kh: 3, kw: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let rows = g.patch() * g.out_h() * g.out_w();
        let c: Vec<f64> = (0..rows).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut col = vec![0.0; rows];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; 60];
        col2im(&c, &g, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]; a^T b = [[26,30],[38,44]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, 1.0, &a, tr(2), &b, rm(2), 0.0, &mut c, rm(2));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
