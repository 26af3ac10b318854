//! Differentiable operations. Every forward builder validates shapes and
//! records what its adjoint needs; `backward_op` holds the adjoints.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::kernels::{self, gemm, rm, ConvGeom, Layout};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

fn mismatch(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

/// `[outer, len, inner]` factorization of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn swap(l: Layout) -> Layout {
    (l.1, l.0)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let val = half * x * (T::one() + th);
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    let d = half * (T::one() + th) + half * x * (T::one() - th * th) * dinner;
    (val, d)
}

impl<T: Scalar> Graph<T> {
    fn binary_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), false))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).scale(s);
        Ok(self.push(v, Op::Scale(a, s), false))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        Ok(self.push(v, Op::AddScalar(a), false))
    }

    /// `x[n, c, ...] + b[c]`
    pub fn add_channel(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(b) != [xs[1]] {
            return Err(mismatch(format!("add_channel {:?} + {:?}", xs, self.shape(b))));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner = self.value(x).numel() / (n * c).max(1);
        let mut out = self.value(x).clone();
        let bv = self.value(b).data().to_vec();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let bc = bv[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        Ok(self.push(out, Op::AddChannel(x, b), false))
    }

    /// `x[n, c, ...] + v[n, c]`
    pub fn add_nc(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(v) != &xs[..2] {
            return Err(mismatch(format!("add_nc {:?} + {:?}", xs, self.shape(v))));
        }
        let inner = xs[2..].iter().product::<usize>().max(1);
        let mut out = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (chunk, &a) in out.data_mut().chunks_mut(inner).zip(&vv) {
            chunk.iter_mut().for_each(|e| *e += a);
        }
        Ok(self.push(out, Op::AddNc(x, v), false))
    }

    /// `x[n, c, ...] * s[n, c]`
    pub fn mul_nc(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() < 2 || self.shape(s) != &xs[..2] {
            return Err(mismatch(format!("mul_nc {:?} * {:?}", xs, self.shape(s))));
        }
        let inner = xs[2..].iter().product::<usize>().max(1);
        let mut out = self.value(x).clone();
        let sv = self.value(s).data().to_vec();
        for (chunk, &a) in out.data_mut().chunks_mut(inner).zip(&sv) {
            chunk.iter_mut().for_each(|e| *e *= a);
        }
        Ok(self.push(out, Op::MulNc(x, s), false))
    }

    /// `x[b, ...] + y[...]`, broadcasting `y` over the leading axis.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || &xs[1..] != self.shape(y) {
            return Err(mismatch(format!("add_broadcast {:?} + {:?}", xs, self.shape(y))));
        }
        let inner = self.value(y).numel();
        let mut out = self.value(x).clone();
        let yv = self.value(y).data().to_vec();
        for chunk in out.data_mut().chunks_mut(inner.max(1)) {
            chunk.iter_mut().zip(&yv).for_each(|(e, &a)| *e += a);
        }
        Ok(self.push(out, Op::AddBroadcast(x, y), false))
    }

    /// `x[..., in] * w[out, in]^T + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(mismatch(format!("linear {xs:?} x {ws:?}^T")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(mismatch(format!("linear bias {:?} for out {}", self.shape(b), ws[0])));
            }
        }
        let (fin, fout) = (ws[1], ws[0]);
        let rows = self.value(x).numel() / fin;
        let mut out = vec![T::zero(); rows * fout];
        gemm(rows, fin, fout, T::one(), self.value(x).data(), rm(fin), self.value(w).data(), (1, fin), T::zero(), &mut out, rm(fout));
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(e, &a)| *e += a);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = fout;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Linear(x, w, b), false))
    }

    /// Batched matrix product of `[b, m, k]` and `[b, k, n]`, either operand
    /// optionally read transposed.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch(format!("bmm {sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(mismatch(format!("bmm inner dims {k} vs {k2} ({sa:?}, {sb:?})")));
        }
        let batch = sa[0];
        let (la, lb) = (layout_of(m, k, ta), layout_of(k, n, tb));
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                T::one(),
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                la,
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                lb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                rm(n),
            );
        }
        let t = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(t, Op::Bmm { a, b, ta, tb }, false))
    }

    /// 2-D convolution, `x[n, cin, h, w]`, `w[cout, cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] || stride == 0 {
            return Err(mismatch(format!("conv2d kernel {ws:?} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom { cin: xs[1], h: xs[2], w: xs[3], kh: ws[2], kw: ws[3], stride, pad };
        let cout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch(format!("conv2d bias {:?} for cout {cout}", self.shape(b))));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs[0],
            &geom,
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::new(&[xs[0], cout, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, false))
    }

    /// Group normalization over `x[n, c, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || xs[1] % groups != 0 {
            return Err(mismatch(format!("group_norm {xs:?} with {groups} groups")));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch(format!("group_norm affine for {c} channels")));
        }
        let n = xs[0];
        let hw: usize = xs[2..].iter().product();
        let gsize = (c / groups) * hw;
        let eps = T::of(NORM_EPS);
        let mut out = self.value(x).clone();
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        for (gi, chunk) in out.data_mut().chunks_mut(gsize).enumerate() {
            let cnt = T::of(gsize as f64);
            let mean = chunk.iter().copied().sum::<T>() / cnt;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let rstd = T::one() / (var + eps).sqrt();
            let g = gi % groups;
            for (ci, plane) in chunk.chunks_mut(hw.max(1)).enumerate() {
                let ch = g * (c / groups) + ci;
                for v in plane {
                    *v = (*v - mean) * rstd * gv[ch] + bv[ch];
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, false))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| mismatch("layer_norm of scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(mismatch(format!("layer_norm affine for width {d}")));
        }
        let eps = T::of(NORM_EPS);
        let mut out = self.value(x).clone();
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut means = Vec::new();
        let mut rstds = Vec::new();
        for row in out.data_mut().chunks_mut(d) {
            let cnt = T::of(d as f64);
            let mean = row.iter().copied().sum::<T>() / cnt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, false))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e * kernels::sigmoid(e));
        Ok(self.push(v, Op::Silu(x), false))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.max(T::zero()));
        Ok(self.push(v, Op::Relu(x), false))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(kernels::sigmoid);
        Ok(self.push(v, Op::Sigmoid(x), false))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| gelu_parts(e).0);
        Ok(self.push(v, Op::Gelu(x), false))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch(format!("softmax axis {axis} of {shape:?}")));
        }
        let (o, l, i) = split_axis(&shape, axis);
        let mut out = self.value(x).clone();
        kernels::softmax_axis(out.data_mut(), o, l, i);
        Ok(self.push(out, Op::Softmax { x, axis }, false))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), false))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(mismatch(format!("permute {perm:?} of {shape:?}")));
        }
        let v = permute_tensor(self.value(x), perm);
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }, false))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(mismatch(format!("concat axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(mismatch(format!("concat {first:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }, false))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(mismatch(format!("narrow {start}+{len} on axis {axis} of {shape:?}")));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&self.value(x).data()[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }, false))
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch(format!("upsample2x of {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2x(x), false))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(mismatch(format!("avg_pool2x of {s:?}")));
        }
        let (h, w) = (s[2] / 2, s[3] / 2);
        let src = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); s[0] * s[1] * h * w];
        for p in 0..s[0] * s[1] {
            for y in 0..h {
                for xx in 0..w {
                    let base = (p * 2 * h + 2 * y) * 2 * w + 2 * xx;
                    out[(p * h + y) * w + xx] =
                        (src[base] + src[base + 1] + src[base + 2 * w] + src[base + 2 * w + 1]) * quarter;
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], h, w], out)?;
        Ok(self.push(t, Op::AvgPool2x(x), false))
    }

    pub fn max_pool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(mismatch(format!("max_pool2x of {s:?}")));
        }
        let (h, w) = (s[2] / 2, s[3] / 2);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); s[0] * s[1] * h * w];
        let mut argmax = vec![0; out.len()];
        for p in 0..s[0] * s[1] {
            for y in 0..h {
                for xx in 0..w {
                    let base = (p * 2 * h + 2 * y) * 2 * w + 2 * xx;
                    let mut best = base;
                    for cand in [base + 1, base + 2 * w, base + 2 * w + 1] {
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    let o = (p * h + y) * w + xx;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], h, w], out)?;
        Ok(self.push(t, Op::MaxPool2x { x, argmax }, false))
    }

    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(mismatch(format!("global_avg_pool of {s:?}")));
        }
        let hw: usize = s[2..].iter().product();
        let inv = T::one() / T::of(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(&s[..2], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), false))
    }

    /// Rows of `table[k, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(mismatch(format!("embedding table {s:?}")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(mismatch(format!("embedding id {bad} >= {}", s[0])));
        }
        let d = s[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, false))
    }

    /// Inverted dropout; identity outside training mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !self.is_training() || p <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = Tensor::new(
            self.shape(x),
            self.value(x).data().iter().zip(&mask).map(|(&a, &m)| a * m).collect(),
        )?;
        Ok(self.push(v, Op::Dropout { x, mask }, false))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        Ok(self.push(v, Op::SumAll(x), false))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).numel() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        Ok(self.push(v, Op::MeanAll(x), false))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().map(|&e| e * e).sum());
        Ok(self.push(v, Op::SumSquares(x), false))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mse")?;
        let n = T::of(self.value(a).numel() as f64);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), false))
    }

    fn row_softmax(&self, logits: Var, labels: &[usize]) -> Result<(usize, Vec<T>)> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(mismatch(format!("logits {s:?} for {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(mismatch(format!("label {bad} >= class count {k}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        kernels::softmax_axis(&mut probs, labels.len(), k, 1);
        Ok((k, probs))
    }

    /// Mean softmax cross-entropy of `logits[n, k]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (k, probs) = self.row_softmax(logits, labels)?;
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            total += -log_softmax_at(&lv[i * k..(i + 1) * k], y);
        }
        let v = Tensor::scalar(total / T::of(labels.len() as f64));
        Ok(self.push(v, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, false))
    }

    /// `sum_i log softmax(logits_i)[labels_i]`.
    pub fn log_prob_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (k, probs) = self.row_softmax(logits, labels)?;
        let lv = self.value(logits).data();
        let total: T = labels.iter().enumerate().map(|(i, &y)| log_softmax_at(&lv[i * k..(i + 1) * k], y)).sum();
        Ok(self.push(Tensor::scalar(total), Op::LogProbSum { logits, labels: labels.to_vec(), probs }, false))
    }

    pub(crate) fn backward_op(&self, at: Var, gout: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[at.0];
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*b) {
                    accumulate(grads, *b, gout.clone());
                }
                if self.needs(*a) {
                    accumulate(grads, *a, gout);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    accumulate(grads, *b, gout.scale(-T::one()));
                }
                if self.needs(*a) {
                    accumulate(grads, *a, gout);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, gout.zip_map(val(*b), |g, y| g * y)?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, gout.zip_map(val(*a), |g, x| g * x)?);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, gout.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, gout),
            Op::AddChannel(x, b) => {
                if self.needs(*b) {
                    let c = self.shape(*b)[0];
                    let inner = gout.numel() / (self.shape(*x)[0] * c).max(1);
                    let mut db = vec![T::zero(); c];
                    for (i, chunk) in gout.data().chunks(inner.max(1)).enumerate() {
                        db[i % c] += chunk.iter().copied().sum::<T>();
                    }
                    accumulate(grads, *b, Tensor::new(&[c], db)?);
                }
                if self.needs(*x) {
                    accumulate(grads, *x, gout);
                }
            }
            Op::AddNc(x, v) => {
                if self.needs(*v) {
                    let inner = self.shape(*x)[2..].iter().product::<usize>().max(1);
                    let dv: Vec<T> = gout.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
                    accumulate(grads, *v, Tensor::new(self.shape(*v), dv)?);
                }
                if self.needs(*x) {
                    accumulate(grads, *x, gout);
                }
            }
            Op::MulNc(x, s) => {
                let inner = self.shape(*x)[2..].iter().product::<usize>().max(1);
                if self.needs(*s) {
                    let ds: Vec<T> = gout
                        .data()
                        .chunks(inner)
                        .zip(val(*x).data().chunks(inner))
                        .map(|(g, xv)| g.iter().zip(xv).map(|(&a, &b)| a * b).sum())
                        .collect();
                    accumulate(grads, *s, Tensor::new(self.shape(*s), ds)?);
                }
                if self.needs(*x) {
                    let sv = val(*s).data();
                    let mut dx = gout;
                    for (chunk, &a) in dx.data_mut().chunks_mut(inner).zip(sv) {
                        chunk.iter_mut().for_each(|e| *e *= a);
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::AddBroadcast(x, y) => {
                if self.needs(*y) {
                    let inner = val(*y).numel();
                    let mut dy = vec![T::zero(); inner];
                    for chunk in gout.data().chunks(inner.max(1)) {
                        dy.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                    accumulate(grads, *y, Tensor::new(self.shape(*y), dy)?);
                }
                if self.needs(*x) {
                    accumulate(grads, *x, gout);
                }
            }
            Op::Linear(x, w, b) => {
                let (fout, fin) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = gout.numel() / fout;
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); fout];
                        for row in gout.data().chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                        }
                        accumulate(grads, *b, Tensor::new(&[fout], db)?);
                    }
                }
                if self.needs(*w) {
                    // dW[out, in] = dY^T[out, rows] * X[rows, in]
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(fout, rows, fin, T::one(), gout.data(), (1, fout), val(*x).data(), rm(fin), T::zero(), &mut dw, rm(fin));
                    accumulate(grads, *w, Tensor::new(&[fout, fin], dw)?);
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * fin];
                    gemm(rows, fout, fin, T::one(), gout.data(), rm(fout), val(*w).data(), rm(fin), T::zero(), &mut dx, rm(fin));
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if *tb { sb[1] } else { sb[2] };
                let batch = sa[0];
                let (la, lb) = (layout_of(m, k, *ta), layout_of(k, n, *tb));
                let g = gout.data();
                if self.needs(*a) {
                    // d op(A) = dC * op(B)^T, written through A's layout
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        gemm(m, n, k, T::one(), &g[i * m * n..(i + 1) * m * n], rm(n), &val(*b).data()[i * k * n..(i + 1) * k * n], swap(lb), T::zero(), &mut da[i * m * k..(i + 1) * m * k], la);
                    }
                    accumulate(grads, *a, Tensor::new(sa, da)?);
                }
                if self.needs(*b) {
                    // d op(B) = op(A)^T * dC
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        gemm(k, m, n, T::one(), &val(*a).data()[i * m * k..(i + 1) * m * k], swap(la), &g[i * m * n..(i + 1) * m * n], rm(n), T::zero(), &mut db[i * k * n..(i + 1) * k * n], lb);
                    }
                    accumulate(grads, *b, Tensor::new(sb, db)?);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let cout = self.shape(*w)[0];
                let n = self.shape(*x)[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(*x).data(),
                    n,
                    geom,
                    val(*w).data(),
                    cout,
                    gout.data(),
                    self.needs(*x),
                );
                if let Some(b) = b {
                    if self.needs(*b) {
                        accumulate(grads, *b, Tensor::new(&[cout], db)?);
                    }
                }
                if self.needs(*w) {
                    accumulate(grads, *w, Tensor::new(self.shape(*w), dw)?);
                }
                if let Some(dx) = dx {
                    accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let hw: usize = xs[2..].iter().product::<usize>().max(1);
                let cpg = c / groups;
                let gsize = cpg * hw;
                let gv = val(*gamma).data();
                let xv = val(*x).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                let cnt = T::of(gsize as f64);
                for gi in 0..mean.len() {
                    let (mu, rs) = (mean[gi], rstd[gi]);
                    let g0 = (gi % groups) * cpg;
                    let base = gi * gsize;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..gsize {
                        let ch = g0 + j / hw;
                        let xhat = (xv[base + j] - mu) * rs;
                        let dy = gout.data()[base + j];
                        dgamma[ch] += dy * xhat;
                        dbeta[ch] += dy;
                        let dxhat = dy * gv[ch];
                        sum_d += dxhat;
                        sum_dx += dxhat * xhat;
                    }
                    let (md, mdx) = (sum_d / cnt, sum_dx / cnt);
                    for j in 0..gsize {
                        let ch = g0 + j / hw;
                        let xhat = (xv[base + j] - mu) * rs;
                        let dxhat = gout.data()[base + j] * gv[ch];
                        dx[base + j] = rs * (dxhat - md - xhat * mdx);
                    }
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
                }
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::new(xs, dx)?);
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xs = self.shape(*x);
                let d = *xs.last().unwrap();
                let gv = val(*gamma).data();
                let xv = val(*x).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xv.len()];
                let cnt = T::of(d as f64);
                for r in 0..mean.len() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let base = r * d;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..d {
                        let xhat = (xv[base + j] - mu) * rs;
                        let dy = gout.data()[base + j];
                        dgamma[j] += dy * xhat;
                        dbeta[j] += dy;
                        sum_d += dy * gv[j];
                        sum_dx += dy * gv[j] * xhat;
                    }
                    let (md, mdx) = (sum_d / cnt, sum_dx / cnt);
                    for j in 0..d {
                        let xhat = (xv[base + j] - mu) * rs;
                        dx[base + j] = rs * (gout.data()[base + j] * gv[j] - md - xhat * mdx);
                    }
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[d], dgamma)?);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[d], dbeta)?);
                }
                if self.needs(*x) {
                    accumulate(grads, *x, Tensor::new(xs, dx)?);
                }
            }
            Op::Silu(x) => {
                let d = gout.zip_map(val(*x), |g, v| {
                    let s = kernels::sigmoid(v);
                    g * s * (T::one() + v * (T::one() - s))
                })?;
                accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let d = gout.zip_map(val(*x), |g, v| if v > T::zero() { g } else { T::zero() })?;
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = gout.zip_map(&node.value, |g, s| g * s * (T::one() - s))?;
                accumulate(grads, *x, d);
            }
            Op::Gelu(x) => {
                let d = gout.zip_map(val(*x), |g, v| g * gelu_parts(v).1)?;
                accumulate(grads, *x, d);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                let g = gout.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::Reshape(x) => accumulate(grads, *x, gout.reshape(self.shape(*x))?),
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *x, permute_tensor(&gout, &inv));
            }
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&gout.data()[base..base + len * inner]);
                        }
                        accumulate(grads, v, Tensor::new(self.shape(v), part)?);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full_shape = self.shape(*x);
                let (outer, full, inner) = split_axis(full_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gout.data()[src..src + len * inner]);
                }
                accumulate(grads, *x, Tensor::new(full_shape, dx)?);
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut dx = vec![T::zero(); val(*x).numel()];
                for p in 0..s[0] * s[1] {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(p * h + y / 2) * w + xx / 2] += gout.data()[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::AvgPool2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2] / 2, s[3] / 2);
                let quarter = T::of(0.25);
                let mut dx = vec![T::zero(); val(*x).numel()];
                for p in 0..s[0] * s[1] {
                    for y in 0..h {
                        for xx in 0..w {
                            let g = gout.data()[(p * h + y) * w + xx] * quarter;
                            let base = (p * 2 * h + 2 * y) * 2 * w + 2 * xx;
                            for off in [0, 1, 2 * w, 2 * w + 1] {
                                dx[base + off] += g;
                            }
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::MaxPool2x { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gout.data()[o];
                }
                accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw: usize = s[2..].iter().product();
                let inv = T::one() / T::of(hw as f64);
                let mut dx = Vec::with_capacity(val(*x).numel());
                for &g in gout.data() {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                accumulate(grads, *x, Tensor::new(s, dx)?);
            }
            Op::Embedding { table, ids } => {
                let s = self.shape(*table);
                let d = s[1];
                let mut dt = vec![T::zero(); s[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += gout.data()[r * d + j];
                    }
                }
                accumulate(grads, *table, Tensor::new(s, dt)?);
            }
            Op::Dropout { x, mask } => {
                let d = Tensor::new(gout.shape(), gout.data().iter().zip(mask).map(|(&g, &m)| g * m).collect())?;
                accumulate(grads, *x, d);
            }
            Op::SumAll(x) => {
                accumulate(grads, *x, Tensor::full(self.shape(*x), gout.item()));
            }
            Op::MeanAll(x) => {
                let n = T::of(val(*x).numel() as f64);
                accumulate(grads, *x, Tensor::full(self.shape(*x), gout.item() / n));
            }
            Op::SumSquares(x) => {
                let g = gout.item() * T::of(2.0);
                accumulate(grads, *x, val(*x).scale(g));
            }
            Op::Mse(a, b) => {
                let n = T::of(val(*a).numel() as f64);
                let coef = gout.item() * T::of(2.0) / n;
                let diff = val(*a).zip_map(val(*b), |x, y| (x - y) * coef)?;
                if self.needs(*b) {
                    accumulate(grads, *b, diff.scale(-T::one()));
                }
                if self.needs(*a) {
                    accumulate(grads, *a, diff);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let coef = gout.item() / T::of(labels.len() as f64);
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= coef);
                accumulate(grads, *logits, Tensor::new(self.shape(*logits), d)?);
            }
            Op::LogProbSum { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let coef = gout.item();
                let mut d: Vec<T> = probs.iter().map(|&p| -p).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] += T::one();
                }
                d.iter_mut().for_each(|v| *v *= coef);
                accumulate(grads, *logits, Tensor::new(self.shape(*logits), d)?);
            }
        }
        Ok(())
    }
}

fn layout_of(rows: usize, cols: usize, transposed: bool) -> Layout {
    if transposed {
        (1, rows)
    } else {
        rm(cols)
    }
}

fn log_softmax_at<T: Scalar>(row: &[T], y: usize) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
    row[y] - lse
}

/// General axis permutation; output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_tensor<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let src = x.data();
    for _ in 0..x.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves element count")
}
