//! Dense, contiguous, row-major tensors and the numeric kernels behind every
//! differentiable op.
//!
//! Storage is reference counted, so cloning a tensor or reshaping it never
//! copies the payload. All kernels allocate a fresh output.

use std::fmt;
use std::sync::Arc;

use crate::Float;

#[derive(Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "…")?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast");
        };
    }
    out
}

/// Strides of `shape` viewed as `target` (right aligned), zero on broadcast dims.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let off = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Walks every innermost row of `shape` for `K` strided operands.
///
/// `f` receives the row start offsets, the row length and the per-operand
/// inner strides. Unit dims are dropped and mergeable dims are coalesced first.
fn walk<const K: usize>(shape: &[usize], strides: [&[usize]; K], mut f: impl FnMut([usize; K], usize, [usize; K])) {
    let mut dims: Vec<usize> = Vec::with_capacity(shape.len());
    let mut st: Vec<[usize; K]> = Vec::with_capacity(shape.len());
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 {
            continue;
        }
        let s: [usize; K] = std::array::from_fn(|k| strides[k][i]);
        if let (Some(&last_d), Some(last_s)) = (dims.last(), st.last()) {
            if (0..K).all(|k| last_s[k] == s[k] * d) {
                let n = dims.len();
                dims[n - 1] = last_d * d;
                st[n - 1] = s;
                continue;
            }
        }
        dims.push(d);
        st.push(s);
    }
    if dims.contains(&0) {
        return;
    }
    if dims.is_empty() {
        f([0; K], 1, [0; K]);
        return;
    }
    let nd = dims.len();
    let inner = dims[nd - 1];
    let inner_st = st[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut off = [0usize; K];
    loop {
        f(off, inner, inner_st);
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            for k in 0..K {
                off[k] += st[ax][k];
            }
            if idx[ax] < dims[ax] {
                break;
            }
            for k in 0..K {
                off[k] -= st[ax][k] * dims[ax];
            }
            idx[ax] = 0;
        }
    }
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "data length {} does not match shape {shape:?}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::new(shape, vec![v; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::new(&[], vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x).unwrap()).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self::new(shape, (0..numel(shape)).map(&mut f).collect())
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap()).collect()
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor::new(
            &self.shape,
            self.data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        )
    }

    /// True when both tensors share shape and every element is bit-identical.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits64() == b.to_bits64())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise binary op with broadcasting.
    pub fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Self::new(&self.shape, data);
        }
        if other.numel() == 1 && other.ndim() <= self.ndim() {
            let b = other.data[0];
            return self.map(|a| f(a, b));
        }
        if self.numel() == 1 && self.ndim() <= other.ndim() {
            let a = self.data[0];
            return other.map(|b| f(a, b));
        }
        let shape = broadcast_shape(&self.shape, &other.shape);
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let so = contiguous_strides(&shape);
        let mut out = vec![T::zero(); numel(&shape)];
        let (a, b) = (&self.data[..], &other.data[..]);
        walk(&shape, [&sa, &sb, &so], |[oa, ob, oo], len, [ia, ib, io]| {
            for i in 0..len {
                out[oo + i * io] = f(a[oa + i * ia], b[ob + i * ib]);
            }
        });
        Self::new(&shape, out)
    }

    pub fn add(&self, o: &Self) -> Self {
        self.zip_with(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.zip_with(o, |a, b| a - b)
    }

    pub fn mul(&self, o: &Self) -> Self {
        self.zip_with(o, |a, b| a * b)
    }

    pub fn div(&self, o: &Self) -> Self {
        self.zip_with(o, |a, b| a / b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        // pairwise-ish: accumulate in f64 for stable reductions in both precisions
        let s: f64 = self.data.iter().map(|x| x.to_f64().unwrap()).sum();
        T::from_f64(s).unwrap()
    }

    pub fn mean(&self) -> T {
        T::from_f64(self.sum().to_f64().unwrap() / self.numel() as f64).unwrap()
    }

    pub fn sq_norm(&self) -> T {
        let s: f64 = self.data.iter().map(|x| x.to_f64().unwrap().powi(2)).sum();
        T::from_f64(s).unwrap()
    }

    /// Reduces a broadcast result back to `target` by summing broadcast dims.
    pub fn sum_to(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        assert!(target.len() <= self.ndim(), "sum_to {:?} -> {target:?}", self.shape);
        let off = self.ndim() - target.len();
        for (i, &t) in target.iter().enumerate() {
            let d = self.shape[i + off];
            assert!(t == d || t == 1, "sum_to {:?} -> {target:?}", self.shape);
        }
        let so = broadcast_strides(target, &self.shape);
        let si = contiguous_strides(&self.shape);
        let mut out = vec![T::zero(); numel(target)];
        let x = &self.data[..];
        walk(&self.shape, [&si, &so], |[oi, oo], len, [ii, io]| {
            if io == 0 {
                let mut acc = T::zero();
                for i in 0..len {
                    acc += x[oi + i * ii];
                }
                out[oo] += acc;
            } else {
                for i in 0..len {
                    out[oo + i * io] += x[oi + i * ii];
                }
            }
        });
        Self::new(target, out)
    }

    pub fn broadcast_to(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        assert_eq!(broadcast_shape(&self.shape, target), target, "broadcast_to");
        let si = broadcast_strides(&self.shape, target);
        let so = contiguous_strides(target);
        let mut out = vec![T::zero(); numel(target)];
        let x = &self.data[..];
        walk(target, [&si, &so], |[oi, oo], len, [ii, io]| {
            for i in 0..len {
                out[oo + i * io] = x[oi + i * ii];
            }
        });
        Self::new(target, out)
    }

    pub fn permute(&self, axes: &[usize]) -> Self {
        assert_eq!(axes.len(), self.ndim(), "permute axes {axes:?} for {:?}", self.shape);
        let own = contiguous_strides(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let si: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let so = contiguous_strides(&shape);
        let mut out = vec![T::zero(); self.numel()];
        let x = &self.data[..];
        walk(&shape, [&si, &so], |[oi, oo], len, [ii, io]| {
            for i in 0..len {
                out[oo + i * io] = x[oi + i * ii];
            }
        });
        Self::new(&shape, out)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        let d = self.shape[axis];
        assert!(start + len <= d, "narrow {start}+{len} beyond {d}");
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::new(&shape, out)
    }

    /// Places `self` at `start` along `axis` inside zeros of extent `total`.
    pub fn embed(&self, axis: usize, start: usize, total: usize) -> Self {
        let len = self.shape[axis];
        assert!(start + len <= total);
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * total * inner];
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = total;
        Self::new(&shape, out)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.ndim(), first.len());
            for (i, (&a, &b)) in p.shape.iter().zip(first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {:?} vs {first:?}", p.shape);
            }
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        Self::new(&shape, out)
    }

    /// Batched matrix product over the last two dims with optional transposes.
    ///
    /// Leading dims must agree exactly; a 2-D right operand is shared across
    /// the batch.
    pub fn matmul(&self, other: &Self, ta: bool, tb: bool) -> Self {
        let (a, b) = (self, other);
        assert!(a.ndim() >= 2 && b.ndim() >= 2, "matmul needs matrices");
        let (ar, ac) = (a.shape[a.ndim() - 2], a.shape[a.ndim() - 1]);
        let (br, bc) = (b.shape[b.ndim() - 2], b.shape[b.ndim() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(
            k, k2,
            "matmul inner dims {:?} x {:?} (ta={ta}, tb={tb})",
            a.shape, b.shape
        );
        let batch_a = &a.shape[..a.ndim() - 2];
        let batch_b = &b.shape[..b.ndim() - 2];
        let shared_b = batch_b.is_empty();
        assert!(
            shared_b || batch_a == batch_b,
            "matmul batch dims {batch_a:?} vs {batch_b:?}"
        );
        let batch: usize = batch_a.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
        let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
        for i in 0..batch {
            let pa = &a.data[i * ar * ac..(i + 1) * ar * ac];
            let pb = if shared_b {
                &b.data[..]
            } else {
                &b.data[i * br * bc..(i + 1) * br * bc]
            };
            let pc = &mut out[i * m * n..(i + 1) * m * n];
            T::gemm(m, k, n, pa, rsa, csa, pb, rsb, csb, pc, n, 1);
        }
        let mut shape = batch_a.to_vec();
        shape.push(m);
        shape.push(n);
        Self::new(&shape, out)
    }

    /// Unfolds an NCHW tensor into a `[C*k*k, N*H*W]` patch matrix for a
    /// stride-1 convolution with `pad` zero padding and same-size output.
    fn im2col(&self, k: usize, pad: usize) -> Vec<T> {
        let [n, c, h, w] = dims4(&self.shape);
        let hw = h * w;
        let cols = n * hw;
        let mut out = vec![T::zero(); c * k * k * cols];
        let x = &self.data[..];
        for ci in 0..c {
            for a in 0..k {
                for b in 0..k {
                    let row = (ci * k + a) * k + b;
                    let dst_row = &mut out[row * cols..(row + 1) * cols];
                    for ni in 0..n {
                        let src = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                        let dst = &mut dst_row[ni * hw..(ni + 1) * hw];
                        for y in 0..h {
                            let iy = y as isize + a as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                            let drow = &mut dst[y * w..(y + 1) * w];
                            let shift = b as isize - pad as isize;
                            let x0 = (-shift).max(0) as usize;
                            let x1 = (w as isize - shift).min(w as isize).max(0) as usize;
                            if x0 < x1 {
                                let s0 = (x0 as isize + shift) as usize;
                                drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Stride-1 "same" convolution: `x` is NCHW, `w` is OIkk with odd k.
    pub fn conv2d(&self, w: &Self) -> Self {
        let [n, c, h, wd] = dims4(&self.shape);
        let [o, ci, k, k2] = dims4(&w.shape);
        assert_eq!(c, ci, "conv2d channels: input {:?}, kernel {:?}", self.shape, w.shape);
        assert!(k == k2 && k % 2 == 1, "conv2d needs odd square kernels");
        let pad = k / 2;
        let hw = h * wd;
        let cols = n * hw;
        let patches = if k == 1 { None } else { Some(self.im2col(k, pad)) };
        let mut tmp = vec![T::zero(); o * cols];
        match &patches {
            Some(p) => T::gemm(o, c * k * k, cols, &w.data, c * k * k, 1, p, cols, 1, &mut tmp, cols, 1),
            None => {
                // 1x1: the input itself is the patch matrix, one gemm per sample
                for ni in 0..n {
                    let xs = &self.data[ni * c * hw..(ni + 1) * c * hw];
                    let dst = &mut tmp[ni * hw..];
                    T::gemm(o, c, hw, &w.data, c, 1, xs, hw, 1, dst, cols, 1);
                }
            }
        }
        // [O, N, HW] -> [N, O, HW]
        let mut out = vec![T::zero(); n * o * hw];
        for oi in 0..o {
            for ni in 0..n {
                out[(ni * o + oi) * hw..(ni * o + oi + 1) * hw]
                    .copy_from_slice(&tmp[oi * cols + ni * hw..oi * cols + (ni + 1) * hw]);
            }
        }
        Self::new(&[n, o, h, wd], out)
    }

    /// Kernel gradient of [`Tensor::conv2d`]: `out[o,i,a,b] = Σ g[n,o,y,x]·x[n,i,y+a-p,x+b-p]`.
    pub fn conv_wgrad(&self, g: &Self, k: usize) -> Self {
        let [n, c, h, wd] = dims4(&self.shape);
        let [n2, o, h2, w2] = dims4(&g.shape);
        assert!(
            n == n2 && h == h2 && wd == w2,
            "conv_wgrad shapes {:?} {:?}",
            self.shape,
            g.shape
        );
        let pad = k / 2;
        let hw = h * wd;
        let cols = n * hw;
        // g: [N, O, HW] -> [O, N*HW]
        let mut gp = vec![T::zero(); o * cols];
        for ni in 0..n {
            for oi in 0..o {
                gp[oi * cols + ni * hw..oi * cols + (ni + 1) * hw]
                    .copy_from_slice(&g.data[(ni * o + oi) * hw..(ni * o + oi + 1) * hw]);
            }
        }
        let ckk = c * k * k;
        let mut out = vec![T::zero(); o * ckk];
        if k == 1 {
            for ni in 0..n {
                let xs = &self.data[ni * c * hw..(ni + 1) * c * hw];
                let gs = &gp[ni * hw..];
                // out[o, c] += gs[o, hw] · xs[c, hw]^T
                T::gemm_acc(o, hw, c, gs, cols, 1, xs, 1, hw, &mut out, c, 1);
            }
        } else {
            let p = self.im2col(k, pad);
            T::gemm(o, cols, ckk, &gp, cols, 1, &p, 1, cols, &mut out, ckk, 1);
        }
        Self::new(&[o, c, k, k], out)
    }

    /// `w[o,i,a,b] -> w'[i,o,k-1-a,k-1-b]`; an involution.
    pub fn flip_transpose(&self) -> Self {
        let [o, c, k, k2] = dims4(&self.shape);
        assert_eq!(k, k2);
        let mut out = vec![T::zero(); self.numel()];
        for oi in 0..o {
            for ci in 0..c {
                for a in 0..k {
                    for b in 0..k {
                        out[((ci * o + oi) * k + (k - 1 - a)) * k + (k - 1 - b)] =
                            self.data[((oi * c + ci) * k + a) * k + b];
                    }
                }
            }
        }
        Self::new(&[c, o, k, k], out)
    }
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected a 4-d tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v)
    }

    #[test]
    fn broadcasting_add_and_sum_to_are_adjoint_shapes() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3], &[10., 20., 30.]);
        let c = a.add(&b);
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let s = c.sum_to(&[3]);
        assert_eq!(s.data(), &[25., 47., 69.]);
        let col = t(&[2, 1], &[1., 2.]);
        assert_eq!(a.mul(&col).data(), &[1., 2., 3., 8., 10., 12.]);
        assert_eq!(a.sum_to(&[2, 1]).data(), &[6., 15.]);
        assert_eq!(a.sum_to(&[]).item(), 21.);
    }

    #[test]
    fn permute_and_narrow() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let p = a.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[..6], [0., 4., 8., 12., 16., 20.]);
        let n = a.narrow(1, 1, 2);
        assert_eq!(n.shape(), &[2, 2, 4]);
        assert_eq!(n.data()[0], 4.);
        let e = n.embed(1, 1, 3);
        assert_eq!(e.narrow(1, 1, 2).data(), n.data());
        assert_eq!(e.narrow(1, 0, 1).sum(), 0.);
        let c = Tensor::concat(&[&a.narrow(2, 0, 1), &a.narrow(2, 1, 3)], 2);
        assert!(c.bit_eq(&a));
    }

    #[test]
    fn matmul_transposes() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        assert_eq!(a.matmul(&b, false, false).data(), &[4., 5., 10., 11.]);
        let at = a.permute(&[1, 0]);
        assert_eq!(at.matmul(&b, true, false).data(), &[4., 5., 10., 11.]);
        let bt = b.permute(&[1, 0]);
        assert_eq!(a.matmul(&bt, false, true).data(), &[4., 5., 10., 11.]);
    }

    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, h, wd] = dims4(x.shape());
        let [o, _, k, _] = dims4(w.shape());
        let p = (k / 2) as isize;
        Tensor::from_fn(&[n, o, h, wd], |idx| {
            let (ni, rest) = (idx / (o * h * wd), idx % (o * h * wd));
            let (oi, rest) = (rest / (h * wd), rest % (h * wd));
            let (y, xx) = (rest / wd, rest % wd);
            let mut acc = 0.0;
            for ci in 0..c {
                for a in 0..k {
                    for b in 0..k {
                        let iy = y as isize + a as isize - p;
                        let ix = xx as isize + b as isize - p;
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < wd as isize {
                            acc += w.data()[((oi * c + ci) * k + a) * k + b]
                                * x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        for k in [1, 3] {
            let x = Tensor::<f64>::from_fn(&[2, 3, 5, 4], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
            let w = Tensor::<f64>::from_fn(&[4, 3, k, k], |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
            let fast = x.conv2d(&w);
            let slow = conv_naive(&x, &w);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn conv_wgrad_is_adjoint_of_conv() {
        // <conv(x, w), g> == <w, wgrad(x, g)> and == <x, conv(g, flipT(w))>
        for k in [1, 3] {
            let x = Tensor::<f64>::from_fn(&[2, 3, 4, 4], |i| ((i * 31 % 17) as f64 - 8.0) * 0.1);
            let w = Tensor::<f64>::from_fn(&[5, 3, k, k], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3);
            let g = Tensor::<f64>::from_fn(&[2, 5, 4, 4], |i| ((i * 11 % 13) as f64 - 6.0) * 0.05);
            let lhs = x.conv2d(&w).mul(&g).sum();
            let via_w = w.mul(&x.conv_wgrad(&g, k)).sum();
            let via_x = x.mul(&g.conv2d(&w.flip_transpose())).sum();
            assert!((lhs - via_w).abs() < 1e-10);
            assert!((lhs - via_x).abs() < 1e-10);
        }
    }
}
