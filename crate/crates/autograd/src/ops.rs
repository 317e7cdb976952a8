//! Differentiable ops. Each backward rule is itself expressed with these ops,
//! so gradients can be differentiated again.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::var::record_kinks;
use crate::{Float, Tensor, Var};

pub(crate) enum Op<T: Float> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    AddScalar,
    Exp,
    Ln,
    Powf(T),
    Sigmoid,
    Softplus,
    /// Multiplies by a fixed mask (derivative of a piecewise-linear map).
    MaskMul(Tensor<T>),
    MatMul {
        ta: bool,
        tb: bool,
    },
    Reshape,
    Permute(Vec<usize>),
    SumTo,
    BroadcastTo,
    Narrow {
        axis: usize,
        start: usize,
    },
    Embed {
        axis: usize,
        start: usize,
    },
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    Conv2d,
    ConvWGrad,
    FlipT,
}

fn unary<T: Float>(x: &Var<T>, value: Tensor<T>, op: Op<T>) -> Var<T> {
    Var::from_op(value, op, vec![x.clone()])
}

fn binary<T: Float>(a: &Var<T>, b: &Var<T>, value: Tensor<T>, op: Op<T>) -> Var<T> {
    Var::from_op(value, op, vec![a.clone(), b.clone()])
}

impl<T: Float> Var<T> {
    fn c(v: f64) -> T {
        T::from_f64(v).unwrap()
    }

    pub fn add(&self, o: &Self) -> Self {
        binary(self, o, self.value().add(o.value()), Op::Add)
    }

    pub fn sub(&self, o: &Self) -> Self {
        binary(self, o, self.value().sub(o.value()), Op::Sub)
    }

    pub fn mul(&self, o: &Self) -> Self {
        binary(self, o, self.value().mul(o.value()), Op::Mul)
    }

    pub fn div(&self, o: &Self) -> Self {
        binary(self, o, self.value().div(o.value()), Op::Div)
    }

    pub fn neg(&self) -> Self {
        unary(self, self.value().map(|x| -x), Op::Neg)
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = Self::c(c);
        unary(self, self.value().scale(c), Op::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Self {
        let c = Self::c(c);
        unary(self, self.value().map(|x| x + c), Op::AddScalar)
    }

    pub fn exp(&self) -> Self {
        unary(self, self.value().map(|x| x.exp()), Op::Exp)
    }

    pub fn ln(&self) -> Self {
        unary(self, self.value().map(|x| x.ln()), Op::Ln)
    }

    pub fn powf(&self, p: f64) -> Self {
        let p = Self::c(p);
        unary(self, self.value().map(|x| x.powf(p)), Op::Powf(p))
    }

    pub fn sqrt(&self) -> Self {
        self.powf(0.5)
    }

    pub fn rsqrt(&self) -> Self {
        self.powf(-0.5)
    }

    pub fn square(&self) -> Self {
        self.mul(self)
    }

    pub fn sigmoid(&self) -> Self {
        let v = self.value().map(|x| T::one() / (T::one() + (-x).exp()));
        unary(self, v, Op::Sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Self {
        let v = self.value().map(|x| x.max(T::zero()) + (-(x.abs())).exp().ln_1p());
        unary(self, v, Op::Softplus)
    }

    /// Leaky rectifier scaled by `gain`.
    pub fn leaky_relu(&self, slope: f64, gain: f64) -> Self {
        record_kinks(self.value());
        let (s, g) = (Self::c(slope), Self::c(gain));
        let mask = self.value().map(|x| if x > T::zero() { g } else { g * s });
        self.mask_mul(mask)
    }

    pub(crate) fn mask_mul(&self, mask: Tensor<T>) -> Self {
        let v = self.value().mul(&mask);
        unary(self, v, Op::MaskMul(mask))
    }

    /// Batched `op(a)·op(b)` over the last two dims.
    pub fn matmul_t(&self, o: &Self, ta: bool, tb: bool) -> Self {
        binary(self, o, self.value().matmul(o.value(), ta, tb), Op::MatMul { ta, tb })
    }

    pub fn matmul(&self, o: &Self) -> Self {
        self.matmul_t(o, false, false)
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        unary(self, self.value().reshape(shape), Op::Reshape)
    }

    pub fn permute(&self, axes: &[usize]) -> Self {
        unary(self, self.value().permute(axes), Op::Permute(axes.to_vec()))
    }

    /// Swaps the last two dims.
    pub fn t(&self) -> Self {
        let n = self.shape().len();
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 2, n - 1);
        self.permute(&axes)
    }

    pub fn sum_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        unary(self, self.value().sum_to(shape), Op::SumTo)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        if self.shape() == shape {
            return self.clone();
        }
        unary(self, self.value().broadcast_to(shape), Op::BroadcastTo)
    }

    pub fn sum(&self) -> Self {
        self.sum_to(&[])
    }

    pub fn mean(&self) -> Self {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it as a unit dim.
    pub fn sum_axis_keep(&self, axis: usize) -> Self {
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        self.sum_to(&shape)
    }

    pub fn sum_axis(&self, axis: usize) -> Self {
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        self.sum_axis_keep(axis).reshape(&shape)
    }

    pub fn mean_axis(&self, axis: usize) -> Self {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Self {
        unary(self, self.value().narrow(axis, start, len), Op::Narrow { axis, start })
    }

    pub fn embed(&self, axis: usize, start: usize, total: usize) -> Self {
        unary(self, self.value().embed(axis, start, total), Op::Embed { axis, start })
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Self {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
        Var::from_op(
            Tensor::concat(&values, axis),
            Op::Concat { axis, sizes },
            parts.to_vec(),
        )
    }

    /// Stride-1 same-padding convolution, NCHW input, OIkk kernel.
    pub fn conv2d(&self, w: &Self) -> Self {
        binary(self, w, self.value().conv2d(w.value()), Op::Conv2d)
    }

    pub(crate) fn conv_wgrad(&self, g: &Self, k: usize) -> Self {
        binary(self, g, self.value().conv_wgrad(g.value(), k), Op::ConvWGrad)
    }

    pub(crate) fn flip_t(&self) -> Self {
        unary(self, self.value().flip_transpose(), Op::FlipT)
    }

    /// Softmax over the last axis; the max shift is treated as a constant.
    pub fn softmax_last(&self) -> Self {
        let shape = self.shape().to_vec();
        let last = shape[shape.len() - 1];
        let rows = self.value().numel() / last;
        let mut mx = Vec::with_capacity(rows);
        for r in self.value().data().chunks(last) {
            mx.push(r.iter().copied().fold(T::neg_infinity(), T::max));
        }
        let mut kshape = shape.clone();
        *kshape.last_mut().unwrap() = 1;
        let shift = Var::constant(Tensor::new(&kshape, mx));
        let e = self.sub(&shift).exp();
        let s = e.sum_to(&kshape);
        e.div(&s)
    }
}

/// Gradients of `node`'s parents given the upstream gradient `g`.
pub(crate) fn backward<T: Float>(node: &Var<T>, g: &Var<T>) -> Vec<Option<Var<T>>> {
    let ps = &node.0.parents;
    let shape_of = |i: usize| ps[i].shape().to_vec();
    match &node.0.op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(g.sum_to(&shape_of(0))), Some(g.sum_to(&shape_of(1)))],
        Op::Sub => vec![Some(g.sum_to(&shape_of(0))), Some(g.neg().sum_to(&shape_of(1)))],
        Op::Mul => vec![
            Some(g.mul(&ps[1]).sum_to(&shape_of(0))),
            Some(g.mul(&ps[0]).sum_to(&shape_of(1))),
        ],
        Op::Div => {
            let ga = g.div(&ps[1]);
            let gb = ga.mul(node).neg();
            vec![Some(ga.sum_to(&shape_of(0))), Some(gb.sum_to(&shape_of(1)))]
        }
        Op::Neg => vec![Some(g.neg())],
        Op::Scale(c) => vec![Some(g.scale(c.to_f64().unwrap()))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::Exp => vec![Some(g.mul(node))],
        Op::Ln => vec![Some(g.div(&ps[0]))],
        Op::Powf(p) => {
            let p = p.to_f64().unwrap();
            vec![Some(g.mul(&ps[0].powf(p - 1.0)).scale(p))]
        }
        Op::Sigmoid => {
            let one_minus = node.neg().add_scalar(1.0);
            vec![Some(g.mul(&node.mul(&one_minus)))]
        }
        Op::Softplus => vec![Some(g.mul(&ps[0].sigmoid()))],
        Op::MaskMul(mask) => vec![Some(g.mask_mul(mask.clone()))],
        Op::MatMul { ta, tb } => {
            let (a, b) = (&ps[0], &ps[1]);
            let shared_b = b.shape().len() == 2 && a.shape().len() > 2;
            // transposed-left cases go through (g·op(b))ᵀ so a shared 2-d right
            // operand never has to sit on the left of a batched product
            let (ga, gb) = match (ta, tb) {
                (false, false) => (g.matmul_t(b, false, true), mm_b(a, g, true, false, shared_b)),
                (false, true) => (g.matmul_t(b, false, false), mm_b(g, a, true, false, shared_b)),
                (true, false) => (g.matmul_t(b, false, true).t(), mm_b(a, g, false, false, shared_b)),
                (true, true) => (g.matmul_t(b, false, false).t(), mm_b(g, a, true, true, shared_b)),
            };
            vec![Some(ga), Some(gb)]
        }
        Op::Reshape => vec![Some(g.reshape(&shape_of(0)))],
        Op::Permute(axes) => {
            let mut inv = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            vec![Some(g.permute(&inv))]
        }
        Op::SumTo => vec![Some(g.broadcast_to(&shape_of(0)))],
        Op::BroadcastTo => vec![Some(g.sum_to(&shape_of(0)))],
        Op::Narrow { axis, start } => {
            let total = ps[0].shape()[*axis];
            vec![Some(g.embed(*axis, *start, total))]
        }
        Op::Embed { axis, start } => {
            let len = ps[0].shape()[*axis];
            vec![Some(g.narrow(*axis, *start, len))]
        }
        Op::Concat { axis, sizes } => {
            let mut start = 0;
            sizes
                .iter()
                .map(|&len| {
                    let part = g.narrow(*axis, start, len);
                    start += len;
                    Some(part)
                })
                .collect()
        }
        Op::Conv2d => {
            let (x, w) = (&ps[0], &ps[1]);
            let k = w.shape()[2];
            vec![Some(g.conv2d(&w.flip_t())), Some(x.conv_wgrad(g, k))]
        }
        Op::ConvWGrad => {
            // node = wgrad(x, gy); upstream g has the kernel's shape
            let (x, gy) = (&ps[0], &ps[1]);
            vec![Some(gy.conv2d(&g.flip_t())), Some(x.conv2d(g))]
        }
        Op::FlipT => vec![Some(g.flip_t())],
    }
}

/// Right-operand gradient of a matmul; when the right operand was a 2-d
/// matrix shared across a batch, the per-batch products are summed.
fn mm_b<T: Float>(l: &Var<T>, r: &Var<T>, ta: bool, tb: bool, shared: bool) -> Var<T> {
    if !shared {
        return l.matmul_t(r, ta, tb);
    }
    // fold the batch into the contracted dimension
    let flat = |v: &Var<T>| {
        let s = v.shape();
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        (v.reshape(&[batch, rows, cols]), batch, rows, cols)
    };
    let (l3, b, lr, lc) = flat(l);
    let (r3, _, rr, rc) = flat(r);
    // contracted dim is rows of l when ta, else cols; stack along it
    let l2 = if ta {
        l3.reshape(&[b * lr, lc])
    } else {
        l3.permute(&[1, 0, 2]).reshape(&[lr, b * lc])
    };
    let r2 = if tb {
        r3.permute(&[1, 0, 2]).reshape(&[rr, b * rc])
    } else {
        r3.reshape(&[b * rr, rc])
    };
    l2.matmul_t(&r2, ta, tb)
}

macro_rules! bin_op {
    ($tr:ident, $m:ident) => {
        impl<T: Float> $tr<&Var<T>> for &Var<T> {
            type Output = Var<T>;
            fn $m(self, rhs: &Var<T>) -> Var<T> {
                Var::$m(self, rhs)
            }
        }
    };
}

bin_op!(Add, add);
bin_op!(Sub, sub);
bin_op!(Mul, mul);
bin_op!(Div, div);

impl<T: Float> Neg for &Var<T> {
    type Output = Var<T>;
    fn neg(self) -> Var<T> {
        Var::neg(self)
    }
}
