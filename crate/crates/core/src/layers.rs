//! Parameter containers and the building blocks shared by every network.

use autograd::{Float, Tensor, Var};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{check_shape, Error, Result};
use crate::rng::normal;

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Anything that owns named parameters.
pub trait Module<T: Float> {
    /// Calls `f` on every parameter with its dotted name, in a fixed order.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn named_params<T: Float>(m: &mut dyn Module<T>, prefix: &str) -> Vec<(String, Var<T>)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |n, v| out.push((n.to_string(), v.clone())));
    out
}

pub fn param_count<T: Float>(m: &mut dyn Module<T>) -> usize {
    let mut c = 0;
    m.visit("", &mut |_, v| c += v.value().numel());
    c
}

/// Parameter values as f32 tensors, ready for a checkpoint.
pub fn export<T: Float>(m: &mut dyn Module<T>, prefix: &str) -> Vec<(String, Tensor<f32>)> {
    named_params(m, prefix)
        .into_iter()
        .map(|(n, v)| (n, v.value().cast()))
        .collect()
}

/// Loads every parameter of `m` from `ckpt`, checking names and shapes.
pub fn import<T: Float>(m: &mut dyn Module<T>, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
    let mut res = Ok(());
    m.visit(prefix, &mut |name, v| {
        if res.is_err() {
            return;
        }
        match ckpt.get(name) {
            None => {
                res = Err(Error::Checkpoint {
                    path: Default::default(),
                    msg: format!("missing tensor `{name}`"),
                })
            }
            Some(t) => match check_shape(name, v.shape(), t.shape()) {
                Ok(()) => {
                    let value = t.cast();
                    *v = if v.requires_grad() {
                        Var::param(value)
                    } else {
                        Var::constant(value)
                    };
                }
                Err(e) => res = Err(e),
            },
        }
    });
    res
}

/// Makes every parameter a constant (`false`) or trainable leaf (`true`).
pub fn set_trainable<T: Float>(m: &mut dyn Module<T>, trainable: bool) {
    m.visit("", &mut |_, v| {
        let t = v.value().clone();
        *v = if trainable { Var::param(t) } else { Var::constant(t) };
    });
}

/// Replaces parameter values in visit order.
pub fn assign<T: Float>(m: &mut dyn Module<T>, values: Vec<Tensor<T>>) {
    let mut it = values.into_iter();
    m.visit("", &mut |_, v| {
        let t = it.next().expect("one value per parameter");
        assert_eq!(t.shape(), v.shape());
        *v = if v.requires_grad() {
            Var::param(t)
        } else {
            Var::constant(t)
        };
    });
    assert!(it.next().is_none(), "more values than parameters");
}

/// Converts every parameter to another float type, keeping trainability.
pub fn cast_params<T: Float, U: Float>(src: &mut dyn Module<T>, dst: &mut dyn Module<U>) {
    let vals: Vec<Tensor<U>> = named_params(src, "").iter().map(|(_, v)| v.value().cast()).collect();
    assign(dst, vals);
}

fn param_normal<T: Float>(rng: &mut impl Rng, shape: &[usize]) -> Var<T> {
    Var::param(normal(rng, shape))
}

fn param_full<T: Float>(shape: &[usize], v: f64) -> Var<T> {
    Var::param(Tensor::full(shape, T::from_f64(v).unwrap()))
}

/// Fully connected layer with equalized learning rate: weights are stored as
/// unit normals and scaled by `lr_mul / sqrt(fan_in)` at run time.
pub struct Linear<T: Float> {
    pub weight: Var<T>,
    pub bias: Option<Var<T>>,
    pub lr_mul: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Float> Linear<T> {
    pub fn new(rng: &mut impl Rng, in_dim: usize, out_dim: usize, bias_init: Option<f64>, lr_mul: f64) -> Self {
        Self {
            weight: Var::param(normal::<T>(rng, &[out_dim, in_dim]).scale(T::from_f64(1.0 / lr_mul).unwrap())),
            bias: bias_init.map(|b| param_full(&[out_dim], b / lr_mul)),
            lr_mul,
            in_dim,
            out_dim,
        }
    }

    pub fn weight_gain(&self) -> f64 {
        self.lr_mul / (self.in_dim as f64).sqrt()
    }

    /// Sets the raw weight so the effective weight equals `w`.
    pub fn set_effective_weight(&mut self, w: &Tensor<T>) {
        let g = T::from_f64(1.0 / self.weight_gain()).unwrap();
        self.weight = Var::param(w.scale(g));
    }

    /// `x·Wᵀ + b` over the last axis of `x`.
    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let y = x.matmul_t(&self.weight.scale(self.weight_gain()), false, true);
        match &self.bias {
            Some(b) => y.add(&b.scale(self.lr_mul)),
            None => y,
        }
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Plain stride-1 same-padding convolution with equalized learning rate.
pub struct Conv<T: Float> {
    pub weight: Var<T>,
    pub bias: Var<T>,
    pub k: usize,
}

impl<T: Float> Conv<T> {
    pub fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            weight: param_normal(rng, &[cout, cin, k, k]),
            bias: param_full(&[cout], 0.0),
            k,
        }
    }

    fn gain(&self) -> f64 {
        let s = self.weight.shape();
        1.0 / ((s[1] * s[2] * s[3]) as f64).sqrt()
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let c = self.bias.shape()[0];
        x.conv2d(&self.weight.scale(self.gain()))
            .add(&self.bias.reshape(&[1, c, 1, 1]))
    }
}

impl<T: Float> Module<T> for Conv<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Demodulated kernel for one sample: `w' = s·w`, `w'' = w' / sqrt(Σ_{j,k} w'² + eps)`
/// per output channel. `w` is `[out, in, k, k]`, `s` has one entry per input channel.
pub fn demodulate<T: Float>(w: &Tensor<T>, s: &[T], eps: f64) -> Tensor<T> {
    let sh = w.shape();
    let (cout, cin, kk) = (sh[0], sh[1], sh[2] * sh[3]);
    assert_eq!(s.len(), cin, "style length must equal input channels");
    assert!(eps > 0.0, "eps must be positive");
    let eps = T::from_f64(eps).unwrap();
    let mut out = w.to_vec();
    for o in 0..cout {
        let row = &mut out[o * cin * kk..(o + 1) * cin * kk];
        for (j, chunk) in row.chunks_mut(kk).enumerate() {
            for v in chunk.iter_mut() {
                *v *= s[j];
            }
        }
        let ss: T = row.iter().map(|&v| v * v).sum();
        let inv = T::one() / (ss + eps).sqrt();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::new(sh, out)
}

/// Style-modulated convolution. A learned affine map turns a style row into
/// per-input-channel scales; the kernel is modulated, optionally demodulated,
/// and followed by bias and (optionally) a leaky rectifier.
pub struct ModConv<T: Float> {
    pub affine: Linear<T>,
    pub weight: Var<T>,
    pub bias: Var<T>,
    pub k: usize,
    pub demod: bool,
    pub activate: bool,
    pub eps: f64,
}

impl<T: Float> ModConv<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut impl Rng,
        style_dim: usize,
        cin: usize,
        cout: usize,
        k: usize,
        demod: bool,
        activate: bool,
        eps: f64,
    ) -> Self {
        Self {
            affine: Linear::new(rng, style_dim, cin, Some(1.0), 1.0),
            weight: param_normal(rng, &[cout, cin, k, k]),
            bias: param_full(&[cout], 0.0),
            k,
            demod,
            activate,
            eps,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn gain(&self) -> f64 {
        let s = self.weight.shape();
        1.0 / ((s[1] * s[2] * s[3]) as f64).sqrt()
    }

    /// Per-sample styles `[B, in]` for style rows `[B, d]`.
    pub fn styles(&self, w_row: &Var<T>) -> Var<T> {
        self.affine.forward(w_row)
    }

    /// Effective (modulated, demodulated) kernels, one per sample: `[B, out, in, k, k]`.
    pub fn effective_kernels(&self, w_row: &Var<T>) -> Tensor<T> {
        let s = self.styles(w_row);
        let b = s.shape()[0];
        let w = self.weight.value().scale(T::from_f64(self.gain()).unwrap());
        let mut parts = Vec::with_capacity(b);
        for i in 0..b {
            let si = &s.value().data()[i * self.in_channels()..(i + 1) * self.in_channels()];
            let k = if self.demod {
                demodulate(&w, si, self.eps)
            } else {
                let sv = Tensor::new(&[1, si.len(), 1, 1], si.to_vec());
                w.mul(&sv)
            };
            parts.push(k.reshape(&[1, self.out_channels(), self.in_channels(), self.k, self.k]));
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// `x` is `[B, in, H, W]`, `w_row` is `[B, d]`.
    pub fn forward(&self, x: &Var<T>, w_row: &Var<T>) -> Var<T> {
        let (b, cin, cout) = (x.shape()[0], self.in_channels(), self.out_channels());
        let s = self.styles(w_row);
        let w = self.weight.scale(self.gain());
        // conv(x ⊙ s, W) ⊙ d equals conv with the per-sample demodulated kernel.
        let mut y = x.mul(&s.reshape(&[b, cin, 1, 1])).conv2d(&w);
        if self.demod {
            let wsq = w.square().sum_to(&[cout, cin, 1, 1]).reshape(&[cout, cin]);
            let d = s.square().matmul_t(&wsq, false, true).add_scalar(self.eps).rsqrt();
            y = y.mul(&d.reshape(&[b, cout, 1, 1]));
        }
        y = y.add(&self.bias.reshape(&[1, cout, 1, 1]));
        if self.activate {
            y = y.leaky_relu(LRELU_SLOPE, LRELU_GAIN);
        }
        y
    }
}

impl<T: Float> Module<T> for ModConv<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.affine.visit(&join(prefix, "affine"), f);
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `[2n, n]` matrix of 1-D bilinear 2× upsampling (half-pixel centers, edge clamped).
pub fn upsample_matrix<T: Float>(n: usize) -> Tensor<T> {
    let m = 2 * n;
    let mut data = vec![T::zero(); m * n];
    for o in 0..m {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let f = src - i0 as f64;
        data[o * n + i0] += T::from_f64(1.0 - f).unwrap();
        data[o * n + i1] += T::from_f64(f).unwrap();
    }
    Tensor::new(&[m, n], data)
}

/// `[n/2, n]` matrix of 1-D 2× average pooling.
pub fn downsample_matrix<T: Float>(n: usize) -> Tensor<T> {
    let m = n / 2;
    let half = T::from_f64(0.5).unwrap();
    let mut data = vec![T::zero(); m * n];
    for o in 0..m {
        data[o * n + 2 * o] = half;
        data[o * n + 2 * o + 1] = half;
    }
    Tensor::new(&[m, n], data)
}

/// Applies a separable resampling matrix `a` (`[m, n]`) to both spatial axes
/// of a square `[B, C, n, n]` map.
pub fn resample_separable<T: Float>(x: &Var<T>, a: &Tensor<T>) -> Var<T> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let m = a.shape()[0];
    let a = Var::constant(a.clone());
    // rows: [B·C, H, W]·Aᵀ -> [B·C, H, m]
    let y = x.reshape(&[b * c, h, w]).matmul_t(&a, false, true);
    // columns: transpose, apply, transpose back
    let y = y.t().matmul_t(&a, false, true).t();
    y.reshape(&[b, c, m, m])
}

pub fn upsample2x<T: Float>(x: &Var<T>) -> Var<T> {
    resample_separable(x, &upsample_matrix(x.shape()[2]))
}

pub fn avgpool2x<T: Float>(x: &Var<T>) -> Var<T> {
    resample_separable(x, &downsample_matrix(x.shape()[2]))
}

/// Normalizes the last axis to zero mean and unit variance (no affine terms).
pub fn layer_norm<T: Float>(x: &Var<T>, eps: f64) -> Var<T> {
    let last = x.shape().len() - 1;
    let mut ks = x.shape().to_vec();
    ks[last] = 1;
    let n = x.shape()[last] as f64;
    let mu = x.sum_to(&ks).scale(1.0 / n);
    let c = x.sub(&mu);
    let var = c.square().sum_to(&ks).scale(1.0 / n);
    c.mul(&var.add_scalar(eps).rsqrt())
}
