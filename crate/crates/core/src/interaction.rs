//! Cross-space interaction: multi-head attention with p⁺ as query and z⁺ as
//! key/value, refining z⁺ into the style code w.

use autograd::{Float, Tensor, Var};
use rand::Rng;

use crate::config::{ModelConfig, Variant};
use crate::error::{check_shape, Error, Result};
use crate::latent::add_positional_encoding;
use crate::layers::{join, layer_norm, Linear, Module, LRELU_GAIN, LRELU_SLOPE};
use crate::rng::normal;

/// One attention layer: Q/K/V/O projections (with zero-initialised biases).
pub struct AttentionLayer<T: Float> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub heads: usize,
    pub layer_norm: bool,
}

/// Splits `[B, n, d]` into `[B·h, n, d/h]`.
fn split_heads<T: Float>(x: &Var<T>, h: usize) -> Var<T> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    x.reshape(&[b, n, h, d / h])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b * h, n, d / h])
}

fn merge_heads<T: Float>(x: &Var<T>, b: usize, h: usize) -> Var<T> {
    let s = x.shape();
    let (n, dk) = (s[1], s[2]);
    x.reshape(&[b, h, n, dk])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, n, h * dk])
}

impl<T: Float> AttentionLayer<T> {
    pub fn new(rng: &mut impl Rng, d: usize, heads: usize, layer_norm: bool) -> Self {
        let mut wo = Linear::new(rng, d, d, Some(0.0), 1.0);
        // identity plus small noise
        let noise: Tensor<T> = normal(rng, &[d, d]);
        let eye = Tensor::<T>::eye(d);
        wo.set_effective_weight(&eye.add(&noise.scale(T::from_f64(0.1 / (d as f64).sqrt()).unwrap())));
        Self {
            wq: Linear::new(rng, d, d, Some(0.0), 1.0),
            wk: Linear::new(rng, d, d, Some(0.0), 1.0),
            wv: Linear::new(rng, d, d, Some(0.0), 1.0),
            wo,
            heads,
            layer_norm,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.wq.out_dim / self.heads
    }

    /// Returns the refined residual stream and the attention weights `[B·h, n, n]`.
    ///
    /// `query_in` and `key_in` feed the Q and K projections, `value_in` feeds V
    /// and `residual` is added to the recombined heads.
    pub fn attend(
        &self,
        query_in: &Var<T>,
        key_in: &Var<T>,
        value_in: &Var<T>,
        residual: &Var<T>,
    ) -> Result<(Var<T>, Var<T>)> {
        let s = residual.shape().to_vec();
        for (what, v) in [("query", query_in), ("key", key_in), ("value", value_in)] {
            check_shape(what, &s, v.shape())?;
            if !v.value().all_finite() {
                return Err(Error::NonFinite(format!("attention {what} input")));
            }
        }
        let b = s[0];
        let h = self.heads;
        let q = split_heads(&self.wq.forward(query_in), h);
        let k = split_heads(&self.wk.forward(key_in), h);
        let v = split_heads(&self.wv.forward(value_in), h);
        let logits = q.matmul_t(&k, false, true).scale(1.0 / (self.head_dim() as f64).sqrt());
        let attn = logits.softmax_last();
        let heads = merge_heads(&attn.matmul(&v), b, h);
        let mut out = residual.add(&self.wo.forward(&heads));
        if self.layer_norm {
            out = layer_norm(&out, 1e-5);
        }
        Ok((out, attn))
    }
}

impl<T: Float> Module<T> for AttentionLayer<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.wq.visit(&join(prefix, "wq"), f);
        self.wk.visit(&join(prefix, "wk"), f);
        self.wv.visit(&join(prefix, "wv"), f);
        self.wo.visit(&join(prefix, "wo"), f);
    }
}

/// `w = z⁺ + MLP([z⁺_i, p⁺_i])`, one perceptron shared by all rows.
pub struct MlpInteraction<T: Float> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Float> MlpInteraction<T> {
    pub fn new(rng: &mut impl Rng, d: usize) -> Self {
        Self {
            hidden: Linear::new(rng, 2 * d, d, Some(0.0), 1.0),
            out: Linear::new(rng, d, d, Some(0.0), 1.0),
        }
    }

    pub fn forward(&self, z_plus: &Var<T>, p_plus: &Var<T>) -> Result<Var<T>> {
        check_shape("p_plus", z_plus.shape(), p_plus.shape())?;
        let x = Var::concat(&[z_plus.clone(), p_plus.clone()], 2);
        let h = self.hidden.forward(&x).leaky_relu(LRELU_SLOPE, LRELU_GAIN);
        Ok(z_plus.add(&self.out.forward(&h)))
    }
}

impl<T: Float> Module<T> for MlpInteraction<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

/// The interaction stack for the configured variant.
pub struct Interaction<T: Float> {
    pub variant: Variant,
    pub layers: Vec<AttentionLayer<T>>,
    pub mlp: Option<MlpInteraction<T>>,
}

impl<T: Float> Interaction<T> {
    pub fn new(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let layers = (0..cfg.interaction_layers())
            .map(|_| AttentionLayer::new(rng, cfg.d, cfg.heads, cfg.layer_norm))
            .collect();
        let mlp = (cfg.variant == Variant::MlpInteraction).then(|| MlpInteraction::new(rng, cfg.d));
        Self {
            variant: cfg.variant,
            layers,
            mlp,
        }
    }

    /// Style code `w` from mapped codes; `p⁺` is only read.
    pub fn forward(&self, z_plus: &Var<T>, p_plus: &Var<T>) -> Result<Var<T>> {
        Ok(self.forward_with_attention(z_plus, p_plus)?.0)
    }

    /// As [`forward`](Self::forward), also returning each layer's attention weights.
    pub fn forward_with_attention(&self, z_plus: &Var<T>, p_plus: &Var<T>) -> Result<(Var<T>, Vec<Var<T>>)> {
        check_shape("p_plus", z_plus.shape(), p_plus.shape())?;
        if let Some(mlp) = &self.mlp {
            return Ok((mlp.forward(z_plus, p_plus)?, Vec::new()));
        }
        if self.layers.is_empty() {
            return Ok((z_plus.clone(), Vec::new()));
        }
        // Positions enter through queries and first-layer keys only, so values
        // and the residual stream carry pure z-derived content.
        let p_pos = add_positional_encoding(p_plus)?;
        let z_pos = add_positional_encoding(z_plus)?;
        let mut z = z_plus.clone();
        let mut attns = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let z_key = if l == 0 { z_pos.clone() } else { z.clone() };
            let (out, a) = match self.variant {
                Variant::SwappedQkv => layer.attend(&z_key, &p_pos, p_plus, &z)?,
                _ => layer.attend(&p_pos, &z_key, &z, &z)?,
            };
            z = out;
            attns.push(a);
        }
        Ok((z, attns))
    }
}

impl<T: Float> Module<T> for Interaction<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit(&join(prefix, &format!("layer{l}")), f);
        }
        if let Some(m) = &mut self.mlp {
            m.visit(&join(prefix, "mlp"), f);
        }
    }
}
