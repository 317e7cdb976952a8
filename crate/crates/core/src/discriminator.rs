//! Convolutional critic and its R1 gradient penalty.

use autograd::{grad, Float, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{check_shape, Error, Result};
use crate::layers::{avgpool2x, join, Conv, Linear, Module, LRELU_GAIN, LRELU_SLOPE};

pub struct Discriminator<T: Float> {
    pub from_rgb: Conv<T>,
    /// One conv per halving, from `R` down to 4×4.
    pub down: Vec<Conv<T>>,
    pub final_conv: Conv<T>,
    pub fc: Linear<T>,
    pub out: Linear<T>,
    pub resolution: usize,
    pub minibatch_std: bool,
}

fn act<T: Float>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(LRELU_SLOPE, LRELU_GAIN)
}

/// Appends the across-batch standard deviation (averaged over features) as a channel.
fn minibatch_std<T: Float>(x: &Var<T>) -> Var<T> {
    let s = x.shape().to_vec();
    let b = s[0] as f64;
    let mu = x.sum_axis_keep(0).scale(1.0 / b);
    let var = x.sub(&mu).square().sum_axis_keep(0).scale(1.0 / b);
    let sd = var.add_scalar(1e-8).sqrt().mean();
    let ch = sd.reshape(&[1, 1, 1, 1]).broadcast_to(&[s[0], 1, s[2], s[3]]);
    Var::concat(&[x.clone(), ch], 1)
}

impl<T: Float> Discriminator<T> {
    pub fn new(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let r = cfg.resolution;
        let from_rgb = Conv::new(rng, 3, cfg.channels(r), 1);
        let mut down = Vec::new();
        let mut res = r;
        while res > 4 {
            down.push(Conv::new(rng, cfg.channels(res), cfg.channels(res / 2), 3));
            res /= 2;
        }
        let c4 = cfg.channels(4);
        let extra = usize::from(cfg.minibatch_std);
        Self {
            from_rgb,
            down,
            final_conv: Conv::new(rng, c4 + extra, c4, 3),
            fc: Linear::new(rng, c4 * 16, c4, Some(0.0), 1.0),
            out: Linear::new(rng, c4, 1, Some(0.0), 1.0),
            resolution: r,
            minibatch_std: cfg.minibatch_std,
        }
    }

    /// Images `[B, 3, R, R]` -> scores `[B]`.
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let b = x.shape()[0];
        check_shape(
            "discriminator input",
            &[b, 3, self.resolution, self.resolution],
            x.shape(),
        )?;
        let mut h = act(&self.from_rgb.forward(x));
        for c in &self.down {
            h = avgpool2x(&act(&c.forward(&h)));
        }
        if self.minibatch_std {
            h = minibatch_std(&h);
        }
        h = act(&self.final_conv.forward(&h));
        let c = h.shape()[1];
        let h = act(&self.fc.forward(&h.reshape(&[b, c * 16])));
        Ok(self.out.forward(&h).reshape(&[b]))
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.from_rgb.visit(&join(prefix, "from_rgb"), f);
        for (i, c) in self.down.iter_mut().enumerate() {
            c.visit(&join(prefix, &format!("down{i}")), f);
        }
        self.final_conv.visit(&join(prefix, "final_conv"), f);
        self.fc.visit(&join(prefix, "fc"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

/// Mean over the batch of `‖∇ₓ D(x)‖²`. `critic` maps images to per-sample scores.
/// The returned value stays differentiable with respect to the critic's parameters.
pub fn r1_penalty<T: Float>(real: &Var<T>, critic: impl Fn(&Var<T>) -> Result<Var<T>>) -> Result<Var<T>> {
    let x = Var::param(real.value().clone());
    let scores = critic(&x)?;
    let g = grad(&scores.sum(), &[&x], true).remove(0);
    if !g.value().all_finite() {
        return Err(Error::NonFinite("R1 pixel gradient".into()));
    }
    let b = real.shape()[0] as f64;
    Ok(g.square().sum().scale(1.0 / b))
}
