//! Synthesis network: F₀ is a pure reshape of p⁺; modulated convolutions
//! driven by rows of w grow it to the output resolution.

use autograd::{Float, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{check_shape, Error, Result};
use crate::layers::{join, upsample2x, ModConv, Module};

/// `[B, n, d]` codes reshaped row-major into `[B, n·d/16, 4, 4]`.
pub fn reshape_input<T: Float>(p_plus: &Var<T>) -> Result<Var<T>> {
    let s = p_plus.shape();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("expected [B, n, d] codes, got {s:?}")));
    }
    let (b, nd) = (s[0], s[1] * s[2]);
    if nd % 16 != 0 {
        return Err(Error::Invalid(format!("n*d = {nd} is not divisible by 16")));
    }
    Ok(p_plus.reshape(&[b, nd / 16, 4, 4]))
}

/// One resolution level of the synthesis network.
pub struct SynthesisBlock<T: Float> {
    pub res: usize,
    /// Upsampling conv (absent at 4×4).
    pub conv0: Option<ModConv<T>>,
    pub conv1: ModConv<T>,
    pub to_rgb: ModConv<T>,
}

pub struct Generator<T: Float> {
    pub blocks: Vec<SynthesisBlock<T>>,
    pub n: usize,
    pub d: usize,
    pub resolution: usize,
}

impl<T: Float> Generator<T> {
    pub fn new(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d;
        let mut blocks = Vec::new();
        let c4 = cfg.channels(4);
        blocks.push(SynthesisBlock {
            res: 4,
            conv0: None,
            conv1: ModConv::new(rng, d, cfg.input_channels(), c4, 3, true, true, cfg.eps),
            to_rgb: ModConv::new(rng, d, c4, 3, 1, false, false, cfg.eps),
        });
        let mut res = 8;
        let mut prev = c4;
        while res <= cfg.resolution {
            let c = cfg.channels(res);
            blocks.push(SynthesisBlock {
                res,
                conv0: Some(ModConv::new(rng, d, prev, c, 3, true, true, cfg.eps)),
                conv1: ModConv::new(rng, d, c, c, 3, true, true, cfg.eps),
                to_rgb: ModConv::new(rng, d, c, 3, 1, false, false, cfg.eps),
            });
            prev = c;
            res *= 2;
        }
        Self {
            blocks,
            n: cfg.n,
            d,
            resolution: cfg.resolution,
        }
    }

    /// Number of modulated conv layers (excluding to-color layers).
    pub fn conv_count(&self) -> usize {
        1 + 2 * (self.blocks.len() - 1)
    }

    /// Style row consumed by conv layer `k`.
    pub fn style_row(&self, k: usize) -> usize {
        k.min(self.n - 1)
    }

    /// `w` is `[B, n, d]`; returns images `[B, 3, R, R]`.
    pub fn forward(&self, w: &Var<T>, p_plus: &Var<T>) -> Result<Var<T>> {
        let s = w.shape();
        check_shape("w", &[s[0], self.n, self.d], s)?;
        check_shape("p_plus", s, p_plus.shape())?;
        let b = s[0];
        let rows: Vec<Var<T>> = (0..self.n).map(|i| w.narrow(1, i, 1).reshape(&[b, self.d])).collect();
        let row = |k: usize| &rows[self.style_row(k)];

        let mut x = reshape_input(p_plus)?;
        let mut rgb: Option<Var<T>> = None;
        let mut k = 0;
        for blk in &self.blocks {
            if let Some(c0) = &blk.conv0 {
                x = c0.forward(&upsample2x(&x), row(k));
                k += 1;
            }
            x = blk.conv1.forward(&x, row(k));
            k += 1;
            let y = blk.to_rgb.forward(&x, row(k));
            rgb = Some(match rgb {
                None => y,
                Some(r) => upsample2x(&r).add(&y),
            });
        }
        Ok(rgb.expect("at least one block"))
    }
}

impl<T: Float> Module<T> for Generator<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            let p = join(prefix, &format!("block{i}"));
            if let Some(c0) = &mut blk.conv0 {
                c0.visit(&join(&p, "conv0"), f);
            }
            blk.conv1.visit(&join(&p, "conv1"), f);
            blk.to_rgb.visit(&join(&p, "to_rgb"), f);
        }
    }
}
