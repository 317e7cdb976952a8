//! The full generator stack: mappers, interaction and synthesis.

use autograd::{no_grad, Float, Tensor, Var};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, Variant};
use crate::error::{check_shape, Result};
use crate::generator::{reshape_input, Generator};
use crate::interaction::Interaction;
use crate::latent::{sample_code, sample_latents, LatentPair, MappedPair, Mappers};
use crate::layers::{export, import, Module};
use crate::rng::stream;

pub struct GeneratorStack<T: Float> {
    pub cfg: ModelConfig,
    pub mappers: Mappers<T>,
    pub interaction: Interaction<T>,
    pub generator: Generator<T>,
}

/// Output of a differentiable forward pass.
pub struct Forward<T: Float> {
    pub images: Var<T>,
    pub w: Var<T>,
    pub z_plus: Var<T>,
    pub p_plus: Var<T>,
}

impl<T: Float> GeneratorStack<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let seed = cfg.seed;
        Self {
            cfg: cfg.clone(),
            mappers: Mappers::new(&mut stream(seed, "init.mapper", 0), cfg),
            interaction: Interaction::new(&mut stream(seed, "init.interaction", 0), cfg),
            generator: Generator::new(&mut stream(seed, "init.generator", 0), cfg),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut s = Self::new(&ckpt.config);
        s.load(ckpt)?;
        Ok(s)
    }

    /// Loads parameters, failing on missing tensors or shape mismatches.
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let (c, o) = (&self.cfg, &ckpt.config);
        check_shape("latent code [n, d]", &[c.n, c.d], &[o.n, o.d])?;
        import(self, "", ckpt)
    }

    pub fn export(&mut self) -> Vec<(String, Tensor<f32>)> {
        export(self, "")
    }

    /// Seeded latent pair; the single-space variant ties `p` to `z`.
    pub fn sample_latents(&self, seed: u64, batch: usize) -> Result<LatentPair<T>> {
        let mut pair = sample_latents(seed, batch, &self.cfg)?;
        if self.cfg.variant == Variant::SingleSpace {
            pair.p = pair.z.clone();
        }
        Ok(pair)
    }

    /// Latent pair drawn from an existing generator.
    pub fn draw_latents(&self, rng: &mut impl Rng, batch: usize) -> LatentPair<T> {
        let z = sample_code(rng, batch, &self.cfg);
        let p = if self.cfg.variant == Variant::SingleSpace {
            z.clone()
        } else {
            sample_code(rng, batch, &self.cfg)
        };
        LatentPair { z, p }
    }

    pub fn style(&self, z_plus: &Var<T>, p_plus: &Var<T>) -> Result<Var<T>> {
        self.interaction.forward(z_plus, p_plus)
    }

    pub fn synthesize(&self, w: &Var<T>, p_plus: &Var<T>) -> Result<Var<T>> {
        self.generator.forward(w, p_plus)
    }

    /// Differentiable pass from mapped codes.
    pub fn forward_mapped(&self, z_plus: &Var<T>, p_plus: &Var<T>) -> Result<Forward<T>> {
        let w = self.style(z_plus, p_plus)?;
        let images = self.synthesize(&w, p_plus)?;
        Ok(Forward {
            images,
            w,
            z_plus: z_plus.clone(),
            p_plus: p_plus.clone(),
        })
    }

    /// Differentiable pass from raw codes.
    pub fn forward(&self, z: &Var<T>, p: &Var<T>) -> Result<Forward<T>> {
        let (zp, pp) = self.mappers.forward(z, p)?;
        self.forward_mapped(&zp, &pp)
    }

    pub fn map_latents(&self, pair: &LatentPair<T>) -> Result<MappedPair<T>> {
        self.mappers.map_latents(pair)
    }

    /// Images for mapped codes, evaluated without building a graph.
    pub fn render(&self, mapped: &MappedPair<T>) -> Result<Tensor<T>> {
        let _g = no_grad();
        let f = self.forward_mapped(
            &Var::constant(mapped.z_plus.clone()),
            &Var::constant(mapped.p_plus.clone()),
        )?;
        Ok(f.images.value().clone())
    }

    /// Renders in chunks to bound memory.
    pub fn render_chunked(&self, mapped: &MappedPair<T>, chunk: usize) -> Result<Tensor<T>> {
        let b = mapped.batch();
        let mut parts = Vec::new();
        let mut i = 0;
        while i < b {
            let len = chunk.min(b - i);
            let m = MappedPair {
                z_plus: mapped.z_plus.narrow(0, i, len),
                p_plus: mapped.p_plus.narrow(0, i, len),
            };
            parts.push(self.render(&m)?);
            i += len;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::concat(&refs, 0))
    }

    pub fn generate(&self, pair: &LatentPair<T>) -> Result<Tensor<T>> {
        let mapped = self.map_latents(pair)?;
        self.render(&mapped)
    }

    /// Initial feature map for mapped `p⁺`.
    pub fn f0(&self, p_plus: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(reshape_input(&Var::constant(p_plus.clone()))?.value().clone())
    }

    /// Style code `w` for mapped codes.
    pub fn style_code(&self, mapped: &MappedPair<T>) -> Result<Tensor<T>> {
        let _g = no_grad();
        Ok(self
            .style(
                &Var::constant(mapped.z_plus.clone()),
                &Var::constant(mapped.p_plus.clone()),
            )?
            .value()
            .clone())
    }
}

impl<T: Float> Module<T> for GeneratorStack<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut autograd::Var<T>)) {
        use crate::layers::join;
        self.mappers.visit(&join(prefix, "mapper"), f);
        self.interaction.visit(&join(prefix, "interaction"), f);
        self.generator.visit(&join(prefix, "gen"), f);
    }
}
