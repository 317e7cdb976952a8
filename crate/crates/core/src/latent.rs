//! Dual latent spaces: sampling, per-row mapping networks and positional encoding.

use autograd::{Float, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{check_shape, Error, Result};
use crate::layers::{join, Linear, Module, LRELU_GAIN, LRELU_SLOPE};
use crate::rng::{normal, stream};

/// Raw codes `z` and `p`, each `[B, n, d]`.
#[derive(Clone, Debug)]
pub struct LatentPair<T: Float> {
    pub z: Tensor<T>,
    pub p: Tensor<T>,
}

/// Mapped codes `z⁺` and `p⁺`, each `[B, n, d]`.
#[derive(Clone, Debug)]
pub struct MappedPair<T: Float> {
    pub z_plus: Tensor<T>,
    pub p_plus: Tensor<T>,
}

impl<T: Float> MappedPair<T> {
    pub fn batch(&self) -> usize {
        self.z_plus.shape()[0]
    }

    /// Sample `i` as a batch of one.
    pub fn select(&self, i: usize) -> Self {
        Self {
            z_plus: self.z_plus.narrow(0, i, 1),
            p_plus: self.p_plus.narrow(0, i, 1),
        }
    }

    pub fn concat(parts: &[MappedPair<T>]) -> Self {
        let z: Vec<&Tensor<T>> = parts.iter().map(|p| &p.z_plus).collect();
        let p: Vec<&Tensor<T>> = parts.iter().map(|p| &p.p_plus).collect();
        Self {
            z_plus: Tensor::concat(&z, 0),
            p_plus: Tensor::concat(&p, 0),
        }
    }
}

/// Independent standard-normal `z` and `p` of shape `[batch, n, d]`.
pub fn sample_latents<T: Float>(seed: u64, batch: usize, cfg: &ModelConfig) -> Result<LatentPair<T>> {
    if batch == 0 {
        return Err(Error::Invalid("batch must be at least 1".into()));
    }
    let shape = [batch, cfg.n, cfg.d];
    let z = normal(&mut stream(seed, "latent.z", 0), &shape);
    let p = normal(&mut stream(seed, "latent.p", 0), &shape);
    Ok(LatentPair { z, p })
}

/// Draws `[batch, n, d]` standard normals from an existing generator.
pub fn sample_code<T: Float>(rng: &mut impl Rng, batch: usize, cfg: &ModelConfig) -> Tensor<T> {
    normal(rng, &[batch, cfg.n, cfg.d])
}

/// One-hot rows: row `i` holds 1 at coordinate `i`, embedded in width `d`.
pub fn positional_encoding<T: Float>(n: usize, d: usize) -> Result<Tensor<T>> {
    if n > d {
        return Err(Error::Invalid(format!(
            "positional encoding needs n <= d (n = {n}, d = {d})"
        )));
    }
    Ok(Tensor::from_fn(&[n, d], |k| {
        if k / d == k % d {
            T::one()
        } else {
            T::zero()
        }
    }))
}

/// Adds the identity positional encoding to every sample of `[B, n, d]` codes.
pub fn add_positional_encoding<T: Float>(codes: &Var<T>) -> Result<Var<T>> {
    let s = codes.shape();
    if s.len() != 3 {
        return Err(Error::Invalid(format!("expected [B, n, d] codes, got {s:?}")));
    }
    let pe = positional_encoding::<T>(s[1], s[2])?;
    Ok(codes.add(&Var::constant(pe.reshape(&[1, s[1], s[2]]))))
}

/// `n` independent per-row perceptrons (block-diagonal mapping).
pub struct Mapper<T: Float> {
    pub rows: Vec<Vec<Linear<T>>>,
    pub d: usize,
}

impl<T: Float> Mapper<T> {
    pub fn new(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let rows = (0..cfg.n)
            .map(|_| {
                (0..cfg.mapper_layers)
                    .map(|_| Linear::new(rng, cfg.d, cfg.d, Some(0.0), cfg.mapper_lr_mul))
                    .collect()
            })
            .collect();
        Self { rows, d: cfg.d }
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn forward_row(&self, i: usize, x: &Var<T>) -> Var<T> {
        let layers = &self.rows[i];
        let mut h = x.clone();
        for (k, l) in layers.iter().enumerate() {
            h = l.forward(&h);
            if k + 1 < layers.len() {
                h = h.leaky_relu(LRELU_SLOPE, LRELU_GAIN);
            }
        }
        h
    }

    /// `[B, n, d]` -> `[B, n, d]`, row `i` through its own network.
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        check_shape("mapper input", &[s[0], self.n(), self.d], s)?;
        let rows: Vec<Var<T>> = (0..self.n()).map(|i| self.forward_row(i, &x.narrow(1, i, 1))).collect();
        Ok(Var::concat(&rows, 1))
    }
}

impl<T: Float> Module<T> for Mapper<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        for (i, row) in self.rows.iter_mut().enumerate() {
            for (k, l) in row.iter_mut().enumerate() {
                l.visit(&join(prefix, &format!("{i}.l{k}")), f);
            }
        }
    }
}

/// Separate mapping networks for the two spaces.
pub struct Mappers<T: Float> {
    pub z: Mapper<T>,
    pub p: Mapper<T>,
}

impl<T: Float> Mappers<T> {
    pub fn new(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        Self {
            z: Mapper::new(rng, cfg),
            p: Mapper::new(rng, cfg),
        }
    }

    pub fn forward(&self, z: &Var<T>, p: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        Ok((self.z.forward(z)?, self.p.forward(p)?))
    }

    /// Inference-only mapping of a latent pair.
    pub fn map_latents(&self, pair: &LatentPair<T>) -> Result<MappedPair<T>> {
        let _g = autograd::no_grad();
        let (z, p) = self.forward(&Var::constant(pair.z.clone()), &Var::constant(pair.p.clone()))?;
        Ok(MappedPair {
            z_plus: z.value().clone(),
            p_plus: p.value().clone(),
        })
    }
}

impl<T: Float> Module<T> for Mappers<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.z.visit(&join(prefix, "z"), f);
        self.p.visit(&join(prefix, "p"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::desk()
    }

    #[test]
    fn sampling_is_deterministic_with_expected_shape() {
        let mut c = cfg();
        c.n = 4;
        c.d = 64;
        let a = sample_latents::<f32>(5, 2, &c).unwrap();
        let b = sample_latents::<f32>(5, 2, &c).unwrap();
        assert_eq!(a.z.shape(), &[2, 4, 64]);
        assert_eq!(a.p.shape(), &[2, 4, 64]);
        assert!(a.z.bit_eq(&b.z) && a.p.bit_eq(&b.p));
        assert!(!a.z.bit_eq(&a.p));
        assert!(sample_latents::<f32>(5, 0, &c).is_err());
    }

    #[test]
    fn positional_encoding_one_hot_rows() {
        let z = Var::constant(Tensor::<f64>::zeros(&[1, 4, 64]));
        let once = add_positional_encoding(&z).unwrap();
        let twice = add_positional_encoding(&once).unwrap();
        for i in 0..4 {
            for j in 0..64 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(once.value().data()[i * 64 + j], want);
                assert_eq!(twice.value().data()[i * 64 + j], 2.0 * want);
            }
        }
        let big = positional_encoding::<f64>(16, 512).unwrap();
        let eye = Tensor::<f64>::eye(16);
        assert!(big.narrow(1, 0, 16).bit_eq(&eye));
        assert!(big.narrow(1, 16, 496).data().iter().all(|&v| v == 0.0));
        assert!(positional_encoding::<f64>(5, 4).is_err());
    }

    #[test]
    fn identity_mapper_passes_codes_through() {
        let mut c = cfg();
        c.mapper_layers = 1;
        let mut m = Mappers::<f64>::new(&mut stream(1, "init", 0), &c);
        let eye = Tensor::eye(c.d);
        for mapper in [&mut m.z, &mut m.p] {
            for row in &mut mapper.rows {
                row[0].set_effective_weight(&eye);
            }
        }
        let pair = sample_latents::<f64>(9, 3, &c).unwrap();
        let mapped = m.map_latents(&pair).unwrap();
        assert!(mapped.z_plus.max_abs_diff(&pair.z) < 1e-12);
        assert!(mapped.p_plus.max_abs_diff(&pair.p) < 1e-12);
    }

    #[test]
    fn perturbing_one_row_changes_only_that_row() {
        let c = cfg();
        let m = Mappers::<f32>::new(&mut stream(1, "init", 0), &c);
        let pair = sample_latents::<f32>(2, 2, &c).unwrap();
        let base = m.map_latents(&pair).unwrap();
        for j in 0..c.n {
            let mut z = pair.z.to_vec();
            for b in 0..2 {
                for k in 0..c.d {
                    z[(b * c.n + j) * c.d + k] += 0.5;
                }
            }
            let pert = LatentPair {
                z: Tensor::new(pair.z.shape(), z),
                p: pair.p.clone(),
            };
            let out = m.map_latents(&pert).unwrap();
            for i in 0..c.n {
                let a = base.z_plus.narrow(1, i, 1);
                let b = out.z_plus.narrow(1, i, 1);
                assert_eq!(a.bit_eq(&b), i != j, "row {i} after perturbing row {j}");
            }
            assert!(out.p_plus.bit_eq(&base.p_plus));
        }
    }

    #[test]
    fn mapping_is_batch_equivariant() {
        let c = cfg();
        let m = Mappers::<f32>::new(&mut stream(1, "init", 0), &c);
        let a = sample_latents::<f32>(2, 2, &c).unwrap();
        let b = sample_latents::<f32>(3, 3, &c).unwrap();
        let both = LatentPair {
            z: Tensor::concat(&[&a.z, &b.z], 0),
            p: Tensor::concat(&[&a.p, &b.p], 0),
        };
        let joint = m.map_latents(&both).unwrap();
        let sep = MappedPair::concat(&[m.map_latents(&a).unwrap(), m.map_latents(&b).unwrap()]);
        assert!(joint.z_plus.max_abs_diff(&sep.z_plus) < 1e-6);
        assert!(joint.p_plus.max_abs_diff(&sep.p_plus) < 1e-6);
    }
}
