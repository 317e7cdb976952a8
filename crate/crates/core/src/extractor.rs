//! Small convolutional feature network trained to regress the synthetic
//! factors. Its penultimate layer supplies identity/FID-proxy features and
//! its channel-normalized intermediate maps supply a perceptual distance.

use autograd::{grad, no_grad, Adam, Float, Tensor, Var};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{avgpool2x, export, import, join, named_params, Conv, Linear, Module, LRELU_GAIN, LRELU_SLOPE};
use crate::rng::stream;

pub const FEATURE_DIM: usize = 64;
pub const TARGETS: usize = 5;
const WIDTHS: [usize; 3] = [16, 32, 64];

pub struct FeatureExtractor<T: Float> {
    pub convs: Vec<Conv<T>>,
    pub fc: Linear<T>,
    pub head: Linear<T>,
    pub resolution: usize,
}

/// Intermediate activations of one pass.
pub struct Features<T: Float> {
    /// Post-activation maps, one per level.
    pub maps: Vec<Var<T>>,
    /// Penultimate features `[B, FEATURE_DIM]`.
    pub embedding: Var<T>,
    /// Factor predictions `[B, TARGETS]`.
    pub prediction: Var<T>,
}

fn act<T: Float>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(LRELU_SLOPE, LRELU_GAIN)
}

/// Unit-normalizes every spatial position across channels.
fn channel_normalize<T: Float>(x: &Var<T>) -> Var<T> {
    let s = x.shape();
    let norm = x.square().sum_to(&[s[0], 1, s[2], s[3]]).add_scalar(1e-10).rsqrt();
    x.mul(&norm)
}

impl<T: Float> FeatureExtractor<T> {
    pub fn new(rng: &mut impl Rng, resolution: usize) -> Self {
        let mut convs = Vec::new();
        let mut cin = 3;
        for &w in &WIDTHS {
            convs.push(Conv::new(rng, cin, w, 3));
            cin = w;
        }
        let side = resolution >> WIDTHS.len();
        Self {
            convs,
            fc: Linear::new(rng, cin * side * side, FEATURE_DIM, Some(0.0), 1.0),
            head: Linear::new(rng, FEATURE_DIM, TARGETS, Some(0.0), 1.0),
            resolution,
        }
    }

    pub fn features(&self, images: &Var<T>) -> Features<T> {
        let b = images.shape()[0];
        let mut h = images.clone();
        let mut maps = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = act(&c.forward(&h));
            maps.push(h.clone());
            h = avgpool2x(&h);
        }
        let flat: usize = h.shape()[1..].iter().product();
        let embedding = act(&self.fc.forward(&h.reshape(&[b, flat])));
        let prediction = self.head.forward(&embedding);
        Features {
            maps,
            embedding,
            prediction,
        }
    }

    /// Per-sample perceptual distance: mean over levels and positions of the
    /// squared difference of channel-normalized activations.
    pub fn perceptual_distance(&self, a: &Features<T>, b: &Features<T>) -> Var<T> {
        let n = a.maps[0].shape()[0];
        let mut total: Option<Var<T>> = None;
        for (fa, fb) in a.maps.iter().zip(&b.maps) {
            let s = fa.shape();
            let d = channel_normalize(fa)
                .sub(&channel_normalize(fb))
                .square()
                .sum_to(&[n, 1, 1, 1])
                .reshape(&[n])
                .scale(1.0 / (s[2] * s[3]) as f64);
            total = Some(match total {
                None => d,
                Some(t) => t.add(&d),
            });
        }
        total.expect("at least one level").scale(1.0 / a.maps.len() as f64)
    }

    /// Penultimate features of a batch, without a graph.
    pub fn embed(&self, images: &Tensor<T>) -> Tensor<T> {
        let _g = no_grad();
        self.features(&Var::constant(images.clone())).embedding.value().clone()
    }

    /// Perceptual distance between two image batches, without a graph.
    pub fn distance(&self, a: &Tensor<T>, b: &Tensor<T>) -> Vec<f64> {
        let _g = no_grad();
        let fa = self.features(&Var::constant(a.clone()));
        let fb = self.features(&Var::constant(b.clone()));
        self.perceptual_distance(&fa, &fb).value().to_f64_vec()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut e = Self::new(&mut stream(0, "init.extractor", 0), ckpt.config.resolution);
        import(&mut e, "extractor", ckpt)?;
        Ok(e)
    }

    pub fn export(&mut self) -> Vec<(String, Tensor<f32>)> {
        export(self, "extractor")
    }
}

impl<T: Float> Module<T> for FeatureExtractor<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.fc.visit(&join(prefix, "fc"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

/// Fits the extractor to the dataset's factors; returns the final training loss.
pub fn train_extractor(ds: &Dataset, steps: u64, batch: usize, seed: u64) -> Result<(FeatureExtractor<f32>, f64)> {
    let mut ex = FeatureExtractor::<f32>::new(&mut stream(seed, "init.extractor", 0), ds.resolution);
    let shapes: Vec<Vec<usize>> = named_params(&mut ex, "")
        .iter()
        .map(|(_, v)| v.shape().to_vec())
        .collect();
    let mut opt = Adam::new(&shapes, 2e-3, 0.9, 0.999, 1e-8);
    let mut last = f64::NAN;
    for step in 0..steps {
        let mut rng = stream(seed, "extractor.batch", step);
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..ds.len())).collect();
        let x = Var::constant(ds.batch(&idx));
        let target: Vec<f64> = idx.iter().flat_map(|&i| ds.factors[i].expected_scores()).collect();
        let target = Var::constant(Tensor::from_f64(&[batch, TARGETS], &target));
        let loss = ex.features(&x).prediction.sub(&target).square().mean();
        last = loss.item() as f64;
        if !last.is_finite() {
            return Err(Error::NonFinite(format!("extractor loss at step {step}")));
        }
        let params = named_params(&mut ex, "");
        let vars: Vec<&Var<f32>> = params.iter().map(|(_, v)| v).collect();
        let grads = grad(&loss, &vars, false);
        let pv: Vec<&Tensor<f32>> = vars.iter().map(|v| v.value()).collect();
        let gv: Vec<&Tensor<f32>> = grads.iter().map(|g| g.value()).collect();
        let new = opt.update(&pv, &gv);
        crate::layers::assign(&mut ex, new);
    }
    crate::layers::set_trainable(&mut ex, false);
    Ok((ex, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SyntheticSpec};

    #[test]
    fn identical_images_have_zero_distance() {
        let ex = FeatureExtractor::<f64>::new(&mut stream(0, "init", 0), 32);
        let ds = generate_dataset(&SyntheticSpec::default(), 3, 0).unwrap();
        let a = ds.batch(&[0, 1, 2]).cast::<f64>();
        assert!(ex.distance(&a, &a).iter().all(|&d| d == 0.0));
        let b = ds.batch(&[1, 2, 0]).cast::<f64>();
        assert!(ex.distance(&a, &b).iter().all(|&d| d > 0.0));
        assert_eq!(ex.embed(&a).shape(), &[3, FEATURE_DIM]);
    }

    #[test]
    fn short_training_reduces_loss() {
        let ds = generate_dataset(&SyntheticSpec::default(), 64, 1).unwrap();
        let (_, early) = train_extractor(&ds, 2, 16, 0).unwrap();
        let (_, late) = train_extractor(&ds, 60, 16, 0).unwrap();
        assert!(late < early, "{late} vs {early}");
    }
}
