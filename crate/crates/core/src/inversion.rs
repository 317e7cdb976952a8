//! Pyramid encoder mapping images to `(z⁺, p⁺)`, its reconstruction loss and
//! training against a frozen generator stack.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use autograd::{grad, no_grad, Adam, Float, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{digest, Checkpoint};
use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::editing::{edit, SemanticDirection};
use crate::error::{check_shape, Error, Result};
use crate::extractor::{FeatureExtractor, Features};
use crate::latent::MappedPair;
use crate::layers::{
    assign, avgpool2x, export, import, join, named_params, upsample2x, Conv, Linear, Module, LRELU_GAIN, LRELU_SLOPE,
};
use crate::model::GeneratorStack;
use crate::rng::stream;

const WIDTH: usize = 64;
/// Sample count used to estimate the code means the encoder predicts offsets from.
const MEAN_SAMPLES: usize = 4096;

fn act<T: Float>(x: &Var<T>) -> Var<T> {
    x.leaky_relu(LRELU_SLOPE, LRELU_GAIN)
}

/// Pyramid level a `z⁺` row is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Middle,
    Fine,
}

/// Coarse rows `[0, n/3)`, middle `[n/3, 2n/3)`, fine the rest.
pub fn row_level(row: usize, n: usize) -> Level {
    if row < n / 3 {
        Level::Coarse
    } else if row < 2 * n / 3 {
        Level::Middle
    } else {
        Level::Fine
    }
}

/// Maps a feature level to one `d`-vector: pool to 4×4, flatten, two dense layers.
pub struct RowHead<T: Float> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Float> RowHead<T> {
    fn new(rng: &mut impl Rng, side: usize, d: usize) -> Self {
        Self {
            hidden: Linear::new(rng, WIDTH * side * side, 2 * d, Some(0.0), 1.0),
            out: Linear::new(rng, 2 * d, d, Some(0.0), 1.0),
        }
    }

    fn forward(&self, x: &Var<T>) -> Var<T> {
        let mut h = x.clone();
        while h.shape()[2] > 4 {
            h = avgpool2x(&h);
        }
        let b = h.shape()[0];
        let flat: usize = h.shape()[1..].iter().product();
        self.out.forward(&act(&self.hidden.forward(&h.reshape(&[b, flat]))))
    }
}

impl<T: Float> Module<T> for RowHead<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
}

/// Feature maps of one pass, from fine to coarse.
pub struct Pyramid<T: Float> {
    pub fine: Var<T>,
    pub middle: Var<T>,
    pub coarse: Var<T>,
}

pub struct Encoder<T: Float> {
    pub stem: Conv<T>,
    /// Backbone stages, each conv + activation + 2× pooling.
    pub stages: Vec<Conv<T>>,
    pub lateral_middle: Conv<T>,
    pub lateral_fine: Conv<T>,
    pub rows: Vec<RowHead<T>>,
    pub p_head: RowHead<T>,
    /// `p⁺` comes out as `n·d` values through this projection of the p head.
    pub p_out: Linear<T>,
    pub z_mean: Var<T>,
    pub p_mean: Var<T>,
    pub n: usize,
    pub d: usize,
    pub resolution: usize,
}

impl<T: Float> Encoder<T> {
    /// Fresh encoder; the code means start at zero until [`Encoder::set_means`].
    pub fn new(rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let r = cfg.resolution;
        let stem = Conv::new(rng, 3, WIDTH, 3);
        // Stages stop at 4×4; the last three produce fine/middle/coarse maps.
        let mut stages = Vec::new();
        let mut res = r;
        while res > 4 {
            stages.push(Conv::new(rng, WIDTH, WIDTH, 3));
            res /= 2;
        }
        let (n, d) = (cfg.n, cfg.d);
        let rows = (0..n).map(|_| RowHead::new(rng, 4, d)).collect();
        let p_head = RowHead::new(rng, 4, 2 * d);
        let p_out = Linear::new(rng, 2 * d, n * d, Some(0.0), 1.0);
        Self {
            stem,
            stages,
            lateral_middle: Conv::new(rng, WIDTH, WIDTH, 1),
            lateral_fine: Conv::new(rng, WIDTH, WIDTH, 1),
            rows,
            p_head,
            p_out,
            z_mean: Var::constant(Tensor::zeros(&[n, d])),
            p_mean: Var::constant(Tensor::zeros(&[n, d])),
            n,
            d,
            resolution: r,
        }
    }

    /// Centers the outputs on the average mapped codes of `stack`.
    pub fn set_means(&mut self, stack: &GeneratorStack<T>, seed: u64) -> Result<()> {
        let pair = stack.draw_latents(&mut stream(seed, "encoder.mean", 0), MEAN_SAMPLES);
        let m = stack.map_latents(&pair)?;
        let (n, d) = (self.n, self.d);
        let mean = |t: &Tensor<T>| {
            let mut acc = vec![0.0f64; n * d];
            for row in t.data().chunks(n * d) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.to_f64().unwrap();
                }
            }
            let s = 1.0 / (t.shape()[0] as f64);
            Tensor::from_f64(&[n, d], &acc.iter().map(|a| a * s).collect::<Vec<_>>())
        };
        self.z_mean = Var::constant(mean(&m.z_plus));
        self.p_mean = Var::constant(mean(&m.p_plus));
        Ok(())
    }

    pub fn pyramid(&self, images: &Var<T>) -> Result<Pyramid<T>> {
        let b = images.shape()[0];
        check_shape(
            "encoder input",
            &[b, 3, self.resolution, self.resolution],
            images.shape(),
        )?;
        let mut h = act(&self.stem.forward(images));
        let mut levels = Vec::new();
        for s in &self.stages {
            h = avgpool2x(&act(&s.forward(&h)));
            levels.push(h.clone());
        }
        // Below 32 px the pyramid has fewer than three distinct levels; the
        // missing ones are resampled from the nearest stage.
        let k = levels.len();
        if k == 0 {
            return Err(Error::Invalid("encoder input must be larger than 4x4".into()));
        }
        let coarse = levels[k - 1].clone();
        let level = |back: usize| -> Var<T> {
            let mut h = levels[k.saturating_sub(1 + back)].clone();
            let side = coarse.shape()[2] << back;
            while h.shape()[2] > side {
                h = avgpool2x(&h);
            }
            while h.shape()[2] < side {
                h = upsample2x(&h);
            }
            h
        };
        let middle = upsample2x(&coarse).add(&self.lateral_middle.forward(&level(1)));
        let fine = upsample2x(&middle).add(&self.lateral_fine.forward(&level(2)));
        Ok(Pyramid { fine, middle, coarse })
    }

    /// Codes for a batch of images, differentiable w.r.t. the encoder.
    pub fn encode_var(&self, images: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let pyr = self.pyramid(images)?;
        let b = images.shape()[0];
        let (n, d) = (self.n, self.d);
        let rows: Vec<Var<T>> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, head)| {
                let src = match row_level(i, n) {
                    Level::Coarse => &pyr.coarse,
                    Level::Middle => &pyr.middle,
                    Level::Fine => &pyr.fine,
                };
                head.forward(src).reshape(&[b, 1, d])
            })
            .collect();
        let z = Var::concat(&rows, 1).add(&self.z_mean);
        // p⁺ reads the deepest level only
        let p = self
            .p_out
            .forward(&act(&self.p_head.forward(&pyr.coarse)))
            .reshape(&[b, n, d])
            .add(&self.p_mean);
        Ok((z, p))
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<MappedPair<T>> {
        let _g = no_grad();
        let (z, p) = self.encode_var(&Var::constant(images.clone()))?;
        Ok(MappedPair {
            z_plus: z.value().clone(),
            p_plus: p.value().clone(),
        })
    }
}

impl<T: Float> Module<T> for Encoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit(&join(prefix, &format!("stage{i}")), f);
        }
        self.lateral_middle.visit(&join(prefix, "lateral_middle"), f);
        self.lateral_fine.visit(&join(prefix, "lateral_fine"), f);
        for (i, r) in self.rows.iter_mut().enumerate() {
            r.visit(&join(prefix, &format!("row{i}")), f);
        }
        self.p_head.visit(&join(prefix, "p_head"), f);
        self.p_out.visit(&join(prefix, "p_out"), f);
        f(&join(prefix, "z_mean"), &mut self.z_mean);
        f(&join(prefix, "p_mean"), &mut self.p_mean);
    }
}

/// Loss terms for one batch.
pub struct InversionLoss<T: Float> {
    pub total: Var<T>,
    pub l2: Var<T>,
    pub perceptual: Var<T>,
    pub identity: Var<T>,
}

/// Weights of the pixel, perceptual and identity terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l2: f64,
    pub perceptual: f64,
    pub identity: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            l2: cfg.inv_weight_l2,
            perceptual: cfg.inv_weight_lpips,
            identity: cfg.inv_weight_id,
        }
    }
}

/// Mean over the batch of `1 − cos(a_b, b_b)` for `[B, k]` features.
pub fn cosine_distance<T: Float>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let dot = a.mul(b).sum_axis(1);
    let na = a.square().sum_axis(1).add_scalar(1e-12).sqrt();
    let nb = b.square().sum_axis(1).add_scalar(1e-12).sqrt();
    dot.div(&na.mul(&nb)).scale(-1.0).add_scalar(1.0).mean()
}

/// `w_l2·MSE + w_p·perceptual + w_id·(1 − cos(identity features))`.
pub fn inversion_loss<T: Float>(
    target: &Features<T>,
    target_images: &Var<T>,
    recon_images: &Var<T>,
    extractor: &FeatureExtractor<T>,
    weights: LossWeights,
) -> Result<InversionLoss<T>> {
    check_shape("reconstruction", target_images.shape(), recon_images.shape())?;
    let recon = extractor.features(recon_images);
    if !recon.embedding.value().all_finite() {
        return Err(Error::NonFinite("reconstruction features".into()));
    }
    let l2 = recon_images.sub(target_images).square().mean();
    let perceptual = extractor.perceptual_distance(target, &recon).mean();
    let identity = cosine_distance(&target.embedding, &recon.embedding);
    let total = l2
        .scale(weights.l2)
        .add(&perceptual.scale(weights.perceptual))
        .add(&identity.scale(weights.identity));
    Ok(InversionLoss {
        total,
        l2,
        perceptual,
        identity,
    })
}

/// Encoder plus the frozen pieces it is trained against.
pub struct InversionState {
    pub step: u64,
    pub encoder: Encoder<f32>,
    pub opt: Adam<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InversionRecord {
    pub step: u64,
    pub loss: f64,
    pub l2: f64,
    pub perceptual: f64,
    pub identity: f64,
}

fn trainable_shapes(e: &mut Encoder<f32>) -> Vec<Vec<usize>> {
    named_params(e, "")
        .iter()
        .filter(|(_, v)| v.requires_grad())
        .map(|(_, v)| v.shape().to_vec())
        .collect()
}

impl InversionState {
    pub fn new(cfg: &ModelConfig, stack: &GeneratorStack<f32>) -> Result<Self> {
        let mut encoder = Encoder::new(&mut stream(cfg.seed, "init.encoder", 0), cfg);
        encoder.set_means(stack, cfg.seed)?;
        let opt = Adam::new(&trainable_shapes(&mut encoder), cfg.inv_lr, 0.9, 0.999, 1e-8);
        Ok(Self { step: 0, encoder, opt })
    }

    pub fn to_checkpoint(&mut self, cfg: &ModelConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(self.step, cfg.clone());
        ck.meta.insert("kind".into(), "encoder".into());
        ck.extend(export(&mut self.encoder, "encoder"));
        for (i, (m, v)) in self.opt.m.iter().zip(&self.opt.v).enumerate() {
            ck.push(format!("opt_e.m.{i}"), m.clone());
            ck.push(format!("opt_e.v.{i}"), v.clone());
        }
        ck.scalars.insert("opt_e.step".into(), self.opt.step as f64);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = &ck.config;
        let encoder = load_encoder(ck)?;
        let mut s = Self {
            step: ck.step,
            opt: Adam::new(&[], cfg.inv_lr, 0.9, 0.999, 1e-8),
            encoder,
        };
        let shapes = trainable_shapes(&mut s.encoder);
        s.opt = Adam::new(&shapes, cfg.inv_lr, 0.9, 0.999, 1e-8);
        for i in 0..shapes.len() {
            for (kind, slot) in [("m", &mut s.opt.m[i]), ("v", &mut s.opt.v[i])] {
                let name = format!("opt_e.{kind}.{i}");
                let t = ck.get(&name).ok_or_else(|| Error::Checkpoint {
                    path: PathBuf::new(),
                    msg: format!("missing optimizer state `{name}`"),
                })?;
                check_shape(&name, &shapes[i], t.shape())?;
                *slot = t.clone();
            }
        }
        s.opt.step = ck.scalars.get("opt_e.step").copied().unwrap_or(0.0) as u64;
        Ok(s)
    }

    /// One update on a batch mixing dataset images and fresh generated images.
    pub fn step_once(
        &mut self,
        cfg: &ModelConfig,
        stack: &GeneratorStack<f32>,
        extractor: &FeatureExtractor<f32>,
        ds: Option<&Dataset>,
    ) -> Result<InversionRecord> {
        let step = self.step + 1;
        let b = cfg.inv_batch_size;
        let mut rng = stream(cfg.seed, "inversion", step);
        let n_real = match ds {
            Some(_) => ((b as f64 * cfg.inv_real_fraction).round() as usize).min(b),
            None => 0,
        };
        let mut parts = Vec::new();
        if let Some(ds) = ds.filter(|_| n_real > 0) {
            parts.push(ds.random_batch(&mut rng, n_real));
        }
        if b > n_real {
            parts.push(stack.generate(&stack.draw_latents(&mut rng, b - n_real))?);
        }
        let target = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0);
        let target_v = Var::constant(target);
        let target_f = {
            let _g = no_grad();
            let f = extractor.features(&target_v);
            Features {
                maps: f.maps.iter().map(|m| Var::constant(m.value().clone())).collect(),
                embedding: Var::constant(f.embedding.value().clone()),
                prediction: Var::constant(f.prediction.value().clone()),
            }
        };
        let (z, p) = self.encoder.encode_var(&target_v)?;
        let recon = stack.forward_mapped(&z, &p)?.images;
        let loss = inversion_loss(&target_f, &target_v, &recon, extractor, LossWeights::from_config(cfg))?;
        let rec = InversionRecord {
            step,
            loss: loss.total.item() as f64,
            l2: loss.l2.item() as f64,
            perceptual: loss.perceptual.item() as f64,
            identity: loss.identity.item() as f64,
        };
        if !rec.loss.is_finite() {
            return Err(Error::NonFinite(format!("inversion loss at step {step}")));
        }
        let params = named_params(&mut self.encoder, "");
        let vars: Vec<&Var<f32>> = params.iter().map(|(_, v)| v).filter(|v| v.requires_grad()).collect();
        let grads = grad(&loss.total, &vars, false);
        drop(loss);
        let new = self.opt.update(
            &vars.iter().map(|v| v.value()).collect::<Vec<_>>(),
            &grads.iter().map(|g| g.value()).collect::<Vec<_>>(),
        );
        // constants (the code means) keep their values
        let mut it = new.into_iter();
        let all: Vec<Tensor<f32>> = params
            .iter()
            .map(|(_, v)| {
                if v.requires_grad() {
                    it.next().unwrap()
                } else {
                    v.value().clone()
                }
            })
            .collect();
        drop(vars);
        drop(params);
        assign(&mut self.encoder, all);
        self.step = step;
        Ok(rec)
    }
}

/// Digest of the generator stack's parameters in visit order.
pub fn generator_digest(stack: &mut GeneratorStack<f32>) -> u64 {
    let params = stack.export();
    digest(params.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Encoder from a checkpoint holding `encoder.*` tensors.
pub fn load_encoder(ck: &Checkpoint) -> Result<Encoder<f32>> {
    let mut e = Encoder::new(&mut stream(0, "init.encoder", 0), &ck.config);
    import(&mut e, "encoder", ck)?;
    Ok(e)
}

pub fn encoder_dir(out: &Path, step: u64) -> PathBuf {
    out.join(format!("enc-{step:06}"))
}

/// Trains an encoder against the frozen stack in `gan`; writes `enc-<step>`
/// directories and `log.jsonl` under `out`.
pub fn train_inversion(
    gan: &Checkpoint,
    ds: Option<&Dataset>,
    out: &Path,
    resume: Option<&Path>,
    steps: Option<u64>,
) -> Result<(InversionState, Vec<InversionRecord>)> {
    let cfg = gan.config.clone();
    let mut stack = GeneratorStack::<f32>::from_checkpoint(gan)?;
    let extractor = FeatureExtractor::<f32>::from_checkpoint(gan)?;
    let steps = steps.unwrap_or(cfg.inv_steps);
    let frozen = generator_digest(&mut stack);
    let save = |state: &mut InversionState, step: u64| -> Result<()> {
        let mut ck = state.to_checkpoint(&cfg);
        ck.meta.insert("generator_digest".into(), format!("{frozen:016x}"));
        ck.save(encoder_dir(out, step))
    };
    fs::create_dir_all(out)?;
    let mut state = match resume {
        Some(p) => InversionState::from_checkpoint(&Checkpoint::load(p)?)?,
        None => {
            let mut s = InversionState::new(&cfg, &stack)?;
            save(&mut s, 0)?;
            s
        }
    };
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("log.jsonl"))?;
    let mut records = Vec::new();
    while state.step < steps {
        let rec = state.step_once(&cfg, &stack, &extractor, ds)?;
        let s = rec.step;
        if cfg.log_interval > 0 && (s % cfg.log_interval == 0 || s == steps || s == 1) {
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            log.flush()?;
            log::info!("encoder step {s}: loss {:.5} l2 {:.5}", rec.loss, rec.l2);
            records.push(rec);
        }
        if (cfg.checkpoint_interval > 0 && s % cfg.checkpoint_interval == 0) || s == steps {
            save(&mut state, s)?;
        }
    }
    if generator_digest(&mut stack) != frozen {
        return Err(Error::Invalid(
            "generator parameters changed during encoder training".into(),
        ));
    }
    Ok((state, records))
}

/// Encodes `images`, edits the codes and renders the result.
pub fn invert_and_edit(
    stack: &GeneratorStack<f32>,
    encoder: &Encoder<f32>,
    images: &Tensor<f32>,
    dir: &SemanticDirection,
    lambda_z: f64,
    lambda_p: f64,
) -> Result<Tensor<f32>> {
    let codes = encoder.encode(images)?;
    stack.render(&edit(&codes, dir, lambda_z, lambda_p)?)
}

/// Mean per-pixel squared error of encoding then re-rendering `images`.
pub fn reconstruction_mse(stack: &GeneratorStack<f32>, encoder: &Encoder<f32>, images: &Tensor<f32>) -> Result<f64> {
    let mut total = 0.0;
    let b = images.shape()[0];
    let mut i = 0;
    while i < b {
        let len = 32.min(b - i);
        let x = images.narrow(0, i, len);
        let r = stack.render(&encoder.encode(&x)?)?;
        total += x
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        i += len;
    }
    Ok(total / images.numel() as f64)
}
