//! Adversarial training: non-saturating losses, lazy R1 on the critic and
//! lazy path-length regularization on the style space.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use autograd::{grad, no_grad, Adam, Float, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::discriminator::{r1_penalty, Discriminator};
use crate::error::{Error, Result};
use crate::extractor::{train_extractor, FeatureExtractor};
use crate::layers::{assign, export, import, named_params, Module};
use crate::metrics::{fid, rows};
use crate::model::GeneratorStack;
use crate::rng::{normal, stream};

/// `mean softplus(−D(fake))`.
pub fn generator_adversarial<T: Float>(d_fake: &Var<T>) -> Var<T> {
    d_fake.scale(-1.0).softplus().mean()
}

/// `mean softplus(D(fake)) + mean softplus(−D(real))`.
pub fn discriminator_adversarial<T: Float>(d_real: &Var<T>, d_fake: &Var<T>) -> Var<T> {
    d_fake.softplus().mean().add(&d_real.scale(-1.0).softplus().mean())
}

/// Per-sample `‖∇_w ⟨images, y⟩‖` with `y = noise / R`; differentiable.
pub fn path_lengths<T: Float>(w: &Var<T>, images: &Var<T>, noise: &Tensor<T>) -> Result<Var<T>> {
    let s = images.shape();
    if noise.shape() != s {
        return Err(crate::error::shape_err("path noise", s, noise.shape()));
    }
    let r = s[3] as f64;
    let y = Var::constant(noise.scale(T::from_f64(1.0 / r).unwrap()));
    let j = grad(&images.mul(&y).sum(), &[w], true).remove(0);
    if !j.value().all_finite() {
        return Err(Error::NonFinite("path-length Jacobian".into()));
    }
    let b = w.shape()[0];
    Ok(j.square()
        .reshape(&[b, w.value().numel() / b])
        .sum_axis(1)
        .add_scalar(1e-12)
        .sqrt())
}

/// `mean (‖J‖ − a)²`.
pub fn path_penalty<T: Float>(lengths: &Var<T>, mean: f64) -> Var<T> {
    lengths.add_scalar(-mean).square().mean()
}

/// Moves the running mean `a` toward the batch mean of `lengths`.
pub fn update_path_mean(mean: f64, lengths: &Tensor<impl Float>, decay: f64) -> f64 {
    let v = lengths.to_f64_vec();
    let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
    mean + decay * (m - mean)
}

pub struct GeneratorLoss<T: Float> {
    pub total: Var<T>,
    pub adversarial: Var<T>,
    pub path: Option<Var<T>>,
    pub path_lengths: Option<Tensor<T>>,
}

/// `λ_adv·f(−D(G(z,p))) [+ λ_path·(‖J‖ − a)²]`, with the path term evaluated on
/// the same batch when `path = Some((noise, a))`.
pub fn generator_loss<T: Float>(
    g: &GeneratorStack<T>,
    d: &Discriminator<T>,
    z: &Var<T>,
    p: &Var<T>,
    path: Option<(&Tensor<T>, f64)>,
) -> Result<GeneratorLoss<T>> {
    let cfg = &g.cfg;
    let f = g.forward(z, p)?;
    let adversarial = generator_adversarial(&d.forward(&f.images)?);
    let mut total = adversarial.scale(cfg.lambda_adv);
    let (mut pen, mut lens) = (None, None);
    if let Some((noise, a)) = path {
        let l = path_lengths(&f.w, &f.images, noise)?;
        let pp = path_penalty(&l, a);
        total = total.add(&pp.scale(cfg.lambda_path_regu));
        lens = Some(l.value().clone());
        pen = Some(pp);
    }
    Ok(GeneratorLoss {
        total,
        adversarial,
        path: pen,
        path_lengths: lens,
    })
}

pub struct DiscriminatorLoss<T: Float> {
    pub total: Var<T>,
    pub adversarial: Var<T>,
    pub r1: Option<Var<T>>,
}

/// `λ_dis·[f(D(fake)) + f(−D(real))] [+ λ_r1·weight·R1(real)]`.
pub fn discriminator_loss<T: Float>(
    d: &Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    cfg: &ModelConfig,
    r1_weight: Option<f64>,
) -> Result<DiscriminatorLoss<T>> {
    let real_v = Var::constant(real.clone());
    let adversarial = discriminator_adversarial(&d.forward(&real_v)?, &d.forward(&Var::constant(fake.clone()))?);
    let mut total = adversarial.scale(cfg.lambda_dis);
    let mut r1 = None;
    if let Some(wt) = r1_weight {
        let r = r1_penalty(&real_v, |x| d.forward(x))?;
        total = total.add(&r.scale(cfg.lambda_d_regu * wt));
        r1 = Some(r);
    }
    Ok(DiscriminatorLoss { total, adversarial, r1 })
}

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub r1: Option<f64>,
    pub path_penalty: Option<f64>,
    pub fid_proxy: Option<f64>,
    pub seconds: f64,
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Features of real images used as the FID-proxy reference.
pub fn reference_features(ex: &FeatureExtractor<f32>, ds: &Dataset, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, "metrics.fid.real", 0);
    let idx: Vec<usize> = (0..count.min(ds.len()))
        .map(|_| rng.random_range(0..ds.len()))
        .collect();
    idx.chunks(64).flat_map(|c| rows(&ex.embed(&ds.batch(c)))).collect()
}

/// FID-proxy of `count` generated samples against `real` features.
pub fn fid_proxy(
    g: &GeneratorStack<f32>,
    ex: &FeatureExtractor<f32>,
    real: &[Vec<f64>],
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = stream(seed, "metrics.fid.fake", 0);
    let mut fake = Vec::with_capacity(count);
    let mut left = count;
    while left > 0 {
        let b = left.min(64);
        let images = g.generate(&g.draw_latents(&mut rng, b))?;
        fake.extend(rows(&ex.embed(&images)));
        left -= b;
    }
    fid(real, &fake)
}

/// Everything needed to continue training.
pub struct TrainState {
    pub step: u64,
    pub g: GeneratorStack<f32>,
    pub d: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub path_mean: f64,
    /// Averaged generator weights (visit order), when enabled.
    pub ema: Option<Vec<Tensor<f32>>>,
    pub extractor: FeatureExtractor<f32>,
}

fn shapes(m: &mut dyn Module<f32>) -> Vec<Vec<usize>> {
    named_params(m, "").iter().map(|(_, v)| v.shape().to_vec()).collect()
}

fn adam(cfg: &ModelConfig, shapes: &[Vec<usize>]) -> Adam<f32> {
    Adam::new(shapes, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
}

fn values(m: &mut dyn Module<f32>) -> Vec<Tensor<f32>> {
    named_params(m, "")
        .into_iter()
        .map(|(_, v)| v.value().clone())
        .collect()
}

fn export_adam(opt: &Adam<f32>, prefix: &str, ck: &mut Checkpoint) {
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        ck.push(format!("{prefix}.m.{i}"), m.clone());
        ck.push(format!("{prefix}.v.{i}"), v.clone());
    }
    ck.scalars.insert(format!("{prefix}.step"), opt.step as f64);
}

fn import_adam(opt: &mut Adam<f32>, prefix: &str, ck: &Checkpoint) -> Result<()> {
    let missing = |n: &str| Error::Checkpoint {
        path: PathBuf::new(),
        msg: format!("missing optimizer state `{n}`"),
    };
    for i in 0..opt.m.len() {
        for (kind, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
            let name = format!("{prefix}.{kind}.{i}");
            let t = ck.get(&name).ok_or_else(|| missing(&name))?;
            crate::error::check_shape(&name, slot.shape(), t.shape())?;
            *slot = t.clone();
        }
    }
    opt.step = *ck
        .scalars
        .get(&format!("{prefix}.step"))
        .ok_or_else(|| missing(prefix))? as u64;
    Ok(())
}

impl TrainState {
    /// Fresh state; fits the feature extractor on `ds` first.
    pub fn new(cfg: &ModelConfig, ds: &Dataset) -> Result<Self> {
        let (extractor, loss) = train_extractor(ds, cfg.extractor_steps, cfg.extractor_batch, cfg.seed)?;
        log::info!("feature extractor trained, final loss {loss:.5}");
        Ok(Self::with_extractor(cfg, extractor))
    }

    pub fn with_extractor(cfg: &ModelConfig, extractor: FeatureExtractor<f32>) -> Self {
        let mut g = GeneratorStack::<f32>::new(cfg);
        let mut d = Discriminator::<f32>::new(&mut stream(cfg.seed, "init.discriminator", 0), cfg);
        let opt_g = adam(cfg, &shapes(&mut g));
        let opt_d = adam(cfg, &shapes(&mut d));
        let ema = (cfg.ema_beta > 0.0).then(|| values(&mut g));
        Self {
            step: 0,
            g,
            d,
            opt_g,
            opt_d,
            path_mean: 0.0,
            ema,
            extractor,
        }
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.g.cfg
    }

    /// Checkpoint holding inference weights (averaged when EMA is on), the
    /// critic, the extractor and the optimizer state.
    pub fn to_checkpoint(&mut self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.step, self.g.cfg.clone());
        ck.meta.insert("kind".into(), "gan".into());
        match &self.ema {
            Some(avg) => {
                let names: Vec<String> = named_params(&mut self.g, "").into_iter().map(|(n, _)| n).collect();
                ck.extend(names.iter().cloned().zip(avg.iter().cloned()));
                ck.extend(names.iter().map(|n| format!("raw.{n}")).zip(values(&mut self.g)));
            }
            None => ck.extend(self.g.export()),
        }
        ck.extend(export(&mut self.d, "disc"));
        ck.extend(self.extractor.export());
        export_adam(&self.opt_g, "opt_g", &mut ck);
        export_adam(&self.opt_d, "opt_d", &mut ck);
        ck.scalars.insert("path_mean".into(), self.path_mean);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = &ck.config;
        let extractor = FeatureExtractor::from_checkpoint(ck)?;
        let mut s = Self::with_extractor(cfg, extractor);
        if s.ema.is_some() {
            let avg = GeneratorStack::<f32>::from_checkpoint(ck)?;
            let mut avg = avg;
            s.ema = Some(values(&mut avg));
            import(&mut s.g, "raw", ck)?;
        } else {
            s.g.load(ck)?;
        }
        import(&mut s.d, "disc", ck)?;
        import_adam(&mut s.opt_g, "opt_g", ck)?;
        import_adam(&mut s.opt_d, "opt_d", ck)?;
        s.path_mean = ck.scalars.get("path_mean").copied().unwrap_or(0.0);
        s.step = ck.step;
        Ok(s)
    }

    /// Runs one critic update and one generator update; returns the step's record
    /// (without FID).
    pub fn step_once(&mut self, ds: &Dataset) -> Result<LogRecord> {
        let t0 = Instant::now();
        let step = self.step + 1;
        let cfg = self.g.cfg.clone();
        let b = cfg.batch_size;
        let mut rng = stream(cfg.seed, "train", step);

        // critic
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..ds.len())).collect();
        let real = ds.batch(&idx);
        let fake = {
            let _g = no_grad();
            self.g.generate(&self.g.draw_latents(&mut rng, b))?
        };
        let r1_weight = (cfg.r1_interval > 0 && step.is_multiple_of(cfg.r1_interval)).then_some(cfg.r1_interval as f64);
        let dl = discriminator_loss(&self.d, &real, &fake, &cfg, r1_weight)?;
        let loss_d = dl.total.item() as f64;
        let r1 = dl.r1.as_ref().map(|v| v.item() as f64);
        if !loss_d.is_finite() || r1.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("critic loss at step {step}")));
        }
        let dp = named_params(&mut self.d, "");
        let dvars: Vec<&Var<f32>> = dp.iter().map(|(_, v)| v).collect();
        let dg = grad(&dl.total, &dvars, false);
        drop(dl);
        let new = self.opt_d.update(
            &dvars.iter().map(|v| v.value()).collect::<Vec<_>>(),
            &dg.iter().map(|g| g.value()).collect::<Vec<_>>(),
        );
        drop(dvars);
        drop(dp);
        assign(&mut self.d, new);

        // generator
        let pair = self.g.draw_latents(&mut rng, b);
        let gl = generator_loss(&self.g, &self.d, &Var::constant(pair.z), &Var::constant(pair.p), None)?;
        let mut total = gl.total.clone();
        let mut path_pen = None;
        if cfg.path_interval > 0 && cfg.lambda_path_regu > 0.0 && step.is_multiple_of(cfg.path_interval) {
            let pb = (b / cfg.path_batch_shrink.max(1)).max(1);
            let pair = self.g.draw_latents(&mut rng, pb);
            let f = self.g.forward(&Var::constant(pair.z), &Var::constant(pair.p))?;
            let noise: Tensor<f32> = normal(&mut rng, f.images.shape());
            let lens = path_lengths(&f.w, &f.images, &noise)?;
            self.path_mean = update_path_mean(self.path_mean, lens.value(), cfg.path_decay);
            let pen = path_penalty(&lens, self.path_mean);
            path_pen = Some(pen.item() as f64);
            total = total.add(&pen.scale(cfg.lambda_path_regu * cfg.path_interval as f64));
        }
        let loss_g = total.item() as f64;
        if !loss_g.is_finite() {
            return Err(Error::NonFinite(format!("generator loss at step {step}")));
        }
        let gp = named_params(&mut self.g, "");
        let gvars: Vec<&Var<f32>> = gp.iter().map(|(_, v)| v).collect();
        let gg = grad(&total, &gvars, false);
        drop(total);
        drop(gl);
        let new = self.opt_g.update(
            &gvars.iter().map(|v| v.value()).collect::<Vec<_>>(),
            &gg.iter().map(|g| g.value()).collect::<Vec<_>>(),
        );
        drop(gvars);
        drop(gp);
        if let Some(avg) = &mut self.ema {
            let beta = cfg.ema_beta as f32;
            for (a, p) in avg.iter_mut().zip(&new) {
                *a = a.scale(beta).add(&p.scale(1.0 - beta));
            }
        }
        assign(&mut self.g, new);
        self.step = step;
        Ok(LogRecord {
            step,
            loss_g,
            loss_d,
            r1,
            path_penalty: path_pen,
            fid_proxy: None,
            seconds: t0.elapsed().as_secs_f64(),
        })
    }

    /// Generator used for evaluation (averaged weights when EMA is on).
    pub fn eval_generator(&mut self) -> GeneratorStack<f32> {
        let mut g = GeneratorStack::<f32>::new(&self.g.cfg);
        let vals = match &self.ema {
            Some(a) => a.clone(),
            None => values(&mut self.g),
        };
        assign(&mut g, vals);
        g
    }
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt-{step:06}"))
}

/// Most recent `ckpt-*` directory under `out`.
pub fn latest_checkpoint(out: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    for e in fs::read_dir(out).ok()?.flatten() {
        let name = e.file_name().to_string_lossy().to_string();
        if let Some(s) = name.strip_prefix("ckpt-").and_then(|s| s.parse::<u64>().ok()) {
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, e.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
    pub records: Vec<LogRecord>,
}

/// Keys that may differ between a checkpoint's config and a resume config.
const RESUMABLE_KEYS: [&str; 4] = ["steps", "checkpoint_interval", "log_interval", "fid_samples"];

fn same_training_config(a: &ModelConfig, b: &ModelConfig) -> bool {
    let strip = |c: &ModelConfig| -> Vec<String> {
        c.to_text()
            .lines()
            .filter(|l| {
                !RESUMABLE_KEYS
                    .iter()
                    .any(|k| l.split('=').next().map(str::trim) == Some(k))
            })
            .map(String::from)
            .collect()
    };
    strip(a) == strip(b)
}

/// Trains to `cfg.steps`, writing `ckpt-<step>` directories and `log.jsonl`
/// under `out`. With `resume`, continues from that checkpoint.
pub fn train(cfg: &ModelConfig, ds: &Dataset, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    if ds.resolution != cfg.resolution {
        return Err(Error::Shape {
            what: "dataset resolution".into(),
            expected: vec![cfg.resolution],
            got: vec![ds.resolution],
        });
    }
    fs::create_dir_all(out)?;
    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if !same_training_config(&ck.config, cfg) {
                return Err(Error::Invalid(format!(
                    "config differs from the one stored in {}",
                    p.display()
                )));
            }
            let mut s = TrainState::from_checkpoint(&ck)?;
            s.g.cfg = cfg.clone();
            s
        }
        None => {
            let mut s = TrainState::new(cfg, ds)?;
            s.to_checkpoint().save(checkpoint_dir(out, 0))?;
            s
        }
    };
    let log_path = out.join("log.jsonl");
    let mut log_file = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let real = (cfg.fid_samples > 1).then(|| reference_features(&state.extractor, ds, cfg.fid_samples, cfg.seed));
    let mut records = Vec::new();
    let mut last_good = checkpoint_dir(out, state.step);
    let mut elapsed = 0.0;
    while state.step < cfg.steps {
        let mut rec = match state.step_once(ds) {
            Ok(r) => r,
            Err(e) => {
                return Err(Error::Invalid(format!(
                    "training halted: {e}; last good checkpoint {}",
                    last_good.display()
                )))
            }
        };
        elapsed += rec.seconds;
        let step = rec.step;
        if cfg.log_interval > 0 && (step % cfg.log_interval == 0 || step == cfg.steps) {
            if let Some(real) = &real {
                let g = state.eval_generator();
                rec.fid_proxy = Some(fid_proxy(&g, &state.extractor, real, cfg.fid_samples, cfg.seed)?);
            }
            rec.seconds = elapsed;
            elapsed = 0.0;
            writeln!(log_file, "{}", serde_json::to_string(&rec)?)?;
            log_file.flush()?;
            log::info!(
                "step {step}: loss_g {:.4} loss_d {:.4} fid_proxy {:?}",
                rec.loss_g,
                rec.loss_d,
                rec.fid_proxy
            );
            records.push(rec);
        }
        if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) || step == cfg.steps {
            last_good = checkpoint_dir(out, step);
            state.to_checkpoint().save(&last_good)?;
        }
    }
    Ok(TrainSummary {
        final_step: state.step,
        final_checkpoint: checkpoint_dir(out, state.step),
        records,
    })
}
