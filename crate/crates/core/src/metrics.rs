//! Evaluation: Fréchet distance, re-scoring ratios and perceptual diversity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::AttributeScorer;
use crate::error::{Error, Result};
use crate::extractor::FeatureExtractor;
use crate::latent::{LatentPair, MappedPair};
use crate::model::GeneratorStack;
use crate::rng::{normal, stream};
use autograd::{no_grad, Tensor, Var};

/// Mean and unbiased covariance of the rows of `x` (`N × k`).
pub fn mean_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu = x.row_mean().transpose();
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = c.transpose() * &c / (n.max(2) - 1) as f64;
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` between Gaussian fits.
pub fn fid_from_stats(mu1: &DVector<f64>, c1: &DMatrix<f64>, mu2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    // Tr (Σ₁Σ₂)^{1/2} = Tr (S Σ₂ S)^{1/2} with S = Σ₁^{1/2}, which is symmetric.
    let s = sqrt_psd(c1);
    let m = &s * c2 * &s;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let scale = c1.trace().abs() + c2.trace().abs() + 1.0;
    if eig.eigenvalues.iter().any(|&v| v < -1e-6 * scale) {
        return Err(Error::Degenerate(
            "covariance product is not positive semidefinite".into(),
        ));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu1 - mu2).norm_squared() + c1.trace() + c2.trace() - 2.0 * tr_sqrt;
    if d < -1e-6 * scale {
        return Err(Error::Degenerate(format!("negative distance {d}")));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between two feature sets (rows are samples).
pub fn fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<f64> {
    let to_mat = |x: &[Vec<f64>], what: &str| -> Result<DMatrix<f64>> {
        if x.len() < 2 {
            return Err(Error::Degenerate(format!("{what}: need at least 2 samples")));
        }
        let k = x[0].len();
        if x.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid(format!("{what}: ragged feature rows")));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} features")));
        }
        if x.len() <= k {
            log::warn!(
                "{what}: {} samples for {k} features; covariance is rank deficient",
                x.len()
            );
        }
        Ok(DMatrix::from_row_iterator(x.len(), k, x.iter().flatten().copied()))
    };
    let a = to_mat(real, "real")?;
    let b = to_mat(fake, "fake")?;
    if a.ncols() != b.ncols() {
        return Err(Error::Invalid("feature dimensions differ".into()));
    }
    let (m1, c1) = mean_cov(&a);
    let (m2, c2) = mean_cov(&b);
    fid_from_stats(&m1, &c1, &m2, &c2)
}

/// Rows of a `[B, k]` tensor as vectors.
pub fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let k = t.shape()[1];
    t.data()
        .chunks(k)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InfluenceEntry {
    pub attribute: String,
    pub c_i: f64,
    /// `C_i / C_e`, absent when the report is invalid.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RescoringReport {
    pub edited: String,
    pub c_e: f64,
    pub influenced: Vec<InfluenceEntry>,
    pub images: usize,
    pub steps: usize,
    /// False when `C_e <= 0`: the edit did not move its own attribute.
    pub valid: bool,
    pub convention: String,
}

impl RescoringReport {
    pub fn ratio(&self, attribute: &str) -> Option<f64> {
        self.influenced
            .iter()
            .find(|e| e.attribute == attribute)
            .and_then(|e| e.ratio)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "edited: {}  C_e = {:.6}  images = {}  steps = {}{}\n",
            self.edited,
            self.c_e,
            self.images,
            self.steps,
            if self.valid { "" } else { "  (invalid: C_e <= 0)" }
        );
        s.push_str(&format!("{:<12} {:>12} {:>12}\n", "attribute", "C_i", "C_i/C_e"));
        for e in &self.influenced {
            let r = e.ratio.map_or("-".to_string(), |r| format!("{r:.6}"));
            s.push_str(&format!("{:<12} {:>12.6} {:>12}\n", e.attribute, e.c_i, r));
        }
        s
    }
}

/// Re-scoring over strips `scores[image][step][attribute]`.
///
/// `C_e` sums the signed step-to-step change of the edited attribute, oriented
/// by `direction_sign`; each `C_i` sums absolute step-to-step changes.
pub fn rescoring(
    scores: &[Vec<Vec<f64>>],
    names: &[&str],
    edited: usize,
    direction_sign: f64,
) -> Result<RescoringReport> {
    let steps = scores.first().map_or(0, |s| s.len().saturating_sub(1));
    if steps == 0 {
        return Err(Error::Invalid("re-scoring needs strips with at least one step".into()));
    }
    let sign = if direction_sign < 0.0 { -1.0 } else { 1.0 };
    let mut c_e = 0.0;
    let mut c_i = vec![0.0; names.len()];
    for strip in scores {
        if strip.len() != steps + 1 {
            return Err(Error::Invalid("strips have different lengths".into()));
        }
        if strip.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        for k in 1..strip.len() {
            c_e += sign * (strip[k][edited] - strip[k - 1][edited]);
            for (a, c) in c_i.iter_mut().enumerate() {
                *c += (strip[k][a] - strip[k - 1][a]).abs();
            }
        }
    }
    let valid = c_e > 0.0;
    let influenced = names
        .iter()
        .enumerate()
        .filter(|&(a, _)| a != edited)
        .map(|(a, n)| InfluenceEntry {
            attribute: n.to_string(),
            c_i: c_i[a],
            ratio: valid.then(|| c_i[a] / c_e),
        })
        .collect();
    Ok(RescoringReport {
        edited: names[edited].to_string(),
        c_e,
        influenced,
        images: scores.len(),
        steps,
        valid,
        convention: "C_e: signed change along the edit; C_i: absolute change".into(),
    })
}

/// `Σ_images Σ_steps (1 − cos(f_k, f_{k+1}))` over `features[image][step]`.
pub fn identity_change(features: &[Vec<Vec<f64>>]) -> Result<f64> {
    let mut total = 0.0;
    for strip in features {
        for k in 1..strip.len() {
            let (a, b) = (&strip[k - 1], &strip[k]);
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Degenerate("zero-norm identity feature".into()));
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            total += 1.0 - dot / (na * nb);
        }
    }
    Ok(total)
}

/// `C_id / C_e`.
pub fn identity_rescoring(features: &[Vec<Vec<f64>>], c_e: f64) -> Result<f64> {
    if c_e <= 0.0 {
        return Err(Error::Degenerate(format!("C_e = {c_e} is not positive")));
    }
    Ok(identity_change(features)? / c_e)
}

/// Mean of `dist(i, j)` over all unordered pairs `i < j`; 0 for fewer than 2 items.
pub fn mean_pairwise(n: usize, mut dist: impl FnMut(usize, usize) -> f64) -> f64 {
    let mut s = 0.0;
    let mut c = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            s += dist(i, j);
            c += 1;
        }
    }
    if c == 0 {
        0.0
    } else {
        s / c as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiversityMode {
    /// Both codes resampled.
    All,
    /// `z` resampled, `p` fixed.
    VaryZ,
    /// `p` resampled, `z` fixed.
    VaryP,
}

impl DiversityMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => DiversityMode::All,
            "z_fixed_p" | "vary_z" | "z" => DiversityMode::VaryZ,
            "p_fixed_z" | "vary_p" | "p" => DiversityMode::VaryP,
            other => return Err(Error::Invalid(format!("unknown diversity mode `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiversityReport {
    pub lpips_all: f64,
    pub lpips_z: f64,
    pub lpips_p: f64,
    pub delta: f64,
    pub samples_per_rep: usize,
    pub reps: usize,
    pub pairing: String,
}

impl DiversityReport {
    pub fn new(lpips_all: f64, lpips_z: f64, lpips_p: f64, samples_per_rep: usize, reps: usize) -> Self {
        Self {
            lpips_all,
            lpips_z,
            lpips_p,
            delta: (lpips_z - lpips_p).abs(),
            samples_per_rep,
            reps,
            pairing: "all distinct pairs".into(),
        }
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:>10} {:>10} {:>10} {:>10}\n{:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            "LPIPS_all", "LPIPS_z", "LPIPS_p", "delta", self.lpips_all, self.lpips_z, self.lpips_p, self.delta
        )
    }
}

/// Channel-normalized feature maps of a batch, flattened per image and level.
fn normalized_maps(ex: &FeatureExtractor<f32>, images: &Tensor<f32>) -> Vec<Vec<(Vec<f32>, usize)>> {
    let _g = no_grad();
    let f = ex.features(&Var::constant(images.clone()));
    let b = images.shape()[0];
    let mut out = vec![Vec::new(); b];
    for m in &f.maps {
        let s = m.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let d = m.value().data();
        for (i, o) in out.iter_mut().enumerate() {
            let mut v = d[i * c * hw..(i + 1) * c * hw].to_vec();
            for p in 0..hw {
                let n: f32 = (0..c).map(|k| v[k * hw + p] * v[k * hw + p]).sum::<f32>() + 1e-10;
                let inv = 1.0 / n.sqrt();
                for k in 0..c {
                    v[k * hw + p] *= inv;
                }
            }
            o.push((v, hw));
        }
    }
    out
}

/// Mean pairwise perceptual distance within a batch of images.
pub fn batch_diversity(ex: &FeatureExtractor<f32>, images: &Tensor<f32>) -> f64 {
    let maps = normalized_maps(ex, images);
    let levels = maps.first().map_or(1, |m| m.len()) as f64;
    mean_pairwise(maps.len(), |i, j| {
        maps[i]
            .iter()
            .zip(&maps[j])
            .map(|((a, hw), (b, _))| a.iter().zip(b).map(|(x, y)| ((x - y) * (x - y)) as f64).sum::<f64>() / *hw as f64)
            .sum::<f64>()
            / levels
    })
}

/// Perceptual diversity of generated images under `mode`, averaged over `reps`.
pub fn lpips_diversity(
    stack: &GeneratorStack<f32>,
    ex: &FeatureExtractor<f32>,
    mode: DiversityMode,
    samples_per_rep: usize,
    reps: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = &stack.cfg;
    let mut total = 0.0;
    for rep in 0..reps {
        let mut rng = stream(seed, "metrics.lpips", rep as u64);
        let shape = [samples_per_rep, cfg.n, cfg.d];
        let one = [1, cfg.n, cfg.d];
        let (z, p) = match mode {
            DiversityMode::All => (normal(&mut rng, &shape), normal(&mut rng, &shape)),
            DiversityMode::VaryZ => {
                let p: Tensor<f32> = normal(&mut rng, &one);
                (normal(&mut rng, &shape), p.broadcast_to(&shape))
            }
            DiversityMode::VaryP => {
                let z: Tensor<f32> = normal(&mut rng, &one);
                (z.broadcast_to(&shape), normal(&mut rng, &shape))
            }
        };
        let mapped: MappedPair<f32> = stack.map_latents(&LatentPair { z, p })?;
        let images = stack.render_chunked(&mapped, 16)?;
        total += batch_diversity(ex, &images);
    }
    Ok(total / reps.max(1) as f64)
}

/// Mean, over `latents` fixed z codes, of the population std of `scorer`
/// across `swaps` freshly drawn p codes. Lower means texture survives a
/// structure swap.
pub fn texture_consistency(
    stack: &GeneratorStack<f32>,
    scorer: &dyn AttributeScorer,
    latents: usize,
    swaps: usize,
    seed: u64,
) -> Result<f64> {
    if latents == 0 || swaps < 2 {
        return Err(Error::Invalid(
            "texture consistency needs latents >= 1 and swaps >= 2".into(),
        ));
    }
    let cfg = &stack.cfg;
    let shape = [swaps, cfg.n, cfg.d];
    let mut total = 0.0;
    for i in 0..latents {
        let mut rng = stream(seed, "metrics.texture", i as u64);
        let z: Tensor<f32> = normal(&mut rng, &[1, cfg.n, cfg.d]);
        let p = normal(&mut rng, &shape);
        let mapped = stack.map_latents(&LatentPair {
            z: z.broadcast_to(&shape),
            p,
        })?;
        let scores = scorer.score_batch(&stack.render_chunked(&mapped, 32)?);
        let mean = scores.iter().sum::<f64>() / swaps as f64;
        total += (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / swaps as f64).sqrt();
    }
    Ok(total / latents as f64)
}
