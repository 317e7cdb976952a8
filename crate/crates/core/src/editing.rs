//! Semantic directions in the mapped spaces and dual-space latent edits.

use std::fs;
use std::path::Path;

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::AttributeScorer;
use crate::error::{Error, Result};
use crate::latent::MappedPair;
use crate::metrics::{rescoring, RescoringReport};
use crate::model::GeneratorStack;
use crate::rng::{derive_seed, stream};
use crate::svm::{LinearSvm, SvmParams};

/// Flattened mapped codes with aligned attribute scores.
#[derive(Clone, Debug, Default)]
pub struct ScoredCodes {
    pub z_plus: Vec<Vec<f64>>,
    pub p_plus: Vec<Vec<f64>>,
    /// `scores[attribute][sample]`, in the order of the scorers given.
    pub scores: Vec<Vec<f64>>,
    pub attributes: Vec<String>,
}

fn flat_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let b = t.shape()[0];
    let k = t.numel() / b.max(1);
    t.data()
        .chunks(k.max(1))
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Samples `count` code pairs, renders them and scores every image.
pub fn collect_scored_codes(
    stack: &GeneratorStack<f32>,
    scorers: &[&dyn AttributeScorer],
    count: usize,
    seed: u64,
) -> Result<ScoredCodes> {
    let mut out = ScoredCodes {
        scores: vec![Vec::with_capacity(count); scorers.len()],
        attributes: scorers.iter().map(|s| s.name().to_string()).collect(),
        ..Default::default()
    };
    const CHUNK: usize = 64;
    let mut done = 0;
    let mut chunk = 0u64;
    while done < count {
        let b = CHUNK.min(count - done);
        let pair = stack.draw_latents(&mut stream(seed, "edit.codes", chunk), b);
        let mapped = stack.map_latents(&pair)?;
        let images = stack.render(&mapped)?;
        for (s, col) in scorers.iter().zip(out.scores.iter_mut()) {
            let v = s.score_batch(&images);
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("{} score {bad}", s.name())));
            }
            col.extend(v);
        }
        out.z_plus.extend(flat_rows(&mapped.z_plus));
        out.p_plus.extend(flat_rows(&mapped.p_plus));
        done += b;
        chunk += 1;
    }
    Ok(out)
}

/// Fit outcome in one space.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpaceFit {
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    /// Std of the codes' projection on the normal; a natural unit for λ.
    pub projection_std: f64,
    pub low_confidence: bool,
    pub epochs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FitMeta {
    pub samples: usize,
    pub labelled: usize,
    pub quantile: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub c: f64,
    pub z: Option<SpaceFit>,
    pub p: Option<SpaceFit>,
}

/// Unit normals in `Z⁺` and `P⁺`; a missing normal means that space cannot be edited.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SemanticDirection {
    pub attribute: String,
    pub n_z: Option<Vec<f64>>,
    pub n_p: Option<Vec<f64>>,
    /// Positive steps move toward higher scores.
    pub orientation: String,
    pub fit: FitMeta,
}

#[derive(Clone, Debug)]
pub struct FitParams {
    pub quantile: f64,
    pub c: f64,
    pub validation_fraction: f64,
    /// Validation accuracy below this marks a space low-confidence.
    pub confidence_threshold: f64,
    pub seed: u64,
    pub min_samples: usize,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            quantile: 0.25,
            c: 1.0,
            validation_fraction: 0.3,
            confidence_threshold: 0.6,
            seed: 0,
            min_samples: 200,
        }
    }
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("SVM normal has zero length".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn std_of(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

fn fit_space(
    codes: &[Vec<f64>],
    picked: &[(usize, bool)],
    params: &FitParams,
    tag: &str,
) -> Result<(Vec<f64>, SpaceFit)> {
    // Split by content hash so that repeated samples land on the same side.
    let (mut val, mut train) = (Vec::new(), Vec::new());
    for (k, &(i, _)) in picked.iter().enumerate() {
        let h = codes[i].iter().fold(derive_seed(params.seed, "svm.split", 0), |h, v| {
            derive_seed(h, "", v.to_bits())
        });
        if (h >> 11) as f64 / (1u64 << 53) as f64 <= params.validation_fraction {
            val.push(k);
        } else {
            train.push(k);
        }
    }
    let (val, train) = (&val[..], &train[..]);
    let gather = |ix: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
        ix.iter().map(|&k| (codes[picked[k].0].clone(), picked[k].1)).unzip()
    };
    let (tx, ty) = gather(train);
    let (vx, vy) = gather(val);
    let svm = LinearSvm::fit(
        &tx,
        &ty,
        &SvmParams {
            c: params.c,
            seed: params.seed,
            ..Default::default()
        },
    )
    .map_err(|e| match e {
        Error::Degenerate(m) => Error::Degenerate(format!("{tag}: {m}")),
        other => other,
    })?;
    let normal = unit(&svm.weights)?;
    let validation_accuracy = if vx.is_empty() {
        f64::NAN
    } else {
        svm.accuracy(&vx, &vy)
    };
    let fit = SpaceFit {
        train_accuracy: svm.accuracy(&tx, &ty),
        validation_accuracy,
        projection_std: std_of(codes.iter().map(|c| c.iter().zip(&normal).map(|(a, b)| a * b).sum())),
        low_confidence: !(validation_accuracy >= params.confidence_threshold),
        epochs: svm.epochs,
    };
    Ok((normal, fit))
}

/// Binarizes `scores` at the extreme quantiles and fits one SVM per requested
/// space. Either code set may be empty to skip that space.
pub fn fit_direction(
    codes_z: &[Vec<f64>],
    codes_p: &[Vec<f64>],
    scores: &[f64],
    attribute: &str,
    params: &FitParams,
) -> Result<SemanticDirection> {
    let n = scores.len();
    for (name, c) in [("z", codes_z), ("p", codes_p)] {
        if !c.is_empty() && c.len() != n {
            return Err(Error::Invalid(format!("{name} codes and scores differ in length")));
        }
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attribute scores".into()));
    }
    if !(0.0 < params.quantile && params.quantile <= 0.5) {
        return Err(Error::Validation {
            key: "svm_quantile".into(),
            msg: "must lie in (0, 0.5]".into(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let k = (n as f64 * params.quantile).floor() as usize;
    if 2 * k < params.min_samples {
        return Err(Error::Invalid(format!(
            "{} labelled samples after binarization; at least {} required",
            2 * k,
            params.min_samples
        )));
    }
    let (low, high) = (&order[..k], &order[n - k..]);
    let (lo_t, hi_t) = (scores[low[k - 1]], scores[high[0]]);
    if scores[order[0]] == scores[order[n - 1]] {
        return Err(Error::Degenerate(format!("{attribute}: all scores are equal")));
    }
    let mut picked: Vec<(usize, bool)> = low.iter().map(|&i| (i, false)).collect();
    picked.extend(high.iter().map(|&i| (i, true)));

    let fit_one = |codes: &[Vec<f64>], tag: &str| -> Result<Option<(Vec<f64>, SpaceFit)>> {
        if codes.is_empty() {
            Ok(None)
        } else {
            fit_space(codes, &picked, params, tag).map(Some)
        }
    };
    let z = fit_one(codes_z, "z")?;
    let p = fit_one(codes_p, "p")?;
    Ok(SemanticDirection {
        attribute: attribute.to_string(),
        n_z: z.as_ref().map(|(v, _)| v.clone()),
        n_p: p.as_ref().map(|(v, _)| v.clone()),
        orientation: "positive steps increase the score".into(),
        fit: FitMeta {
            samples: n,
            labelled: 2 * k,
            quantile: params.quantile,
            low_threshold: lo_t,
            high_threshold: hi_t,
            c: params.c,
            z: z.map(|(_, f)| f),
            p: p.map(|(_, f)| f),
        },
    })
}

fn shift(codes: &Tensor<f32>, normal: Option<&Vec<f64>>, lambda: f64, space: &str) -> Result<Tensor<f32>> {
    if lambda == 0.0 {
        return Ok(codes.clone());
    }
    let n =
        normal.ok_or_else(|| Error::Invalid(format!("direction has no {space} normal; lambda_{space} must be 0")))?;
    let b = codes.shape()[0];
    let k = codes.numel() / b.max(1);
    if n.len() != k {
        return Err(Error::Shape {
            what: format!("{space} direction"),
            expected: vec![k],
            got: vec![n.len()],
        });
    }
    let mut out = codes.to_vec();
    for row in out.chunks_mut(k) {
        for (v, d) in row.iter_mut().zip(n) {
            *v = (*v as f64 + lambda * d) as f32;
        }
    }
    Ok(Tensor::new(codes.shape(), out))
}

/// `(z⁺ + λ_z·n_z, p⁺ + λ_p·n_p)`; a space with λ = 0 is returned untouched.
pub fn edit(
    mapped: &MappedPair<f32>,
    dir: &SemanticDirection,
    lambda_z: f64,
    lambda_p: f64,
) -> Result<MappedPair<f32>> {
    Ok(MappedPair {
        z_plus: shift(&mapped.z_plus, dir.n_z.as_ref(), lambda_z, "z")?,
        p_plus: shift(&mapped.p_plus, dir.n_p.as_ref(), lambda_p, "p")?,
    })
}

/// Origin followed by `steps` equally spaced edits ending at the full move.
pub fn edit_sequence(
    mapped: &MappedPair<f32>,
    dir: &SemanticDirection,
    lambda_z: f64,
    lambda_p: f64,
    steps: usize,
) -> Result<Vec<MappedPair<f32>>> {
    if steps == 0 {
        return Err(Error::Invalid("steps must be at least 1".into()));
    }
    (0..=steps)
        .map(|k| {
            let f = k as f64 / steps as f64;
            edit(mapped, dir, lambda_z * f, lambda_p * f)
        })
        .collect()
}

/// Scores along edit strips: `out[image][step][attribute]`.
pub fn strip_scores(
    stack: &GeneratorStack<f32>,
    mapped: &MappedPair<f32>,
    dir: &SemanticDirection,
    lambda_z: f64,
    lambda_p: f64,
    steps: usize,
    scorers: &[&dyn AttributeScorer],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let seq = edit_sequence(mapped, dir, lambda_z, lambda_p, steps)?;
    let b = mapped.batch();
    let mut out = vec![vec![Vec::with_capacity(scorers.len()); steps + 1]; b];
    for (k, m) in seq.iter().enumerate() {
        let images = stack.render_chunked(m, 64)?;
        for s in scorers {
            for (i, v) in s.score_batch(&images).into_iter().enumerate() {
                out[i][k].push(v);
            }
        }
    }
    Ok(out)
}

/// Fraction of strips whose `attr` score moves monotonically in the direction of `sign`.
pub fn monotone_fraction(strips: &[Vec<Vec<f64>>], attr: usize, sign: f64) -> f64 {
    if strips.is_empty() {
        return 0.0;
    }
    let ok = strips
        .iter()
        .filter(|s| s.windows(2).all(|w| sign * (w[1][attr] - w[0][attr]) >= 0.0))
        .count();
    ok as f64 / strips.len() as f64
}

/// Re-scoring report and monotone fraction of an edit over fresh latents.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditEvaluation {
    pub report: RescoringReport,
    pub monotone_fraction: f64,
    pub lambda_z: f64,
    pub lambda_p: f64,
}

/// Applies the edit to `count` latents drawn from stream "edit.test" and
/// re-scores the strips with every scorer. The scorer named like the
/// direction is the edited attribute.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_edit(
    stack: &GeneratorStack<f32>,
    dir: &SemanticDirection,
    lambda_z: f64,
    lambda_p: f64,
    steps: usize,
    count: usize,
    seed: u64,
    scorers: &[&dyn AttributeScorer],
) -> Result<EditEvaluation> {
    let names: Vec<&str> = scorers.iter().map(|s| s.name()).collect();
    let edited = names
        .iter()
        .position(|n| *n == dir.attribute)
        .ok_or_else(|| Error::UnknownAttribute(dir.attribute.clone()))?;
    let mapped = stack.map_latents(&stack.draw_latents(&mut stream(seed, "edit.test", 0), count))?;
    let strips = strip_scores(stack, &mapped, dir, lambda_z, lambda_p, steps, scorers)?;
    let sign = if lambda_z + lambda_p < 0.0 { -1.0 } else { 1.0 };
    Ok(EditEvaluation {
        report: rescoring(&strips, &names, edited, sign)?,
        monotone_fraction: monotone_fraction(&strips, edited, sign),
        lambda_z,
        lambda_p,
    })
}

/// Directions for several attributes, stored as one JSON file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DirectionSet {
    pub n: usize,
    pub d: usize,
    pub directions: Vec<SemanticDirection>,
}

impl DirectionSet {
    pub fn get(&self, attribute: &str) -> Result<&SemanticDirection> {
        self.directions
            .iter()
            .find(|d| d.attribute == attribute)
            .ok_or_else(|| Error::UnknownAttribute(attribute.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        let k = s.n * s.d;
        for d in &s.directions {
            for v in [&d.n_z, &d.n_p].into_iter().flatten() {
                if v.len() != k {
                    return Err(Error::Shape {
                        what: format!("{} direction", d.attribute),
                        expected: vec![k],
                        got: vec![v.len()],
                    });
                }
            }
        }
        Ok(s)
    }
}
