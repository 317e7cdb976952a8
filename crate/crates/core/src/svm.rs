//! Linear soft-margin SVM trained by dual coordinate descent.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub epochs: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct SvmParams {
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tol: 1e-4,
            max_epochs: 2000,
            seed: 0,
        }
    }
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let ok = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| (self.decision(x) > 0.0) == y)
            .count();
        ok as f64 / xs.len() as f64
    }

    /// Minimizes `½‖w‖² + ½b² + Σ_i C_i·max(0, 1 − y_i(⟨w,x_i⟩ + b))`.
    ///
    /// Repeated points are merged, and each distinct point gets
    /// `C_i = C · count_i / mean_count`, so the fit depends only on the
    /// multiset's proportions. Points are visited in a canonical order, which
    /// makes the result independent of input order.
    pub fn fit(xs: &[Vec<f64>], ys: &[bool], params: &SvmParams) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::Invalid("features and labels differ in length".into()));
        }
        let (pos, neg) = ys
            .iter()
            .fold((0, 0), |(p, n), &y| if y { (p + 1, n) } else { (p, n + 1) });
        if pos == 0 || neg == 0 {
            return Err(Error::Degenerate("SVM labels contain a single class".into()));
        }
        let dim = xs[0].len();
        if xs.iter().any(|x| x.len() != dim) {
            return Err(Error::Invalid("ragged SVM features".into()));
        }
        if xs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SVM features".into()));
        }

        // canonical distinct points with multiplicities
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let key = |i: usize| -> (bool, Vec<u64>) { (ys[i], xs[i].iter().map(|v| v.to_bits()).collect()) };
        order.sort_by_cached_key(|&i| key(i));
        let mut uniq: Vec<(usize, f64)> = Vec::new();
        for &i in &order {
            match uniq.last_mut() {
                Some((j, c)) if ys[*j] == ys[i] && xs[*j] == xs[i] => *c += 1.0,
                _ => uniq.push((i, 1.0)),
            }
        }
        let mean_count = xs.len() as f64 / uniq.len() as f64;
        let upper: Vec<f64> = uniq.iter().map(|&(_, c)| params.c * c / mean_count).collect();
        let sign: Vec<f64> = uniq.iter().map(|&(i, _)| if ys[i] { 1.0 } else { -1.0 }).collect();
        let qii: Vec<f64> = uniq
            .iter()
            .map(|&(i, _)| xs[i].iter().map(|v| v * v).sum::<f64>() + 1.0)
            .collect();

        let m = uniq.len();
        let mut alpha = vec![0.0; m];
        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut perm: Vec<usize> = (0..m).collect();
        let mut rng = stream(params.seed, "svm", 0);
        let mut converged = false;
        let mut epochs = 0;
        while epochs < params.max_epochs {
            epochs += 1;
            perm.shuffle(&mut rng);
            let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
            for &k in &perm {
                let x = &xs[uniq[k].0];
                let y = sign[k];
                let g = y * (w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b) - 1.0;
                let u = upper[k];
                let pg = if alpha[k] <= 0.0 {
                    g.min(0.0)
                } else if alpha[k] >= u {
                    g.max(0.0)
                } else {
                    g
                };
                pg_max = pg_max.max(pg);
                pg_min = pg_min.min(pg);
                if pg.abs() > 1e-14 {
                    let old = alpha[k];
                    alpha[k] = (old - g / qii[k]).clamp(0.0, u);
                    let delta = (alpha[k] - old) * y;
                    if delta != 0.0 {
                        for (a, v) in w.iter_mut().zip(x) {
                            *a += delta * v;
                        }
                        b += delta;
                    }
                }
            }
            if pg_max - pg_min < params.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("SVM stopped after {epochs} epochs without reaching tolerance");
        }
        Ok(Self {
            weights: w,
            bias: b,
            epochs,
            converged,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_two_points() {
        let xs = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let s = LinearSvm::fit(&xs, &[true, false], &SvmParams::default()).unwrap();
        assert!(s.decision(&xs[0]) > 0.0 && s.decision(&xs[1]) < 0.0);
        assert!(s.weights[1].abs() < 1e-12);
    }

    #[test]
    fn single_class_is_degenerate() {
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            LinearSvm::fit(&xs, &[true, true], &SvmParams::default()),
            Err(Error::Degenerate(_))
        ));
    }
}
