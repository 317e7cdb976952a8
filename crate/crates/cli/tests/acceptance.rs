//! Acceptance suite. Prints one `criterion N: PASS|FAIL|SKIP` line per
//! criterion and exits non-zero when any criterion fails.
//!
//! Criteria 7-9 evaluate artifacts of the desk experiment
//! (`scripts/desk_experiment.sh`) found under `$DUALGAN_RUNS`
//! (default `<workspace>/runs`). Missing artifacts give SKIP, or FAIL when
//! `DUALGAN_REQUIRE_RUNS=1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use autograd::{grad, kink_signature};
use nalgebra::DMatrix;
use rand::Rng;

use dualgan::checkpoint::Checkpoint;
use dualgan::config::Variant;
use dualgan::data::Dataset;
use dualgan::data::{oracle_scorer, AttributeScorer, ATTRIBUTES};
use dualgan::discriminator::Discriminator;
use dualgan::editing::{evaluate_edit, fit_direction, DirectionSet, FitParams};
use dualgan::extractor::FeatureExtractor;
use dualgan::interaction::Interaction;
use dualgan::inversion::{generator_digest, load_encoder, reconstruction_mse};
use dualgan::layers::{assign, demodulate, named_params, ModConv, Module};
use dualgan::metrics::{fid, identity_rescoring, rescoring, texture_consistency};
use dualgan::rng::{normal, stream};
use dualgan::training::{fid_proxy, generator_loss, reference_features};
use dualgan::{GeneratorStack, ModelConfig, Tensor, Var};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Outcome::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn runs_dir() -> PathBuf {
    std::env::var_os("DUALGAN_RUNS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../runs"))
}

fn missing(what: &Path) -> Outcome {
    let msg = format!("missing artifact {}; run scripts/desk_experiment.sh", what.display());
    if std::env::var("DUALGAN_REQUIRE_RUNS").as_deref() == Ok("1") {
        Fail(msg)
    } else {
        Skip(msg)
    }
}

const FINAL: &str = "ckpt-020000";

fn tiny_gradcheck_config() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.n = 2;
    c.d = 8;
    c.heads = 2;
    c.layers = 1;
    c.resolution = 8;
    c.channel_schedule = "4:8,8:8".parse().unwrap();
    c
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// 1. Full generator-loss gradient (adversarial + path term) against central differences.
fn criterion_1() -> Outcome {
    let cfg = tiny_gradcheck_config();
    let mut g = GeneratorStack::<f64>::new(&cfg);
    let d = Discriminator::<f64>::new(&mut stream(1, "init.discriminator", 0), &cfg);
    let shape = [2, cfg.n, cfg.d];
    let z0: Tensor<f64> = normal(&mut stream(11, "c1", 0), &shape);
    let p0: Tensor<f64> = normal(&mut stream(11, "c1", 1), &shape);
    let noise: Tensor<f64> = normal(&mut stream(11, "c1", 2), &[2, 3, cfg.resolution, cfg.resolution]);
    let a = 0.7;

    let eval = |g: &GeneratorStack<f64>, z: &Tensor<f64>, p: &Tensor<f64>| -> (f64, u64) {
        kink_signature(|| {
            let l = generator_loss(g, &d, &Var::param(z.clone()), &Var::param(p.clone()), Some((&noise, a)))
                .expect("forward");
            l.total.item()
        })
    };

    let params = named_params(&mut g, "");
    let zv = Var::param(z0.clone());
    let pv = Var::param(p0.clone());
    let loss = generator_loss(&g, &d, &zv, &pv, Some((&noise, a))).expect("forward");
    if loss.path.is_none() {
        return Fail("path term missing from the loss".into());
    }
    let mut inputs: Vec<&Var<f64>> = params.iter().map(|(_, v)| v).collect();
    inputs.push(&zv);
    inputs.push(&pv);
    let grads = grad(&loss.total, &inputs, false);
    let (_, sig0) = eval(&g, &z0, &p0);

    let h = 1e-4;
    let values: Vec<Tensor<f64>> = params.iter().map(|(_, v)| v.value().clone()).collect();
    let trainable: Vec<usize> = (0..params.len()).filter(|&i| params[i].1.requires_grad()).collect();
    let sizes: Vec<usize> = trainable.iter().map(|&i| values[i].numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = stream(12, "c1.pick", 0);
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    let mut worst_at = String::new();

    while checked < 64 {
        if skipped > 256 {
            return Fail(format!("too many kink crossings ({skipped})"));
        }
        let mut k = rng.random_range(0..total);
        let mut slot = 0;
        while k >= sizes[slot] {
            k -= sizes[slot];
            slot += 1;
        }
        let pi = trainable[slot];
        let mut at = |delta: f64| {
            let mut vals = values.clone();
            let mut data = vals[pi].to_vec();
            data[k] += delta;
            vals[pi] = Tensor::new(vals[pi].shape(), data);
            assign(&mut g, vals);
            eval(&g, &z0, &p0)
        };
        let (fp, sp) = at(h);
        let (fm, sm) = at(-h);
        assign(&mut g, values.clone());
        if sp != sig0 || sm != sig0 {
            skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let an = grads[pi].value().data()[k];
        let e = rel_err(fd, an);
        if e > worst {
            worst = e;
            worst_at = format!("{}[{k}] fd {fd:.6e} an {an:.6e}", params[pi].0);
        }
        checked += 1;
    }

    for (which, base, gi) in [("z", &z0, params.len()), ("p", &p0, params.len() + 1)] {
        for k in 0..base.numel() {
            let shifted = |delta: f64| {
                let mut data = base.to_vec();
                data[k] += delta;
                Tensor::new(base.shape(), data)
            };
            let ((fp, sp), (fm, sm)) = if which == "z" {
                (eval(&g, &shifted(h), &p0), eval(&g, &shifted(-h), &p0))
            } else {
                (eval(&g, &z0, &shifted(h)), eval(&g, &z0, &shifted(-h)))
            };
            if sp != sig0 || sm != sig0 {
                skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let an = grads[gi].value().data()[k];
            let e = rel_err(fd, an);
            if e > worst {
                worst = e;
                worst_at = format!("{which}[{k}] fd {fd:.6e} an {an:.6e}");
            }
            checked += 1;
        }
    }
    verdict(
        worst < 1e-3,
        format!("{checked} coordinates, max relative error {worst:.2e} at {worst_at}; {skipped} kink-crossing draws redrawn"),
    )
}

/// 2. Attention rows are distributions; zero z⁺ gives zero w; brute-force n=2, d=2 layer.
fn criterion_2() -> Outcome {
    let cfg = ModelConfig::desk();
    let it = Interaction::<f32>::new(&mut stream(21, "init.interaction", 0), &cfg);
    let mut worst_row = 0.0f64;
    for i in 0..100 {
        let mut rng = stream(21, "c2.inputs", i);
        let scale = 0.5 + 4.0 * rng.random::<f64>();
        let z: Tensor<f32> = normal::<f32>(&mut rng, &[10, cfg.n, cfg.d]).scale(scale as f32);
        let p: Tensor<f32> = normal::<f32>(&mut rng, &[10, cfg.n, cfg.d]).scale(scale as f32);
        let (_, attns) = it
            .forward_with_attention(&Var::constant(z), &Var::constant(p))
            .expect("forward");
        for a in &attns {
            for row in a.value().data().chunks(cfg.n) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                worst_row = worst_row.max((s - 1.0).abs());
            }
        }
    }

    let mut zeroed = Interaction::<f32>::new(&mut stream(22, "init.interaction", 0), &cfg);
    zeroed.visit("", &mut |name, v| {
        if name.ends_with("bias") {
            *v = Var::param(Tensor::zeros(v.shape()));
        }
    });
    let mut worst_w = 0.0f64;
    for i in 0..100 {
        let p: Tensor<f32> = normal(&mut stream(22, "c2.p", i), &[1, cfg.n, cfg.d]);
        let w = zeroed
            .forward(&Var::constant(Tensor::zeros(&[1, cfg.n, cfg.d])), &Var::constant(p))
            .expect("forward");
        worst_w = w.value().data().iter().fold(worst_w, |m, &v| m.max(v.abs() as f64));
    }

    let brute = brute_force_layer();
    verdict(
        worst_row <= 1e-6 && worst_w <= 1e-6 && brute <= 1e-6,
        format!("max |row sum - 1| {worst_row:.2e}, max |w| at z=0 {worst_w:.2e}, brute-force deviation {brute:.2e}"),
    )
}

/// Hand evaluation of one attention layer with n = 2, d = 2, one head:
/// `w_i = z_i + W_O Σ_j softmax_j(q_i·k_j/√d) v_j + b_O`, where
/// `q = W_Q(p + e) + b_Q`, `k = W_K(z + e) + b_K`, `v = W_V z + b_V` and `e`
/// is the one-hot position.
fn brute_force_layer() -> f64 {
    let mut cfg = ModelConfig::desk();
    cfg.n = 2;
    cfg.d = 2;
    cfg.heads = 1;
    cfg.layers = 1;
    let mut it = Interaction::<f64>::new(&mut stream(23, "init.interaction", 0), &cfg);
    // random biases so every term is exercised
    let mut k = 0;
    it.visit("", &mut |name, v| {
        if name.ends_with("bias") {
            *v = Var::param(normal(&mut stream(23, "c2.bias", k), v.shape()));
            k += 1;
        }
    });
    let layer = &it.layers[0];
    let eff = |l: &dualgan::layers::Linear<f64>| -> (Vec<f64>, Vec<f64>) {
        let w = l.weight.value().data().iter().map(|x| x * l.weight_gain()).collect();
        let b = l.bias.as_ref().map_or(vec![0.0; 2], |b| {
            b.value().data().iter().map(|x| x * l.lr_mul).collect()
        });
        (w, b)
    };
    let apply = |(w, b): &(Vec<f64>, Vec<f64>), x: [f64; 2]| -> [f64; 2] {
        [w[0] * x[0] + w[1] * x[1] + b[0], w[2] * x[0] + w[3] * x[1] + b[1]]
    };
    let (wq, wk, wv, wo) = (eff(&layer.wq), eff(&layer.wk), eff(&layer.wv), eff(&layer.wo));

    let mut worst = 0.0f64;
    for trial in 0..20 {
        let zt: Tensor<f64> = normal(&mut stream(24, "c2.brute", trial), &[1, 2, 2]);
        let pt: Tensor<f64> = normal(&mut stream(25, "c2.brute", trial), &[1, 2, 2]);
        let (z, p) = (zt.data(), pt.data());
        let row = |t: &[f64], i: usize| [t[2 * i], t[2 * i + 1]];
        let e = |i: usize| if i == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
        let add = |a: [f64; 2], b: [f64; 2]| [a[0] + b[0], a[1] + b[1]];
        let got = it
            .forward(&Var::constant(zt.clone()), &Var::constant(pt.clone()))
            .expect("forward");
        for i in 0..2 {
            let q = apply(&wq, add(row(p, i), e(i)));
            let logits: Vec<f64> = (0..2)
                .map(|j| {
                    let kj = apply(&wk, add(row(z, j), e(j)));
                    (q[0] * kj[0] + q[1] * kj[1]) / 2f64.sqrt()
                })
                .collect();
            let m = logits[0].max(logits[1]);
            let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s = ex[0] + ex[1];
            let mut mix = [0.0; 2];
            for j in 0..2 {
                let vj = apply(&wv, row(z, j));
                mix[0] += ex[j] / s * vj[0];
                mix[1] += ex[j] / s * vj[1];
            }
            let expect = add(row(z, i), apply(&wo, mix));
            for c in 0..2 {
                worst = worst.max((expect[c] - got.value().data()[2 * i + c]).abs());
            }
        }
    }
    worst
}

/// 3. F₀ bit-identical across 100 z resamples with p fixed, through the CLI.
fn criterion_3() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let cfg = ModelConfig::desk();
    let mut stack = GeneratorStack::<f32>::new(&cfg);
    let mut ck = Checkpoint::new(0, cfg);
    ck.meta.insert("kind".into(), "gan".into());
    ck.extend(stack.export());
    let untrained = tmp.path().join("untrained");
    ck.save(&untrained).expect("save");

    let mut ckpts = vec![("untrained", untrained)];
    let trained = runs_dir().join("full").join(FINAL);
    if trained.exists() {
        ckpts.push(("trained", trained));
    }
    let mut details = Vec::new();
    let mut ok = true;
    for (label, path) in ckpts {
        let out = tmp.path().join(format!("sample-{label}"));
        let run = Command::new(env!("CARGO_BIN_EXE_dualgan"))
            .args([
                "sample",
                "--mode",
                "fix_p",
                "--count",
                "100",
                "--seed",
                "3",
                "--dump-f0",
            ])
            .arg("--ckpt")
            .arg(&path)
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "warn")
            .output()
            .expect("run cli");
        if !run.status.success() {
            return Fail(format!(
                "sample exited with {}: {}",
                run.status,
                String::from_utf8_lossy(&run.stderr)
            ));
        }
        let f0: Vec<Vec<u8>> = (0..100)
            .map(|i| fs::read(out.join(format!("f0-{i:04}.bin"))).unwrap())
            .collect();
        let pngs: Vec<Vec<u8>> = (0..100)
            .map(|i| fs::read(out.join(format!("{i:04}.png"))).unwrap())
            .collect();
        let same = f0.iter().all(|b| *b == f0[0]);
        let distinct_images = pngs.iter().filter(|p| **p != pngs[0]).count();
        ok &= same && distinct_images > 0;
        details.push(format!(
            "{label}: F0 identical {same}, {} of 99 images differ",
            distinct_images
        ));
    }
    verdict(ok, details.join("; "))
}

/// 4. Demodulation identity on random kernels; unit-variance propagation.
fn criterion_4() -> Outcome {
    let eps = ModelConfig::desk().eps;
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let mut rng = stream(41, "c4.kernel", i);
        let (cout, cin) = (rng.random_range(1..8), rng.random_range(1..8));
        // small kernels make eps matter
        let mag = 10f64.powf(rng.random_range(-5.0..1.0));
        let w: Tensor<f64> = normal::<f64>(&mut rng, &[cout, cin, 3, 3]).scale(mag);
        let s: Vec<f64> = (0..cin).map(|_| rng.random_range(-2.0..2.0)).collect();
        let out = demodulate(&w, &s, eps);
        for o in 0..cout {
            let mut mod_sq = 0.0;
            for j in 0..cin {
                for t in 0..9 {
                    mod_sq += (s[j] * w.data()[(o * cin + j) * 9 + t]).powi(2);
                }
            }
            let expect = mod_sq / (mod_sq + eps);
            let got: f64 = out.data()[o * cin * 9..(o + 1) * cin * 9].iter().map(|v| v * v).sum();
            worst = worst.max((got - expect).abs());
        }
    }

    let (cin, cout, side) = (16, 16, 16);
    let conv = ModConv::<f64>::new(&mut stream(42, "c4.conv", 0), 32, cin, cout, 3, true, false, eps);
    let b = 40; // 40·16·16 = 10,240 samples per channel
    let x: Tensor<f64> = normal(&mut stream(42, "c4.x", 0), &[b, cin, side, side]);
    let style: Tensor<f64> = normal(&mut stream(42, "c4.w", 0), &[b, 32]);
    let y = conv.forward(&Var::constant(x), &Var::constant(style));
    let yv = y.value();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for c in 0..cout {
        let vals: Vec<f64> = (0..b)
            .flat_map(|i| yv.data()[(i * cout + c) * side * side..(i * cout + c + 1) * side * side].to_vec())
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        lo = lo.min(sd);
        hi = hi.max(sd);
    }
    verdict(
        worst <= 1e-6 && lo >= 0.8 && hi <= 1.2,
        format!("max kernel deviation {worst:.2e}; output std range [{lo:.3}, {hi:.3}]"),
    )
}

fn covariance(x: &[Vec<f64>]) -> DMatrix<f64> {
    let (n, k) = (x.len(), x[0].len());
    let m = DMatrix::from_fn(n, k, |i, j| x[i][j]);
    let mean = m.row_mean();
    let c = DMatrix::from_fn(n, k, |i, j| m[(i, j)] - mean[j]);
    c.transpose() * c / (n as f64 - 1.0)
}

/// 5. Metric oracles.
fn criterion_5() -> Outcome {
    let draw = |seed: u64, n: usize, k: usize| -> Vec<Vec<f64>> {
        let t: Tensor<f64> = normal(&mut stream(seed, "c5", 0), &[n, k]);
        t.data().chunks(k).map(|r| r.to_vec()).collect()
    };
    let a = draw(51, 400, 6);
    let self_fid = fid(&a, &a).unwrap_or(f64::NAN);

    let delta = [0.3, -1.2, 0.5, 2.0, 0.0, -0.7];
    let shifted: Vec<Vec<f64>> = a
        .iter()
        .map(|r| r.iter().zip(&delta).map(|(x, d)| x + d).collect())
        .collect();
    let shift_fid = fid(&a, &shifted).unwrap_or(f64::NAN);
    let shift_expect: f64 = delta.iter().map(|d| d * d).sum();

    // correlated second sample
    let mix = DMatrix::from_fn(6, 6, |i, j| {
        if i == j {
            1.0
        } else {
            0.3 * ((i + 2 * j) % 3) as f64 - 0.2
        }
    });
    let b: Vec<Vec<f64>> = draw(52, 500, 6)
        .into_iter()
        .map(|r| {
            let v = &mix * nalgebra::DVector::from_vec(r);
            v.iter().map(|x| x + 0.4).collect()
        })
        .collect();
    let got = fid(&a, &b).unwrap_or(f64::NAN);
    // oracle: ‖μ₁−μ₂‖² + tr Σ₁ + tr Σ₂ − 2 Σ √λ(Σ₁Σ₂)
    let mean = |x: &[Vec<f64>]| -> Vec<f64> {
        (0..6)
            .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64)
            .collect()
    };
    let (ma, mb) = (mean(&a), mean(&b));
    let (ca, cb) = (covariance(&a), covariance(&b));
    let eig = (&ca * &cb).complex_eigenvalues();
    let sqrt_sum: f64 = eig.iter().map(|l| l.sqrt().re).sum();
    let oracle =
        ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() + ca.trace() + cb.trace() - 2.0 * sqrt_sum;

    // hand example: the edited attribute rises by 1 per step (C_e = 6) and
    // the other moves by 0.1 per step (C_i = 0.6), so the ratio is 0.1
    let strip: Vec<Vec<f64>> = (0..7).map(|k| vec![k as f64, 0.1 * k as f64]).collect();
    let report = rescoring(&[strip], &["pose_x", "hue"], 0, 1.0).expect("rescoring");
    let ratio = report.ratio("hue").unwrap_or(f64::NAN);
    let ratio_ok = (ratio - 0.1).abs() <= 1e-12;

    let identical = vec![vec![vec![0.5, -1.0, 2.0]; 7]; 3];
    let id = identity_rescoring(&identical, 6.0).unwrap_or(f64::NAN);

    let ok = self_fid.abs() <= 1e-6
        && (shift_fid - shift_expect).abs() <= 1e-6
        && (got - oracle).abs() <= 1e-6
        && ratio_ok
        && id.abs() <= 1e-12;
    verdict(
        ok,
        format!(
            "fid(A,A) {self_fid:.2e}; shift {shift_fid:.9} vs {shift_expect:.9}; gaussian {got:.9} vs oracle {oracle:.9}; ratio {ratio}; id {id:.1e}"
        ),
    )
}

/// 6. SVM recovers a planted direction and is at chance on unrelated scores.
fn criterion_6() -> Outcome {
    let cfg = ModelConfig::desk();
    let dim = cfg.n * cfg.d;
    let n = 5000;
    let rows = |name: &str| -> Vec<Vec<f64>> {
        let t: Tensor<f64> = normal(&mut stream(61, name, 0), &[n, dim]);
        t.data().chunks(dim).map(|r| r.to_vec()).collect()
    };
    let (z, p) = (rows("c6.z"), rows("c6.p"));
    let g: Tensor<f64> = normal(&mut stream(61, "c6.g", 0), &[dim]);
    let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let g: Vec<f64> = g.data().iter().map(|v| v / norm).collect();
    let scores: Vec<f64> = z.iter().map(|r| r.iter().zip(&g).map(|(a, b)| a * b).sum()).collect();
    let params = FitParams::default();
    let dir = match fit_direction(&z, &p, &scores, "planted", &params) {
        Ok(d) => d,
        Err(e) => return Fail(format!("fit failed: {e}")),
    };
    let nz = dir.n_z.as_ref().expect("z normal");
    let cos: f64 = nz.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / nz.iter().map(|v| v * v).sum::<f64>().sqrt();
    let pfit = dir.fit.p.as_ref().expect("p fit");
    verdict(
        cos >= 0.95 && (pfit.validation_accuracy - 0.5).abs() <= 0.05,
        format!(
            "cos(n_z, g) {cos:.4}; P-space held-out accuracy {:.4} (training accuracy {:.4})",
            pfit.validation_accuracy, pfit.train_accuracy
        ),
    )
}

fn scorers() -> Vec<Box<dyn AttributeScorer>> {
    ATTRIBUTES
        .iter()
        .map(|a| Box::new(oracle_scorer(a).unwrap()) as Box<dyn AttributeScorer>)
        .collect()
}

/// 7. Desk experiment: FID-proxy halves; P-only pose and Z-only hue edits are disentangled.
fn criterion_7() -> Outcome {
    let runs = runs_dir();
    let full = runs.join("full");
    let (start, end, dirs, data) = (
        full.join("ckpt-000000"),
        full.join(FINAL),
        full.join("directions.json"),
        runs.join("data"),
    );
    for p in [&start, &end, &dirs, &data] {
        if !p.exists() {
            return missing(p);
        }
    }
    let ck0 = Checkpoint::load(&start).expect("load");
    let ck1 = Checkpoint::load(&end).expect("load");
    let ex = FeatureExtractor::<f32>::from_checkpoint(&ck1).expect("extractor");
    let ds = Dataset::load(&data).expect("dataset");
    let real = reference_features(&ex, &ds, 1000, 0);
    let g0 = GeneratorStack::<f32>::from_checkpoint(&ck0).expect("stack");
    let g1 = GeneratorStack::<f32>::from_checkpoint(&ck1).expect("stack");
    let f0 = fid_proxy(&g0, &ex, &real, 1000, 0).expect("fid");
    let f1 = fid_proxy(&g1, &ex, &real, 1000, 0).expect("fid");
    let a_ok = f1 < 0.5 * f0;

    let set = DirectionSet::load(&dirs).expect("directions");
    let owned = scorers();
    let refs: Vec<&dyn AttributeScorer> = owned.iter().map(|b| b.as_ref()).collect();

    let pose = set.get("pose_x").expect("pose direction");
    let lp = 3.0 * pose.fit.p.as_ref().expect("p fit").projection_std;
    let pe = evaluate_edit(&g1, pose, 0.0, lp, 6, 200, 7, &refs).expect("pose edit");
    let hue_over_pose = pe.report.ratio("hue").unwrap_or(f64::INFINITY);
    let b_ok = hue_over_pose < 0.5 && pe.monotone_fraction >= 0.9;

    let hue = set.get("hue").expect("hue direction");
    let lz = 3.0 * hue.fit.z.as_ref().expect("z fit").projection_std;
    let he = evaluate_edit(&g1, hue, lz, 0.0, 6, 200, 7, &refs).expect("hue edit");
    let pose_over_hue = he.report.ratio("pose_x").unwrap_or(f64::INFINITY);
    let c_ok = pose_over_hue < 0.5;

    verdict(
        a_ok && b_ok && c_ok,
        format!(
            "(a) FID-proxy {f0:.3} -> {f1:.3} [{}]; (b) P-only pose edit λ_p {lp:.3}: C_hue/C_pose {hue_over_pose:.3}, monotone {:.3} [{}]; (c) Z-only hue edit λ_z {lz:.3}: C_pose/C_hue {pose_over_hue:.3} [{}]",
            pass(a_ok),
            pe.monotone_fraction,
            pass(b_ok),
            pass(c_ok)
        ),
    )
}

fn pass(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "fail"
    }
}

/// 8. Encoder reconstruction on held-out generated images; generator untouched.
fn criterion_8() -> Outcome {
    let runs = runs_dir();
    let (gan, enc) = (runs.join("full").join(FINAL), runs.join("encoder").join("enc-020000"));
    for p in [&gan, &enc] {
        if !p.exists() {
            return missing(p);
        }
    }
    let ck = Checkpoint::load(&gan).expect("load");
    let eck = Checkpoint::load(&enc).expect("load");
    let mut stack = GeneratorStack::<f32>::from_checkpoint(&ck).expect("stack");
    let encoder = load_encoder(&eck).expect("encoder");
    let held_out = stack
        .generate(&stack.draw_latents(&mut stream(0, "acceptance.heldout", 0), 500))
        .expect("generate");
    let mse = reconstruction_mse(&stack, &encoder, &held_out).expect("mse");
    let now = format!("{:016x}", generator_digest(&mut stack));
    let recorded = eck.meta.get("generator_digest").cloned().unwrap_or_default();
    let frozen = now == recorded;
    verdict(
        mse <= 0.05 && frozen,
        format!("held-out MSE {mse:.4} over 500 images; generator digest {now} vs recorded {recorded}"),
    )
}

/// 9. swapped_qkv keeps texture worse than full under p resampling.
fn criterion_9() -> Outcome {
    let runs = runs_dir();
    let (full, swapped) = (runs.join("full").join(FINAL), runs.join("swapped").join(FINAL));
    for p in [&full, &swapped] {
        if !p.exists() {
            return missing(p);
        }
    }
    let hue = oracle_scorer("hue").unwrap();
    let score = |p: &Path, want: Variant| -> Result<f64, String> {
        let ck = Checkpoint::load(p).map_err(|e| e.to_string())?;
        if ck.config.variant != want {
            return Err(format!("{} has variant {}", p.display(), ck.config.variant));
        }
        let g = GeneratorStack::<f32>::from_checkpoint(&ck).map_err(|e| e.to_string())?;
        texture_consistency(&g, &hue, 50, 20, 0).map_err(|e| e.to_string())
    };
    match (score(&full, Variant::Full), score(&swapped, Variant::SwappedQkv)) {
        (Ok(f), Ok(s)) => verdict(
            s > f,
            format!("hue std under 20 p-swaps (50 latents): full {f:.5}, swapped_qkv {s:.5}"),
        ),
        (Err(e), _) | (_, Err(e)) => Fail(e),
    }
}

fn main() -> ExitCode {
    // cargo passes libtest flags; `--list` must print nothing for test discovery
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", criterion_1),
        (2, "interaction invariants", criterion_2),
        (3, "structural disentanglement", criterion_3),
        (4, "demodulation", criterion_4),
        (5, "metric oracles", criterion_5),
        (6, "SVM direction recovery", criterion_6),
        (7, "end-to-end desk experiment", criterion_7),
        (8, "inversion", criterion_8),
        (9, "ablation direction", criterion_9),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        let t = Instant::now();
        let (tag, detail) = match f() {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!(
            "criterion {n}: {tag} [{name}] ({:.1}s) {detail}",
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
