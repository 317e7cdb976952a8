mod common;

use dualgan::data::{oracle_scorer, AttributeScorer};
use dualgan::editing::{edit, edit_sequence, evaluate_edit, fit_direction, DirectionSet, FitParams};
use dualgan::rng::{normal, stream};
use dualgan::svm::{LinearSvm, SvmParams};
use dualgan::{Error, GeneratorStack, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

use common::{cosine, tiny};

fn gaussian_rows(seed: u64, name: &str, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let t: Tensor<f64> = normal(&mut stream(seed, name, 0), &[n, dim]);
    t.data().chunks(dim).map(|r| r.to_vec()).collect()
}

fn unit(seed: u64, dim: usize) -> Vec<f64> {
    let g: Tensor<f64> = normal(&mut stream(seed, "unit", 0), &[dim]);
    let n = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    g.data().iter().map(|v| v / n).collect()
}

#[test]
fn planted_direction_is_recovered_in_its_space_only() {
    let dim = 64;
    let z = gaussian_rows(1, "z", 4000, dim);
    let p = gaussian_rows(1, "p", 4000, dim);
    let g = unit(1, dim);
    let scores: Vec<f64> = z.iter().map(|r| r.iter().zip(&g).map(|(a, b)| a * b).sum()).collect();
    let dir = fit_direction(&z, &p, &scores, "planted", &FitParams::default()).unwrap();
    let nz = dir.n_z.as_ref().unwrap();
    assert!(cosine(nz, &g) >= 0.95, "cos {}", cosine(nz, &g));
    assert!((nz.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
    let pf = dir.fit.p.as_ref().unwrap();
    assert!(
        (pf.validation_accuracy - 0.5).abs() <= 0.05,
        "p accuracy {}",
        pf.validation_accuracy
    );
    assert!(pf.low_confidence);
    assert!(dir.fit.z.as_ref().unwrap().validation_accuracy > 0.95);
}

#[test]
fn fit_is_invariant_to_sample_order() {
    let dim = 16;
    let z = gaussian_rows(2, "z", 800, dim);
    let g = unit(2, dim);
    let scores: Vec<f64> = z.iter().map(|r| r.iter().zip(&g).map(|(a, b)| a * b).sum()).collect();
    let mut idx: Vec<usize> = (0..z.len()).collect();
    idx.shuffle(&mut stream(2, "perm", 0));
    let z2: Vec<Vec<f64>> = idx.iter().map(|&i| z[i].clone()).collect();
    let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let a = fit_direction(&z, &[], &scores, "a", &FitParams::default()).unwrap();
    let b = fit_direction(&z2, &[], &s2, "a", &FitParams::default()).unwrap();
    assert_eq!(a.n_z, b.n_z);
    assert!(a.n_p.is_none());
}

#[test]
fn constant_scores_are_degenerate() {
    let z = gaussian_rows(3, "z", 400, 8);
    let r = fit_direction(&z, &z, &vec![0.5; 400], "flat", &FitParams::default());
    assert!(matches!(r, Err(Error::Degenerate(_))), "{r:?}");
}

#[test]
fn too_few_samples_are_rejected() {
    let z = gaussian_rows(3, "z", 100, 8);
    let s: Vec<f64> = (0..100).map(|i| i as f64).collect();
    assert!(fit_direction(&z, &[], &s, "few", &FitParams::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn svm_ignores_duplication_and_order(seed in 0u64..1000, copies in 2usize..4) {
        let xs = gaussian_rows(seed, "x", 40, 3);
        let ys: Vec<bool> = xs.iter().map(|x| x[0] + 0.3 * x[1] > 0.1).collect();
        prop_assume!(ys.iter().any(|y| *y) && ys.iter().any(|y| !*y));
        let params = SvmParams { seed, ..SvmParams::default() };
        let base = LinearSvm::fit(&xs, &ys, &params).unwrap();

        let mut idx: Vec<usize> = (0..xs.len()).flat_map(|i| std::iter::repeat_n(i, copies)).collect();
        idx.shuffle(&mut stream(seed, "dup", 0));
        let xd: Vec<Vec<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
        let yd: Vec<bool> = idx.iter().map(|&i| ys[i]).collect();
        let dup = LinearSvm::fit(&xd, &yd, &params).unwrap();
        prop_assert_eq!(base.weights, dup.weights);
        prop_assert_eq!(base.bias, dup.bias);
    }

    #[test]
    fn edits_compose_additively(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let cfg = tiny();
        let stack = GeneratorStack::<f32>::new(&cfg);
        let mapped = stack.map_latents(&stack.draw_latents(&mut stream(seed, "c", 0), 2)).unwrap();
        let dim = cfg.n * cfg.d;
        let dir = synthetic_direction(dim, seed);
        let twice = edit(&edit(&mapped, &dir, a, b).unwrap(), &dir, b, a).unwrap();
        let once = edit(&mapped, &dir, a + b, a + b).unwrap();
        for (x, y) in twice.z_plus.data().iter().zip(once.z_plus.data()).chain(twice.p_plus.data().iter().zip(once.p_plus.data())) {
            prop_assert!((x - y).abs() <= 1e-5 * (1.0 + y.abs()));
        }
    }
}

fn synthetic_direction(dim: usize, seed: u64) -> dualgan::editing::SemanticDirection {
    let z = gaussian_rows(seed, "dz", 400, dim);
    let p = gaussian_rows(seed, "dp", 400, dim);
    let g = unit(seed, dim);
    let s: Vec<f64> = z
        .iter()
        .zip(&p)
        .map(|(a, b)| a.iter().chain(b).zip(g.iter().chain(&g)).map(|(x, y)| x * y).sum())
        .collect();
    fit_direction(&z, &p, &s, "hue", &FitParams::default()).unwrap()
}

#[test]
fn single_space_edits_leave_the_other_code_alone() {
    let cfg = tiny();
    let stack = GeneratorStack::<f32>::new(&cfg);
    let mapped = stack
        .map_latents(&stack.draw_latents(&mut stream(4, "c", 0), 3))
        .unwrap();
    let dir = synthetic_direction(cfg.n * cfg.d, 4);
    let z_only = edit(&mapped, &dir, 2.0, 0.0).unwrap();
    assert_eq!(z_only.p_plus.data(), mapped.p_plus.data());
    assert_ne!(z_only.z_plus.data(), mapped.z_plus.data());
    let p_only = edit(&mapped, &dir, 0.0, -1.5).unwrap();
    assert_eq!(p_only.z_plus.data(), mapped.z_plus.data());

    let seq = edit_sequence(&mapped, &dir, 1.0, 1.0, 6).unwrap();
    assert_eq!(seq.len(), 7);
    assert_eq!(seq[0].z_plus.data(), mapped.z_plus.data());
    assert!(edit_sequence(&mapped, &dir, 1.0, 1.0, 0).is_err());
}

#[test]
fn direction_sets_round_trip_and_check_dimensions() {
    let cfg = tiny();
    let dir = synthetic_direction(cfg.n * cfg.d, 5);
    let set = DirectionSet {
        n: cfg.n,
        d: cfg.d,
        directions: vec![dir],
    };
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("dirs.json");
    set.save(&path).unwrap();
    let back = DirectionSet::load(&path).unwrap();
    assert_eq!(back, set);
    assert!(matches!(back.get("smile"), Err(Error::UnknownAttribute(_))));

    let mut bad = set.clone();
    bad.d = 8;
    bad.save(&path).unwrap();
    assert!(DirectionSet::load(&path).is_err());
}

#[test]
fn edit_evaluation_reports_every_other_attribute() {
    let cfg = tiny();
    let stack = GeneratorStack::<f32>::new(&cfg);
    let dir = synthetic_direction(cfg.n * cfg.d, 6);
    let owned: Vec<_> = ["pose_x", "hue", "size"]
        .iter()
        .map(|a| oracle_scorer(a).unwrap())
        .collect();
    let scorers: Vec<&dyn AttributeScorer> = owned.iter().map(|s| s as &dyn AttributeScorer).collect();
    let ev = evaluate_edit(&stack, &dir, 3.0, 0.0, 4, 8, 0, &scorers).unwrap();
    assert_eq!(ev.report.edited, "hue");
    assert_eq!(ev.report.images, 8);
    assert_eq!(ev.report.steps, 4);
    let names: Vec<&str> = ev.report.influenced.iter().map(|e| e.attribute.as_str()).collect();
    assert_eq!(names, ["pose_x", "size"]);
    assert!((0.0..=1.0).contains(&ev.monotone_fraction));

    let again = evaluate_edit(&stack, &dir, 3.0, 0.0, 4, 8, 0, &scorers).unwrap();
    assert_eq!(again.report, ev.report);
}
