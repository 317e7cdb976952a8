mod common;

use autograd::{Tensor, Var};
use dualgan::checkpoint::Checkpoint;
use dualgan::rng::{normal, stream};
use dualgan::training::{
    checkpoint_dir, discriminator_adversarial, generator_adversarial, latest_checkpoint, path_lengths, path_penalty,
    read_log, train, update_path_mean,
};

use common::{tiny, tiny_dataset};

fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

#[test]
fn adversarial_losses_by_hand() {
    let d_fake: Var<f64> = Var::constant(Tensor::from_f64(&[3], &[0.0, 3f64.ln(), -2.0]));
    let expect_g = (softplus(0.0) + softplus(-(3f64.ln())) + softplus(2.0)) / 3.0;
    assert!((generator_adversarial(&d_fake).item() - expect_g).abs() < 1e-14);
    // ln 2, ln(4/3) and ln(1 + e²) written out
    let closed = (2f64.ln() + (4.0f64 / 3.0).ln() + (1.0 + 2f64.exp()).ln()) / 3.0;
    assert!((expect_g - closed).abs() < 1e-14);

    let d_real: Var<f64> = Var::constant(Tensor::from_f64(&[2], &[1.0, 0.5]));
    let d_fake = Var::constant(Tensor::from_f64(&[2], &[-1.0, 0.25]));
    let expect_d = (softplus(-1.0) + softplus(-0.5)) / 2.0 + (softplus(-1.0) + softplus(0.25)) / 2.0;
    assert!((discriminator_adversarial(&d_real, &d_fake).item() - expect_d).abs() < 1e-14);
}

#[test]
fn path_length_of_a_linear_generator() {
    // images = reshape(w · A): the Jacobian-vector product is A·y per sample.
    let (b, m, r) = (3, 5, 4);
    let pixels = 3 * r * r;
    let a: Tensor<f64> = normal(&mut stream(1, "A", 0), &[m, pixels]);
    let w = Var::param(normal(&mut stream(1, "w", 0), &[b, m]));
    let noise: Tensor<f64> = normal(&mut stream(1, "y", 0), &[b, 3, r, r]);
    let images = w
        .matmul_t(&Var::constant(a.clone()), false, false)
        .reshape(&[b, 3, r, r]);
    let lens = path_lengths(&w, &images, &noise).unwrap();
    for i in 0..b {
        let y: Vec<f64> = noise.data()[i * pixels..(i + 1) * pixels]
            .iter()
            .map(|v| v / r as f64)
            .collect();
        let jy: Vec<f64> = (0..m)
            .map(|k| (0..pixels).map(|p| a.data()[k * pixels + p] * y[p]).sum())
            .collect();
        let expect = jy.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((lens.value().data()[i] - expect).abs() < 1e-9 * (1.0 + expect));
    }
}

#[test]
fn path_penalty_and_running_mean_by_hand() {
    let lens: Var<f64> = Var::constant(Tensor::from_f64(&[2], &[1.0, 3.0]));
    assert!((path_penalty(&lens, 1.0).item() - 2.0).abs() < 1e-15);
    let m = update_path_mean(1.0, lens.value(), 0.01);
    assert!((m - 1.01).abs() < 1e-15);
}

fn generator_tensors(dir: &std::path::Path) -> Vec<(String, Vec<u32>)> {
    let ck = Checkpoint::load(dir).unwrap();
    ck.tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn training_is_deterministic_and_resumable() {
    let cfg = tiny();
    let ds = tiny_dataset(32);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));

    let sa = train(&cfg, &ds, &a, None).unwrap();
    assert_eq!(sa.final_step, 4);
    assert_eq!(latest_checkpoint(&a).unwrap(), checkpoint_dir(&a, 4));
    let log = read_log(a.join("log.jsonl")).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(log.iter().all(|r| r.loss_g.is_finite() && r.loss_d.is_finite()));
    assert!(log.iter().any(|r| r.r1.is_some()) && log.iter().any(|r| r.path_penalty.is_some()));

    train(&cfg, &ds, &b, None).unwrap();
    assert_eq!(
        generator_tensors(&checkpoint_dir(&a, 4)),
        generator_tensors(&checkpoint_dir(&b, 4))
    );

    let mut short = cfg.clone();
    short.steps = 2;
    train(&short, &ds, &c, None).unwrap();
    train(&cfg, &ds, &c, Some(&checkpoint_dir(&c, 2))).unwrap();
    assert_eq!(
        generator_tensors(&checkpoint_dir(&a, 4)),
        generator_tensors(&checkpoint_dir(&c, 4))
    );
}

#[test]
fn resume_rejects_changed_hyperparameters() {
    let cfg = tiny();
    let ds = tiny_dataset(16);
    let tmp = tempfile::tempdir().unwrap();
    let mut short = cfg.clone();
    short.steps = 1;
    train(&short, &ds, tmp.path(), None).unwrap();
    let mut other = cfg.clone();
    other.lr *= 2.0;
    assert!(train(&other, &ds, tmp.path(), Some(&checkpoint_dir(tmp.path(), 1))).is_err());
}

#[test]
fn dataset_resolution_must_match() {
    let mut cfg = tiny();
    cfg.resolution = 16;
    cfg.channel_schedule = "4:16,8:16,16:16".parse().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    assert!(train(&cfg, &tiny_dataset(4), tmp.path(), None).is_err());
}
