mod common;

use dualgan::checkpoint::Checkpoint;
use dualgan::inversion::{encoder_dir, generator_digest, load_encoder, row_level, train_inversion, Encoder, Level};
use dualgan::layers::{export, Module};
use dualgan::rng::{normal, stream};
use dualgan::training::TrainState;
use dualgan::{GeneratorStack, Tensor, Var};

use common::{tiny, tiny_dataset};

#[test]
fn rows_split_into_three_contiguous_levels() {
    for n in 3..20 {
        let levels: Vec<Level> = (0..n).map(|r| row_level(r, n)).collect();
        assert_eq!(levels[0], Level::Coarse);
        assert_eq!(levels[n - 1], Level::Fine);
        let rank = |l: &Level| match l {
            Level::Coarse => 0,
            Level::Middle => 1,
            Level::Fine => 2,
        };
        assert!(levels.windows(2).all(|w| rank(&w[0]) <= rank(&w[1])));
    }
}

fn bits(ts: Vec<(String, Tensor<f32>)>) -> Vec<(String, Vec<u32>)> {
    ts.into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn perturb(e: &mut Encoder<f64>, target: &str) {
    let mut k = 0;
    e.visit("", &mut |name, v| {
        if name.starts_with(target) {
            let noise: Tensor<f64> = normal(&mut stream(9, "perturb", k), v.shape());
            *v = Var::param(v.value().add(&noise));
            k += 1;
        }
    });
    assert!(k > 0, "no parameters under {target}");
}

#[test]
fn p_codes_come_from_the_coarse_map_only() {
    let cfg = tiny();
    let images: Tensor<f64> = normal(&mut stream(1, "img", 0), &[2, 3, cfg.resolution, cfg.resolution]);
    let base = Encoder::<f64>::new(&mut stream(1, "enc", 0), &cfg)
        .encode(&images)
        .unwrap();
    for target in ["lateral_fine", "lateral_middle"] {
        let mut e = Encoder::<f64>::new(&mut stream(1, "enc", 0), &cfg);
        perturb(&mut e, target);
        let out = e.encode(&images).unwrap();
        assert_eq!(out.p_plus.data(), base.p_plus.data(), "{target} changed p⁺");
        let (n, d) = (cfg.n, cfg.d);
        for r in 0..n {
            let same = (0..2).all(|b| {
                let s = (b * n + r) * d;
                out.z_plus.data()[s..s + d] == base.z_plus.data()[s..s + d]
            });
            let expect_same = match (target, row_level(r, n)) {
                (_, Level::Coarse) => true,
                ("lateral_fine", Level::Middle) => true,
                _ => false,
            };
            assert_eq!(same, expect_same, "{target} row {r}");
        }
    }
}

#[test]
fn encoder_training_leaves_the_generator_untouched() {
    let mut cfg = tiny();
    cfg.log_interval = 1;
    cfg.checkpoint_interval = 0;
    let ds = tiny_dataset(16);
    let mut state = TrainState::new(&cfg, &ds).unwrap();
    let gan = state.to_checkpoint();
    let tmp = tempfile::tempdir().unwrap();
    let gan_dir = tmp.path().join("gan");
    gan.save(&gan_dir).unwrap();
    let before = std::fs::read(gan_dir.join("weights.bin")).unwrap();

    let (st, records) = train_inversion(&gan, Some(&ds), &tmp.path().join("enc"), None, Some(3)).unwrap();
    assert_eq!(st.step, 3);
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.loss.is_finite()));

    let mut stack = GeneratorStack::<f32>::from_checkpoint(&gan).unwrap();
    let enc_ck = Checkpoint::load(encoder_dir(&tmp.path().join("enc"), 3)).unwrap();
    assert_eq!(
        enc_ck.meta["generator_digest"],
        format!("{:016x}", generator_digest(&mut stack))
    );
    assert_eq!(std::fs::read(gan_dir.join("weights.bin")).unwrap(), before);

    // encoder parameters did move
    let mut start = load_encoder(&Checkpoint::load(encoder_dir(&tmp.path().join("enc"), 0)).unwrap()).unwrap();
    let mut end = load_encoder(&enc_ck).unwrap();
    assert_ne!(bits(export(&mut start, "e")), bits(export(&mut end, "e")));
}

#[test]
fn encoder_resumes_to_the_same_weights() {
    let cfg = tiny();
    let ds = tiny_dataset(16);
    let gan = TrainState::new(&cfg, &ds).unwrap().to_checkpoint();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (mut sa, _) = train_inversion(&gan, Some(&ds), &a, None, Some(4)).unwrap();
    train_inversion(&gan, Some(&ds), &b, None, Some(2)).unwrap();
    let (mut sb, _) = train_inversion(&gan, Some(&ds), &b, Some(&encoder_dir(&b, 2)), Some(4)).unwrap();
    assert_eq!(bits(export(&mut sa.encoder, "")), bits(export(&mut sb.encoder, "")));
}
