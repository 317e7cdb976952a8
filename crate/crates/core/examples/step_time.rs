use std::time::Instant;

use dualgan::data::{generate_dataset, SyntheticSpec};
use dualgan::extractor::FeatureExtractor;
use dualgan::rng::stream;
use dualgan::training::TrainState;
use dualgan::ModelConfig;

fn main() {
    let mut cfg = ModelConfig::desk();
    cfg.batch_size = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let ds = generate_dataset(&SyntheticSpec::default(), 256, 0).unwrap();
    let ex = FeatureExtractor::new(&mut stream(0, "init.extractor", 0), 32);
    let mut s = TrainState::with_extractor(&cfg, ex);
    for _ in 0..32 {
        let t = Instant::now();
        let r = s.step_once(&ds).unwrap();
        println!(
            "step {} {:.3}s g {:.3} d {:.3} r1 {:?} pl {:?}",
            r.step,
            t.elapsed().as_secs_f64(),
            r.loss_g,
            r.loss_d,
            r.r1,
            r.path_penalty
        );
    }
}
