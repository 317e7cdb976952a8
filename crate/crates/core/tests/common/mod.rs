#![allow(dead_code)]

use dualgan::data::{generate_dataset, Dataset, SyntheticSpec};
use dualgan::ModelConfig;

/// 8-pixel model small enough for debug-build training loops.
pub fn tiny() -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.n = 4;
    c.d = 16;
    c.heads = 2;
    c.layers = 2;
    c.resolution = 8;
    c.channel_schedule = "4:16,8:16".parse().unwrap();
    c.batch_size = 4;
    c.steps = 4;
    c.r1_interval = 2;
    c.path_interval = 2;
    c.extractor_steps = 10;
    c.extractor_batch = 8;
    c.fid_samples = 0;
    c.log_interval = 1;
    c.checkpoint_interval = 2;
    c.inv_batch_size = 2;
    c
}

pub fn tiny_dataset(count: usize) -> Dataset {
    let spec = SyntheticSpec {
        resolution: 8,
        ..SyntheticSpec::default()
    };
    generate_dataset(&spec, count, 5).unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
