//! Rough single-thread throughput of the convolution kernels.
use std::time::Instant;

use autograd::{grad, Tensor, Var};

fn main() {
    let (n, c, hw) = (16, 32, 32);
    let x = Var::param(Tensor::<f32>::from_fn(&[n, c, hw, hw], |i| {
        ((i % 17) as f32 - 8.0) * 0.1
    }));
    let w = Var::param(Tensor::<f32>::from_fn(&[c, c, 3, 3], |i| ((i % 7) as f32 - 3.0) * 0.05));
    let macs = (n * c * c * 9 * hw * hw) as f64;
    let reps = 20;
    let t = Instant::now();
    for _ in 0..reps {
        let _ = x.value().conv2d(w.value());
    }
    let fwd = t.elapsed().as_secs_f64() / reps as f64;
    let t = Instant::now();
    for _ in 0..reps {
        let y = x.conv2d(&w).square().sum();
        let _ = grad(&y, &[&x, &w], false);
    }
    let full = t.elapsed().as_secs_f64() / reps as f64;
    println!("forward {:.2} ms ({:.1} GFLOP/s)", fwd * 1e3, 2.0 * macs / fwd / 1e9);
    println!("fwd+bwd {:.2} ms ({:.1} GFLOP/s)", full * 1e3, 6.0 * macs / full / 1e9);
}
