//! Times one training-mode forward+backward of a 64x64 batch.
//!
//! cargo run --release -p abd-nn --example throughput -- <width> <depth> <batch>

use std::time::Instant;

use abd_nn::{ModelConfig, UNet, Variant};
use ndarray::Array4;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let (width, depth, batch) = (args.first().copied().unwrap_or(8), args.get(1).copied().unwrap_or(3), args.get(2).copied().unwrap_or(4));
    let cfg = ModelConfig { in_channels: 1, num_classes: 4, base_width: width, depth, init_seed: 0, variant: Variant::A };
    let mut net = UNet::<f32>::new(cfg).expect("valid config");
    let x = Array4::<f32>::from_shape_fn((batch, 1, 64, 64), |(b, _, y, x)| ((b + y * x) % 7) as f32 / 7.0);
    let reps = std::env::var("REPS").ok().and_then(|r| r.parse().ok()).unwrap_or(20);
    // the minimum is the least noisy statistic on a shared machine
    let mut per = f64::INFINITY;
    for _ in 0..reps {
        let start = Instant::now();
        let (logits, tape) = net.forward_train(x.view()).expect("forward");
        let d = Array4::from_elem(logits.dim(), 1e-3f32);
        net.backward(&tape, d.view()).expect("backward");
        per = per.min(start.elapsed().as_secs_f64());
    }
    println!("width {width} depth {depth} batch {batch}: {:.2} ms per fwd+bwd, {} params", per * 1e3, net.num_parameters());
}
