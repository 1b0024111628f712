//! Propagates an l∞ box through a small random network and checks that
//! sampled inputs from the box never leave the computed bounds.
//!
//! cargo run --example soundness_check [epsilon]

use ibp::interval::input_interval;
use ibp::network::{preset, Network};
use ibp::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ibp::Result<()> {
    let eps: f64 = std::env::args().nth(1).map_or(0.1, |s| s.parse().expect("epsilon must be a number"));
    let net = Network::<f64>::init(preset("tiny", [1, 8, 8], 2)?, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[1, 8, 8], |_| rng.gen_range(0.0..1.0))?;
    let bounds = net.forward_interval(&input_interval(&x, eps, None)?)?;

    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let p = Tensor::from_fn(&[1, 8, 8], |i| x.data()[i] + rng.gen_range(-eps..=eps))?;
        for (layer, act) in bounds.layers.iter().zip(net.forward_trace(&p)?) {
            let (lo, hi) = (layer.bounds.lower().data(), layer.bounds.upper().data());
            for (k, v) in act.data().iter().enumerate() {
                worst = worst.max(lo[k] - v).max(v - hi[k]);
            }
        }
    }
    for (i, layer) in bounds.layers.iter().enumerate() {
        let (lo, hi) = (layer.bounds.lower().data(), layer.bounds.upper().data());
        let mean_width = lo.iter().zip(hi).map(|(l, h)| h - l).sum::<f64>() / lo.len() as f64;
        println!("layer {i}: {} units, mean width {mean_width:.4}", lo.len());
    }
    println!("largest bound violation over 1000 samples: {worst:.3e} (negative means strictly inside)");
    Ok(())
}
