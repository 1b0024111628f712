//! PGD against a two-class linear model, where the worst case in the box
//! is known in closed form: move each pixel by epsilon against the sign of
//! the margin weight.
//!
//! cargo run --example pgd_attack

use ibp::attack::{pgd_attack, AttackConfig};
use ibp::network::{LayerSpec, Network, NetworkSpec};
use ibp::Tensor;

fn main() -> ibp::Result<()> {
    // logits (w.x, -w.x): the margin of class 0 is 2 w.x
    let w = [1.0f32, -0.5];
    let spec = NetworkSpec::new([1, 1, 2], vec![LayerSpec::Flatten, LayerSpec::dense(2)], 2);
    let weights = Tensor::new(&[2, 2], vec![w[0], w[1], -w[0], -w[1]])?;
    let net = Network::from_parameters(spec, vec![weights, Tensor::zeros(&[2])?])?;

    let x = Tensor::new(&[1, 1, 2], vec![0.7f32, 0.4])?;
    for eps in [0.0, 0.1, 0.2, 0.3] {
        let cfg = AttackConfig {
            iterations: 50,
            restarts: 2,
            ..AttackConfig::new(eps)
        };
        let (adv, broken) = pgd_attack(&net, &x, 0, &cfg)?;
        let optimum: Vec<f32> = x.data().iter().zip(w).map(|(v, w)| (v - eps as f32 * w.signum()).clamp(0.0, 1.0)).collect();
        let margin = 2.0 * (w[0] * adv.data()[0] + w[1] * adv.data()[1]);
        println!(
            "eps {eps:.1}: attack point {:?}, closed form {optimum:?}, margin {margin:.3}, broken {broken}",
            adv.data()
        );
    }
    Ok(())
}
