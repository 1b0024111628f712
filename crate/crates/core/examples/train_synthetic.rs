//! Trains the tiny network on the procedural bar dataset with both
//! objectives and prints the per-epoch metrics side by side.
//!
//! cargo run --release --example train_synthetic

use ibp::data::{synthetic, Split};
use ibp::loss::LossConfig;
use ibp::network::{preset, Network};
use ibp::trainer::{train, TrainConfig};

fn main() -> ibp::Result<()> {
    let (tr, te) = (synthetic(400, 0, Split::Train), synthetic(200, 0, Split::Test));
    for loss in [LossConfig::ibp(), LossConfig::default()] {
        let mut cfg = TrainConfig::with_ramp(0.1, 10, 1.0, 4.0);
        cfg.loss = loss.clone();
        cfg.batch_size = 50;
        let net = Network::init(preset("tiny", [1, 8, 8], 2)?, 0)?;
        let out = train(net, &tr, &te, &cfg, None)?;
        println!("{}", loss.objective);
        println!("{:>5} {:>8} {:>10} {:>10} {:>12}", "epoch", "eps", "test err", "verified", "width sum");
        for m in &out.metrics {
            println!(
                "{:>5} {:>8.4} {:>10.4} {:>10.4} {:>12.4e}",
                m.epoch, m.epsilon, m.test_error, m.verified_test_error, m.width_sum
            );
        }
    }
    Ok(())
}
