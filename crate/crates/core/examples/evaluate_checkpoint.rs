//! Reports nominal, PGD and verified error of a checkpoint on the test
//! split it was trained against. Without an argument a short synthetic run
//! produces the checkpoint first.
//!
//! cargo run --release --example evaluate_checkpoint [path.ibpc] [epsilon]

use std::path::PathBuf;

use ibp::attack::AttackConfig;
use ibp::data::{synthetic, Split};
use ibp::network::{preset, Network};
use ibp::trainer::{evaluate, train, TrainConfig};

fn main() -> ibp::Result<()> {
    let mut args = std::env::args().skip(1);
    let test = synthetic(200, 0, Split::Test);
    let path = match args.next() {
        Some(p) => PathBuf::from(p),
        None => {
            let dir = std::env::temp_dir().join("ibp-evaluate-example");
            let cfg = TrainConfig::with_ramp(0.1, 6, 1.0, 3.0);
            let net = Network::init(preset("tiny", [1, 8, 8], 2)?, 0)?;
            train(net, &synthetic(400, 0, Split::Train), &test, &cfg, Some(&dir))?;
            dir.join("final.ibpc")
        }
    };
    let eps: f64 = args.next().map_or(0.1, |s| s.parse().expect("epsilon must be a number"));
    let attack = AttackConfig {
        iterations: 50,
        restarts: 3,
        ..AttackConfig::new(eps)
    };
    print!("{}", evaluate(&path, &test, eps, Some(&attack))?.to_text());
    Ok(())
}
