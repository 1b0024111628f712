//! Trains the small architecture on the vendored MNIST subset with the
//! fast epsilon ramp and writes metrics and checkpoints to an output dir.
//!
//! cargo run --release --example train_mnist_desk [ibp|constrained-ibp] [epochs] [out]

use std::path::{Path, PathBuf};

use ibp::data::load_mnist;
use ibp::loss::{LossConfig, Objective};
use ibp::network::{preset, Network};
use ibp::trainer::{train, TrainConfig};

fn main() -> ibp::Result<()> {
    let mut args = std::env::args().skip(1);
    let objective: Objective = args.next().as_deref().unwrap_or("constrained-ibp").parse()?;
    let epochs: usize = args.next().map_or(25, |s| s.parse().expect("epochs must be an integer"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/mnist-desk".into()));

    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-desk");
    let (tr, te) = load_mnist(&data)?;
    let mut cfg = TrainConfig::mnist(0.4, epochs).ramp_speedup(2.5);
    cfg.loss = match objective {
        Objective::Ibp => LossConfig::ibp(),
        // the unit weight collapses the network at this data scale
        Objective::ConstrainedIbp => LossConfig {
            lambda: 0.01,
            ..LossConfig::default()
        },
    };
    cfg.verbose = true;
    let net = Network::init(preset("small", [1, 28, 28], 10)?, cfg.seed)?;
    let result = train(net, &tr, &te, &cfg, Some(&out))?;
    let last = result.metrics.last().expect("at least one epoch");
    println!(
        "{objective}: test error {:.4}, verified error {:.4} at eps 0.4; outputs in {}",
        last.test_error,
        last.verified_test_error,
        out.display()
    );
    Ok(())
}
