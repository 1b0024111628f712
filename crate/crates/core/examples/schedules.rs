//! Prints the epsilon and kappa schedules of the MNIST preset at its normal
//! and 2.5x faster ramp.
//!
//! cargo run --example schedules

use ibp::trainer::TrainConfig;

fn main() {
    let normal = TrainConfig::mnist(0.4, 25);
    let fast = normal.clone().ramp_speedup(2.5);
    println!("{:>5} {:>9} {:>9} {:>9} {:>9}", "epoch", "eps", "kappa", "eps fast", "kappa fast");
    for epoch in 0..normal.epochs {
        println!(
            "{:>5} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            epoch + 1,
            normal.epsilon_schedule.value(epoch, 0.0),
            normal.kappa_schedule.value(epoch, 0.0),
            fast.epsilon_schedule.value(epoch, 0.0),
            fast.kappa_schedule.value(epoch, 0.0)
        );
    }
    println!(
        "ramp ends after epoch {} (normal) and {} (fast); learning rate {:?} per epoch",
        normal.epsilon_schedule.ramp_end(),
        fast.epsilon_schedule.ramp_end(),
        (0..normal.epochs).map(|e| normal.optimizer.lr_at(e)).collect::<Vec<_>>()
    );
}
