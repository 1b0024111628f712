//! Rotating a box by 45 degrees again and again: interval propagation
//! grows the box by sqrt(2) per step while the exact image stays put.
//!
//! cargo run --example wrapping_effect [steps]

use ibp::interval::wrapping_demo;

fn main() -> ibp::Result<()> {
    let steps = std::env::args().nth(1).map_or(10, |s| s.parse().expect("steps must be an integer"));
    println!("{:>4} {:>14} {:>14} {:>8}", "step", "interval", "exact", "growth");
    for s in wrapping_demo(steps)? {
        println!("{:>4} {:>14.6} {:>14.6} {:>8.6}", s.step, s.interval_half_width, s.exact_half_width, s.growth);
    }
    Ok(())
}
