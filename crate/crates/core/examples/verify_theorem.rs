//! Exhaustively certifies the flip-tolerance bound on random small neurons:
//! whenever a position tolerance is at least `b`, no set of `⌊b/2⌋` weight
//! (or input) flips changes the neuron's output.
//!
//! ```text
//! cargo run --release --example verify_theorem
//! ```

use std::time::Instant;

use bittol::oracle::{run_theorem_harness, FlipTarget, HarnessConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let configs = [
        ("hidden, weight flips", HarnessConfig::default()),
        (
            "hidden, input flips",
            HarnessConfig {
                target: FlipTarget::Inputs,
                ..HarnessConfig::default()
            },
        ),
        (
            "first layer, Z = 3",
            HarnessConfig {
                first_layer: true,
                z: 3,
                ..HarnessConfig::default()
            },
        ),
    ];
    for (name, cfg) in configs {
        let start = Instant::now();
        let r = run_theorem_harness(&cfg)?;
        println!(
            "{name:22} checked {:>9}  skipped {:>9}  witnesses {}  bound not tight {}  ({:.1}s)",
            r.checked,
            r.skipped,
            r.witnesses.len(),
            r.bound_not_tight,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
