//! Accuracy of a model over a range of bit error rates, several trials each.
//!
//! ```text
//! cargo run --release --example ber_sweep -- [model.bnn data-dir]
//! ```

use std::path::Path;

use bittol::dataio::{load_fashion_dir, load_model, synth_blobs};
use bittol::fault::FaultScope;
use bittol::metrics::ber_sweep;
use bittol::trainer::{train, TrainConfig};
use bittol::Architecture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, test) = if let [model, dir] = args.as_slice() {
        (load_model(Path::new(model))?, load_fashion_dir(Path::new(dir))?.1)
    } else {
        let data = synth_blobs(4, 1200, 16, 8.0, 0)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let (tr, te) = (data.select(&idx[..1000]), data.select(&idx[1000..]));
        let cfg = TrainConfig { epochs: 15, batch_size: 32, lr: 1e-2, seed: 1, ..TrainConfig::default() };
        (train(&Architecture::parse("In-FC32-FC32-4")?, &tr, None, &cfg, |_| {})?.model, te)
    };
    let bers = [0.0, 0.01, 0.05, 0.1, 0.2, 0.3];
    for scope in [FaultScope::Weights, FaultScope::WeightsAndActivations] {
        println!("{scope:?}");
        for r in ber_sweep(&model, &test, &bers, 10, 3, scope)? {
            let lo = r.per_trial.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = r.per_trial.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!("  ber {:<5} mean {:.4}  range [{lo:.4}, {hi:.4}]", r.p, r.mean);
        }
    }
    Ok(())
}
