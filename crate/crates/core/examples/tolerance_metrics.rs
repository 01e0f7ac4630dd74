//! Computes the tolerance tuple and T-bar of a trained model on its test set.
//! Trains a quick model on synthetic blobs unless a model file is given.
//!
//! ```text
//! cargo run --release --example tolerance_metrics -- [model.bnn data-dir]
//! ```

use std::path::Path;

use bittol::dataio::{load_fashion_dir, load_model, synth_blobs};
use bittol::metrics::{dataset_tolerance, position_tolerance, BGrid};
use bittol::trainer::{train, TrainConfig};
use bittol::Architecture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // one position, by hand: h = 7, s = 2 in a hidden layer
    let t = position_tolerance(7, 2, false, 255);
    println!("h = 7, s = 2: T = {}/{} = {}", t.numer, t.denom, t.value());

    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, test) = if let [model, dir] = args.as_slice() {
        (load_model(Path::new(model))?, load_fashion_dir(Path::new(dir))?.1)
    } else {
        let data = synth_blobs(4, 1200, 16, 8.0, 0)?;
        let idx: Vec<usize> = (0..data.len()).collect();
        let (tr, te) = (data.select(&idx[..1000]), data.select(&idx[1000..]));
        let cfg = TrainConfig { epochs: 15, batch_size: 32, lr: 1e-2, seed: 1, ..TrainConfig::default() };
        (train(&Architecture::parse("In-FC16-FC16-4")?, &tr, None, &cfg, |_| {})?.model, te)
    };

    let grid = BGrid::default();
    let report = dataset_tolerance(&model, &test, &grid)?;
    for (b, t) in grid.values().iter().zip(&report.tuple) {
        println!("T^{b:<3} = {t:.4}");
    }
    println!("T-bar = {:.4} over {} inputs and {} neurons", report.tbar, report.per_input.len(), report.per_neuron.len());
    Ok(())
}
