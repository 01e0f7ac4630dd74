//! Inverts each hidden neuron in turn and reports its importance, the
//! relative accuracy drop, along with the variance across neurons.

use bittol::dataio::synth_blobs;
use bittol::metrics::{neuron_importance, ImportanceUnit};
use bittol::trainer::{train, TrainConfig};
use bittol::Architecture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synth_blobs(4, 1200, 16, 8.0, 0)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (tr, te) = (data.select(&idx[..1000]), data.select(&idx[1000..]));
    for ber in [0.0, 0.2] {
        let cfg = TrainConfig { epochs: 15, batch_size: 32, lr: 1e-2, ber_train: ber, seed: 1, ..TrainConfig::default() };
        let model = train(&Architecture::parse("In-FC16-FC16-4")?, &tr, None, &cfg, |_| {})?.model;
        let r = neuron_importance(&model, &te, ImportanceUnit::Neuron)?;
        println!("trained at BER {ber}: clean accuracy {:.3}", r.clean_accuracy);
        for (u, v) in r.units.iter().zip(&r.values).take(6) {
            println!("  layer {} neuron {:>2}: importance {v:+.4}", u.layer, u.neuron);
        }
        println!("  ... {} neurons, mean {:.4}, VAR {:.3e}", r.values.len(), r.mean, r.variance);
    }
    Ok(())
}
