//! Samples per-read flip masks for a weight matrix and shows that each read
//! is reproducible from its stream id while different reads are independent.

use bittol::bitcore::apply_mask_xor;
use bittol::fault::{corrupted_read, sample_flip_mask_for, Domain, FaultConfig, StreamId};
use bittol::BitMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let weights = BitMatrix::from_fn(256, 784, |r, c| (r * 31 + c * 17) % 3 == 0);
    let bits = (weights.rows() * weights.cols()) as f64;
    let cfg = FaultConfig::new(0.05, 42)?;

    for trial in 0..3 {
        let id = StreamId::derive(cfg.seed, Domain::Inference, trial, 0, 0);
        let read = corrupted_read(&weights, &cfg, id)?;
        let again = corrupted_read(&weights, &cfg, id)?;
        println!(
            "trial {trial}: {:>6} bits flipped ({:.4}), reproducible: {}",
            read.hamming(&weights)?,
            read.hamming(&weights)? as f64 / bits,
            read == again
        );
    }

    let id = StreamId::derive(cfg.seed, Domain::Inference, 0, 0, 0);
    let mask = sample_flip_mask_for(&weights, cfg.p(), id)?;
    let twice = apply_mask_xor(&apply_mask_xor(&weights, &mask)?, &mask)?;
    println!("applying the same mask twice restores the weights: {}", twice == weights);
    Ok(())
}
