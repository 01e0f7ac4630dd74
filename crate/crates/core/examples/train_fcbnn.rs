//! Trains a small fully connected BNN on FashionMNIST, with or without
//! training-time bit flips, then prints clean and corrupted test accuracy.
//!
//! ```text
//! cargo run --release --example train_fcbnn -- [data-dir] [epochs] [ber-train] [seed] [arch]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use bittol::dataio::load_fashion_dir;
use bittol::fault::FaultScope;
use bittol::metrics::{accuracy_under_ber, dataset_tolerance, BGrid};
use bittol::trainer::{train, TrainConfig};
use bittol::Architecture;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let dir = PathBuf::from(arg(0, "data/fashion"));
    let cfg = TrainConfig {
        epochs: arg(1, "10").parse()?,
        ber_train: arg(2, "0").parse()?,
        seed: arg(3, "1").parse()?,
        ..TrainConfig::default()
    };
    let arch = Architecture::parse(&arg(4, "In-FC8-FC8-10"))?;

    let (train_set, test_set) = load_fashion_dir(&dir)?;
    let start = Instant::now();
    let out = train(&arch, &train_set, Some(&test_set), &cfg, |e| {
        println!(
            "epoch {:3}  lr {:.2e}  loss {:.4}  train {:.4}  test {:.4}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.train_acc,
            e.test_acc.unwrap_or(f64::NAN)
        );
    })?;
    println!("trained {arch} in {:.1}s", start.elapsed().as_secs_f64());

    let tol = dataset_tolerance(&out.model, &test_set, &BGrid::default())?;
    println!("T = {:?}  T̄ = {:.4}", tol.tuple, tol.tbar);
    for p in [0.0, 0.1, 0.2] {
        let r = accuracy_under_ber(&out.model, &test_set, p, 3, cfg.seed, FaultScope::Weights)?;
        println!("accuracy at BER {p:.2}: {:.4}", r.mean);
    }
    Ok(())
}
