//! Converts the per-class JSON dump shipped in the `fashion-mnist` npm
//! package into the four standard IDX files.
//!
//! ```text
//! npm pack fashion-mnist@1.1.0 && tar xzf fashion-mnist-1.1.0.tgz
//! cargo run --release --example import_fashion_npm -- package/src/clothes data/fashion
//! ```
//!
//! Each `k.json` holds `{"data": [[784 pixels], ...]}` for class `k`. The
//! first 6000 images of a class go to the training split, the next 1000 to
//! the test split, and anything beyond 7000 is dropped. Empty entries are
//! skipped. Both splits are
//! shuffled with a fixed seed so classes are interleaved.

use std::path::PathBuf;

use bittol::dataio::{write_idx, Dataset, Split};
use bittol::fault::{Domain, StreamId};
use bittol::Shape3;
use rand::seq::SliceRandom;
use serde::Deserialize;

const TRAIN_PER_CLASS: usize = 6000;
const TEST_PER_CLASS: usize = 1000;

#[derive(Deserialize)]
struct ClassDump {
    data: Vec<Vec<u8>>,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let src = PathBuf::from(args.next().ok_or("usage: import_fashion_npm <clothes-dir> <out-dir>")?);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "data/fashion".into()));
    std::fs::create_dir_all(&out)?;

    let mut train: Vec<(Vec<u8>, u8)> = Vec::new();
    let mut test: Vec<(Vec<u8>, u8)> = Vec::new();
    for class in 0..10u8 {
        let text = std::fs::read_to_string(src.join(format!("{class}.json")))?;
        let mut dump: ClassDump = serde_json::from_str(&text)?;
        // the class-0 file carries two empty placeholder entries
        dump.data.retain(|img| !img.is_empty());
        if dump.data.len() < TRAIN_PER_CLASS + TEST_PER_CLASS {
            return Err(format!("class {class}: only {} images", dump.data.len()).into());
        }
        for (i, img) in dump.data.into_iter().take(TRAIN_PER_CLASS + TEST_PER_CLASS).enumerate() {
            if img.len() != 28 * 28 {
                return Err(format!("class {class} image {i}: {} pixels", img.len()).into());
            }
            let dst = if i < TRAIN_PER_CLASS { &mut train } else { &mut test };
            dst.push((img, class));
        }
    }

    for (name, mut rows, split, salt) in [("train", train, Split::Train, 0), ("t10k", test, Split::Test, 1)] {
        rows.shuffle(&mut StreamId::derive(0, Domain::Shuffle, u64::MAX, salt, 0).rng());
        let labels = rows.iter().map(|r| r.1).collect();
        let images = rows.into_iter().flat_map(|r| r.0).collect();
        let data = Dataset::new(Shape3::new(1, 28, 28), 10, 255, split, images, labels)?;
        write_idx(
            &data,
            &out.join(format!("{name}-images-idx3-ubyte")),
            &out.join(format!("{name}-labels-idx1-ubyte")),
        )?;
        println!("{name}: {} images", data.len());
    }
    Ok(())
}
