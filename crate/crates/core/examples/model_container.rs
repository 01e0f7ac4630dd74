//! Round-trips a random convolutional BNN through the binary container and
//! shows that a corrupted byte is caught by the checksum.

use bittol::dataio::{decode_model, encode_model};
use bittol::{Architecture, BnnModel, Shape3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let arch = Architecture::parse("In-C16-MP2-C16-MP2-FC64-10")?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = BnnModel::random(&arch, Shape3::new(1, 28, 28), 255, &mut rng)?;

    let bytes = encode_model(&model);
    let back = decode_model(&bytes)?;
    println!("{arch}: {} bytes, round trip equal: {}", bytes.len(), back == model);

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x10;
    match decode_model(&bad) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted container rejected: {e}"),
    }
    Ok(())
}
