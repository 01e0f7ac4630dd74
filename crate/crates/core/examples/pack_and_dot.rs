//! Packs ±1 vectors into words and checks the XNOR/popcount dot product
//! against the plain integer sum, including a length that straddles a word.

use bittol::bitcore::{xnor_popcount_dot, BitMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [5, 63, 64, 65, 200] {
        let w: Vec<i8> = (0..n).map(|_| if rng.gen() { 1 } else { -1 }).collect();
        let x: Vec<i8> = (0..n).map(|_| if rng.gen() { 1 } else { -1 }).collect();
        let pw = BitMatrix::pack_signs(&w, 1, n)?;
        let px = BitMatrix::pack_signs(&x, 1, n)?;
        let packed = xnor_popcount_dot(pw.row(0), px.row(0))?;
        let plain: i64 = w.iter().zip(&x).map(|(a, b)| (*a as i64) * (*b as i64)).sum();
        println!("n = {n:>3}  words = {}  packed {packed:>4}  plain {plain:>4}", pw.stride());
        assert_eq!(packed, plain);
    }
    Ok(())
}
