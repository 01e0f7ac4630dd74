//! Folds batch norm followed by sign into an integer threshold and a
//! direction, then checks the folded neuron against the float reference for
//! every integer pre-activation in range. Includes a negative scale.

use bittol::model::{batchnorm_sign, fold_batchnorm, threshold_activation, BatchNormParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bn = BatchNormParams {
        gamma: vec![0.8, -1.3, 2.0, 0.05],
        beta: vec![0.1, 0.4, -0.7, 0.0],
        mean: vec![3.2, -1.5, 0.0, 7.5],
        var: vec![4.0, 2.25, 9.0, 1.0],
        eps: 1e-5,
    };
    let folded = fold_batchnorm(&bn)?;
    for (n, &(s, d)) in folded.iter().enumerate() {
        let mismatches = (-64..=64)
            .filter(|&h| {
                let reference = batchnorm_sign(h as f64, bn.gamma[n], bn.beta[n], bn.mean[n], bn.var[n], bn.eps);
                threshold_activation(h, s, d) != reference
            })
            .count();
        println!("neuron {n}: gamma {:>5}  threshold {s:>3}  {d:?}  mismatches over h in -64..=64: {mismatches}", bn.gamma[n]);
    }
    Ok(())
}
