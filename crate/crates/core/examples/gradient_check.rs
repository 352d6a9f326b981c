//! Compares the analytic convolution gradient with central differences.
//!
//! cargo run --release --example gradient_check

use erasehash::{ops, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss(x: &Tensor, k: &Tensor, weights: &[f64]) -> f64 {
    let y = ops::conv2d(x, k, 1, 1).unwrap();
    y.data().iter().zip(weights).map(|(a, b)| a * b).sum()
}

fn main() -> erasehash::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut x = Tensor::from_fn(&[2, 6, 6], |_| rng.random_range(-1.0..1.0)).with_grad();
    let mut k = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-1.0..1.0)).with_grad();
    let out_len = ops::conv2d(&x, &k, 1, 1)?.len();
    let weights: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();

    ops::conv2d_backward(&mut x, &mut k, 1, 1, &weights)?;
    let analytic = k.grad().unwrap().to_vec();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, &exact) in analytic.iter().enumerate() {
        let mut plus = k.clone();
        plus.data_mut()[i] += h;
        let mut minus = k.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss(&x, &plus, &weights) - loss(&x, &minus, &weights)) / (2.0 * h);
        worst = worst.max((numeric - exact).abs() / numeric.abs().max(1.0));
    }
    println!("conv2d kernel gradient: {} entries, worst relative error {worst:.2e}", k.len());
    Ok(())
}
