//! Runs the database-code column sweeps on random relaxed codes and prints
//! the loss after each pass, with and without the bit-balance constraint.
//!
//! cargo run --release --example discrete_step

use erasehash::dataset::similarity_matrix;
use erasehash::discrete::{update_v, update_v_balanced, QFactor};
use erasehash::hash::BitCodeMatrix;
use erasehash::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> erasehash::Result<()> {
    let (n, r, k, classes) = (200, 40, 16, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let rows: Vec<usize> = (0..r).map(|_| rng.random_range(0..n)).collect();
    let s = similarity_matrix(&rows, &labels)?;
    let u = Tensor::from_fn(&[r, k], |_| rng.random_range(-1.0..1.0));

    let start = BitCodeMatrix::random_balanced(n, k, &mut rng)?;
    let mut free = start.clone();
    let report = update_v(&mut free, &u, &s, 4, QFactor::Exact)?;
    println!("unconstrained  losses {:?}", rounded(&report.losses));
    println!("               flips  {:?}", report.flips);

    let mut balanced = start;
    let report = update_v_balanced(&mut balanced, &u, &s, 4)?;
    println!("balanced       losses {:?}", rounded(&report.losses));
    println!("               flips  {:?}", report.flips);
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<i64> {
    v.iter().map(|x| x.round() as i64).collect()
}
