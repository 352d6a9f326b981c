//! Builds a Hamming index over random codes and lists the nearest neighbours
//! of a perturbed database code.
//!
//! cargo run --release --example hamming_search

use erasehash::hash::{pack, BitCodeMatrix};
use erasehash::index::HammingIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> erasehash::Result<()> {
    let (n, k) = (10_000, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let codes = BitCodeMatrix::random(n, k, &mut rng)?;
    let labels = (0..n).map(|i| i % 100).collect();
    let index = HammingIndex::build(codes, labels)?;

    let target = 4321;
    let mut query = index.codes().row_signs(target);
    for _ in 0..3 {
        let bit = rng.random_range(0..k);
        query[bit] = -query[bit];
    }
    for hit in index.query_topk(&pack(&query)?, 5)? {
        println!("id {:5}  distance {:2}  label {}", hit.id, hit.distance, index.labels()[hit.id]);
    }
    Ok(())
}
