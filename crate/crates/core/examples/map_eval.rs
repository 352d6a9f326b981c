//! Scores rankings with average precision, then evaluates random codes on
//! the default benchmark to show the chance-level MAP.
//!
//! cargo run --release --example map_eval

use erasehash::dataset::{generate, GenConfig};
use erasehash::eval::{average_precision, report_from_runs, retrieval_runs};
use erasehash::hash::BitCodeMatrix;
use erasehash::index::HammingIndex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> erasehash::Result<()> {
    for flags in [vec![true, false, true, false], vec![false, false, true], vec![true; 3]] {
        println!("{flags:?} -> AP {:.4}", average_precision(&flags));
    }

    let dataset = generate(&GenConfig::default(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let k = 16;
    let db_labels = dataset.database_labels();
    let index = HammingIndex::build(BitCodeMatrix::random(db_labels.len(), k, &mut rng)?, db_labels)?;
    let query_ids = dataset.query_ids();
    let query_labels: Vec<usize> = query_ids.iter().map(|&i| dataset.labels[i]).collect();
    let codes = BitCodeMatrix::random(query_ids.len(), k, &mut rng)?;
    let runs = retrieval_runs(&index, &codes, &query_labels, &query_ids, None)?;
    let report = report_from_runs(&runs, index.len())?;
    println!("random {k}-bit codes: MAP {:.4} over {} queries", report.map, runs.len());
    Ok(())
}
