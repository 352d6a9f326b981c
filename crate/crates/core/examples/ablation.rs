//! Trains a small model over a grid of eraser settings and prints MAP.
//!
//! cargo run --release --example ablation

use erasehash::dataset::{generate, GenConfig};
use erasehash::eval::evaluate;
use erasehash::index::HammingIndex;
use erasehash::trainer::{train, TrainConfig, TrainOptions};

fn main() -> erasehash::Result<()> {
    let gen = GenConfig { classes: 5, per_class: 30, ..GenConfig::default() };
    let dataset = generate(&gen, 0)?;
    let base = TrainConfig { r: 60, iterations: 4, lr_milestones: vec![3], ..TrainConfig::default() };

    let lengths = [3, 5, 9];
    println!("n_e\\l {}", lengths.map(|l| format!("{l:>7}")).join(""));
    for n_e in [4, 8] {
        let mut row = format!("{n_e:>5} ");
        for l in lengths {
            let config = TrainConfig { n_e, l, ..base.clone() };
            let out = train(&dataset, &config, &TrainOptions::default())?;
            let index = HammingIndex::build(out.v, dataset.database_labels())?;
            let map = evaluate(&index, &out.model, &dataset, None)?.map;
            row.push_str(&format!("{map:>7.4}"));
        }
        println!("{row}");
    }
    Ok(())
}
