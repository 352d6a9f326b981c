//! Trains on the default synthetic benchmark and reports retrieval MAP.
//!
//! cargo run --release --example train_desk -- [key=value ...] [baseline]
//!
//! Keys are training-config fields, e.g. `lr=1e-3 seed=2 normalized=true`.

use std::time::Instant;

use erasehash::dataset::{generate, GenConfig};
use erasehash::eval::evaluate;
use erasehash::index::HammingIndex;
use erasehash::trainer::{train, TrainConfig, TrainOptions};

fn main() -> erasehash::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut fields = serde_json::to_value(TrainConfig::default())?;
    for arg in args.iter().filter(|a| a.contains('=')) {
        let (key, value) = arg.split_once('=').unwrap();
        let value = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.into()));
        fields[key] = value;
    }
    let mut config: TrainConfig = serde_json::from_value(fields)?;
    if args.iter().any(|a| a == "baseline") {
        config = config.baseline();
    }
    let dataset = generate(&GenConfig::default(), config.seed)?;
    let start = Instant::now();
    let out = train(&dataset, &config, &TrainOptions::default())?;
    for row in out.log.iter().filter(|r| r.epoch == 0 || r.epoch + 1 == config.epochs_per_iteration) {
        println!(
            "iter {:2} epoch {} l_sq {:10.2} l_self {:8.2} l_others {:8.2} total {:10.2}",
            row.iteration, row.epoch, row.l_sq, row.l_self, row.l_others, row.total
        );
    }
    let index = HammingIndex::build(out.v.clone(), dataset.database_labels())?;
    let report = evaluate(&index, &out.model, &dataset, None)?;
    println!(
        "MAP {:.4}  p@10 {:.4}  train {:.1}s",
        report.map,
        report.mean_p_at_10,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
