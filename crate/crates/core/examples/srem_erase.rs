//! Trains briefly, then erases the most attended regions of one synthetic
//! image and writes the image, the attention map, the binary mask and the
//! erased copy as PGM/PPM files.
//!
//! cargo run --release --example srem_erase -- [out_dir]

use std::path::PathBuf;

use erasehash::dataset::{generate, GenConfig};
use erasehash::trainer::{train, TrainConfig, TrainOptions};
use erasehash::srem::{attention_for, make_erased, EraseConfig};
use erasehash::Tensor;

fn ppm(img: &Tensor) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((img.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn main() -> erasehash::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "srem_out".into()));
    std::fs::create_dir_all(&dir)?;
    let config = GenConfig::default();
    let dataset = generate(&config, 0)?;
    let short = TrainConfig { iterations: 3, epochs_per_iteration: 2, lr_milestones: vec![], ..TrainConfig::default() };
    let model = train(&dataset, &short, &TrainOptions::default())?.model;

    let x = dataset.image(dataset.query_ids()[0]);
    let a = model.feature_map(&x)?;
    let attention = attention_for(&x, &a, 1e-6)?;
    let (erased, mask) = make_erased(&x, &a, EraseConfig { n_e: 8, l: 5, epsilon: 1e-6 })?;

    let (h, w) = (attention.height(), attention.width());
    let mut heat = format!("P5\n{w} {h}\n255\n").into_bytes();
    heat.extend(attention.values.data().iter().map(|v| ((v - 1e-6) * 255.0).round() as u8));

    std::fs::write(dir.join("image.ppm"), ppm(&x))?;
    std::fs::write(dir.join("attention.pgm"), heat)?;
    std::fs::write(dir.join("mask.pgm"), mask.to_pgm())?;
    std::fs::write(dir.join("erased.ppm"), ppm(&erased))?;
    println!("anchors {:?}", mask.anchors);
    println!("{} of {} pixels erased; files in {}", mask.zero_count(), h * w, dir.display());
    Ok(())
}
