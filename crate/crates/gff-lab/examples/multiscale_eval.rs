//! Briefly trains a model, then compares single-scale and multi-scale
//! (0.75..1.75) inference on the test split.
//!
//! cargo run --release --example multiscale_eval -- [iterations]

use gff_lab::config::ExperimentConfig;
use gff_lab::data::{generate_split, Split};
use gff_lab::network::Model;
use gff_lab::training::{evaluate, train, EvalOptions};

fn main() -> gff_lab::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.set("iterations", &std::env::args().nth(1).unwrap_or_else(|| "300".into()))?;
    let train_set = generate_split(&cfg.scene, Split::Train, cfg.train_samples)?;
    let test_set = generate_split(&cfg.scene, Split::Test, 32)?;
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed)?;
    train(&model, &mut store, &train_set, &cfg.train, |_| {})?;
    for (name, opts) in [("single scale", EvalOptions::default()), ("multi scale", EvalOptions::multiscale())] {
        let cm = evaluate(&model, &store, &test_set, &opts)?.confusion;
        println!("{name:<13} mIoU {:.4}  pixel acc {:.4}", cm.miou()?, cm.pixel_acc()?);
    }
    Ok(())
}
