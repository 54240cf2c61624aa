//! Trains a GFF model briefly, then forces the gates of each level (and of all
//! levels) to zero and reports changed pixels and per-class IoU deltas.
//!
//! cargo run --release --example gate_ablation -- [iterations]

use gff_lab::config::ExperimentConfig;
use gff_lab::data::{generate_split, Split, CLASS_NAMES};
use gff_lab::inspect::{ablate, zero_gates};
use gff_lab::network::Model;
use gff_lab::training::{train, EvalOptions};

fn main() -> gff_lab::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.set("iterations", &std::env::args().nth(1).unwrap_or_else(|| "300".into()))?;
    let train_set = generate_split(&cfg.scene, Split::Train, cfg.train_samples)?;
    let test_set = generate_split(&cfg.scene, Split::Test, cfg.test_samples)?;
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed)?;
    train(&model, &mut store, &train_set, &cfg.train, |_| {})?;

    println!("{:<6} {:>9} {}", "level", "changed", CLASS_NAMES.join(" "));
    let cases: Vec<(String, Vec<usize>)> = (0..4).map(|l| ((l + 1).to_string(), vec![l])).chain([("all".into(), vec![])]).collect();
    for (tag, levels) in cases {
        let report = ablate(&model, &store, &test_set, &zero_gates(&model, &levels)?, &EvalOptions::default())?;
        let deltas: Vec<String> = report.iou_delta()?.iter().map(|d| d.map_or("n/a".into(), |d| format!("{d:+.4}"))).collect();
        println!("{tag:<6} {:>8.2}% {}", 100.0 * report.changed_fraction(), deltas.join(" "));
    }
    Ok(())
}
