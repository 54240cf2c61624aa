//! Trains a GFF model briefly and exports each level's gate map as PGM,
//! with per-level gate statistics.
//!
//! cargo run --release --example gate_maps -- [iterations] [out_dir]

use gff_lab::config::ExperimentConfig;
use gff_lab::data::{generate_split, sample_id, Split};
use gff_lab::export::{gate_file_name, Gray};
use gff_lab::inspect::{gate_maps, gate_stats};
use gff_lab::network::Model;
use gff_lab::training::train;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default();
    cfg.set("iterations", &args.next().unwrap_or_else(|| "300".into()))?;
    let out = args.next().unwrap_or_else(|| "runs/gates".into());
    std::fs::create_dir_all(&out)?;

    let train_set = generate_split(&cfg.scene, Split::Train, cfg.train_samples)?;
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed)?;
    train(&model, &mut store, &train_set, &cfg.train, |_| {})?;

    let test_set = generate_split(&cfg.scene, Split::Test, 4)?;
    let mut all = Vec::new();
    for (i, s) in test_set.iter().enumerate() {
        let maps = gate_maps(&model, &store, s)?;
        for (l, m) in maps.iter().enumerate() {
            let &[h, w] = m.shape() else { unreachable!() };
            Gray::from_unit(h, w, m.data())?.save(format!("{out}/{}", gate_file_name(l + 1, &sample_id(Split::Test, i))))?;
        }
        all.push(maps);
    }
    for (l, st) in gate_stats(&all).iter().enumerate() {
        println!("level {}: mean {:.3} std {:.3}", l + 1, st.mean, st.std);
    }
    Ok(())
}
