//! Trains the desk preset with a chosen fusion strategy and reports test mIoU.
//! The full 2000-iteration schedule takes several minutes per core.
//!
//! cargo run --release --example train_desk -- [iterations] [fusion]

use gff_lab::config::ExperimentConfig;
use gff_lab::data::{generate_split, Split, CLASS_NAMES};
use gff_lab::network::Model;
use gff_lab::training::{evaluate, train, EvalOptions};

fn main() -> gff_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default();
    if let Some(n) = args.next() {
        cfg.set("iterations", &n)?;
    }
    if let Some(f) = args.next() {
        cfg.set("fusion", &f)?;
    }
    let train_set = generate_split(&cfg.scene, Split::Train, cfg.train_samples)?;
    let test_set = generate_split(&cfg.scene, Split::Test, cfg.test_samples)?;
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed)?;
    let every = (cfg.train.iterations / 10).max(1);
    let log = train(&model, &mut store, &train_set, &cfg.train, |r| {
        if r.iter % every == 0 {
            println!("iter {:>5}  lr {:.2e}  loss {:.4}", r.iter, r.lr, r.loss_total);
        }
    })?;
    println!("final loss {:.4}", log.last().map_or(f64::NAN, |r| r.loss_total));
    let ev = evaluate(&model, &store, &test_set, &EvalOptions::default())?;
    print!("{}", ev.confusion.to_csv(&CLASS_NAMES)?);
    Ok(())
}
