//! Generates a few toy street scenes, prints per-class pixel shares and writes
//! the label maps as PGM images (class k at gray level 60k).
//!
//! cargo run --example synth_scenes -- [out_dir]

use gff_lab::data::{self, SceneSpec, CLASS_NAMES};
use gff_lab::export::Gray;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/scenes".into());
    std::fs::create_dir_all(&out)?;
    let spec = SceneSpec::default();
    let scenes = data::generate(&spec, 8)?;
    let counts = data::class_pixel_counts(&scenes, CLASS_NAMES.len());
    let total = counts.iter().sum::<u64>() as f64;
    for (name, c) in CLASS_NAMES.iter().zip(&counts) {
        println!("{name:<11} {:6.2}%", 100.0 * *c as f64 / total);
    }
    for (i, s) in scenes.iter().enumerate() {
        let pixels = s.labels.data.iter().map(|&l| l * 60).collect();
        let img = Gray { width: s.width(), height: s.height(), pixels };
        img.save(format!("{out}/labels_{i}.pgm"))?;
    }
    println!("wrote {} label maps to {out}", scenes.len());
    Ok(())
}
