//! Parameter and multiply-accumulate counts for baseline, +GFF and +GFF+DFP,
//! at desk width and at the 256-channel width.
//!
//! cargo run --example cost_table -- [size]

use gff_lab::cli::{cost_table, format_cost_table};
use gff_lab::network::ModelConfig;

fn main() -> gff_lab::Result<()> {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(512);
    for (name, base) in [("desk", ModelConfig::desk()), ("full width", ModelConfig::full_width())] {
        println!("{name}");
        print!("{}", format_cost_table(&cost_table(&base, size, size)?, size, size));
        let gates = base.stage_widths.len() * (base.width + 1);
        println!("gate convs add {gates} parameters\n");
    }
    Ok(())
}
