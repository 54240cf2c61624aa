//! Finite-difference gradient checks for every differentiable op and for a
//! micro end-to-end model.
//!
//! cargo run --example gradcheck

use gff_lab::checks;

fn main() -> gff_lab::Result<()> {
    for (name, r) in checks::op_suite(0)? {
        println!("{name:<30} {:>5} coords  {:.2e}", r.coordinates, r.max_rel_error);
    }
    let m = checks::micro_model_gradcheck(0)?;
    println!("micro model: {:.2e} over {} coords, {} skipped across relu kinks", m.max_rel_error, m.coordinates, m.kinked);
    println!("{}", if m.passes(checks::TOLERANCE) { "ok" } else { "FAILED" });
    Ok(())
}
