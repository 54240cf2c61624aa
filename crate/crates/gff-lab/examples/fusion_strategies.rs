//! Runs the five fusion strategies on one random pyramid and prints how far
//! each fused level moves from its input, plus the two-level GFF worked example.
//!
//! cargo run --example fusion_strategies

use gff_lab::fusion::{self, FeaturePyramid, FusionStrategy};
use gff_lab::network::cost::count_params_flops;
use gff_lab::network::{Model, ModelConfig};
use gff_lab::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> gff_lab::Result<()> {
    // X = (1, 2), G = (0.5, 0.25) on 1x1 maps
    let mut g = Graph::<f64>::new();
    let mut c = |v| g.constant(Tensor::full(&[1, 1, 1, 1], v));
    let (x1, x2, g1, g2) = (c(1.0), c(2.0), c(0.5), c(0.25));
    let p = FeaturePyramid::new(&g, vec![x1, x2])?;
    let fused = fusion::gff(&mut g, &p, &[g1, g2])?;
    println!("gff worked example: {} {}", g.value(fused[0]).data()[0], g.value(fused[1]).data()[0]);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::<f64>::new();
    let levels: Vec<_> = [32, 16, 8, 8].iter().map(|&s| g.constant(Tensor::from_fn(&[1, 8, s, s], |_| rng.gen_range(-1.0..1.0)))).collect();
    let p = FeaturePyramid::new(&g, levels.clone())?;
    let gates: Vec<_> = levels
        .iter()
        .map(|&x| {
            let [n, _, h, w] = g.dims4(x).unwrap();
            g.constant(Tensor::from_fn(&[n, 1, h, w], |_| rng.gen_range(0.0..1.0)))
        })
        .collect();
    let outputs = [
        ("addition", (0..4).map(|l| fusion::addition_at(&mut g, &p, l)).collect::<gff_lab::Result<Vec<_>>>()?),
        ("fpn", fusion::fpn(&mut g, &p)?),
        ("gated_fpn", fusion::gated_fpn(&mut g, &p, &gates)?),
        ("gff", fusion::gff(&mut g, &p, &gates)?),
    ];
    for (name, fused) in outputs {
        let shift: Vec<String> = fused
            .iter()
            .zip(&levels)
            .map(|(&f, &x)| {
                let d = g.value(f).data().iter().zip(g.value(x).data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
                format!("{:.3}", d / g.value(x).numel() as f64)
            })
            .collect();
        println!("{name:<10} mean |fused - input| per level: {}", shift.join(" "));
    }

    println!("\ndesk model cost at 64x64, dense pyramid on:");
    for fusion in FusionStrategy::ALL {
        let (model, _) = Model::build::<f32>(&ModelConfig::desk().with_fusion(fusion, true), 0)?;
        let c = count_params_flops(&model, 64, 64);
        println!("{:<10} {:>8} params {:>11} MACs", fusion.name(), c.params, c.macs);
    }
    Ok(())
}
