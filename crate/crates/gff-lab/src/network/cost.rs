//! Closed-form parameter and multiply-accumulate counts for one image.
//!
//! Convolutions cost `Cout * H' * W' * Cin * kh * kw`; bilinear resampling
//! costs 4 per output value and nothing when the size is unchanged. Other
//! pointwise work is not counted.

use super::layers::{Conv, ConvBnRelu};
use super::{Model, LEVELS};
use crate::fusion::FusionStrategy;
use crate::tensor::kernels::ConvGeom;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: usize,
    pub macs: usize,
}

type Size = (usize, usize);

fn conv_out(conv: &Conv, (h, w): Size) -> Size {
    let p = conv.padding();
    (
        ConvGeom::out_extent(h, conv.k, conv.stride, p, conv.dilation).unwrap_or(0),
        ConvGeom::out_extent(w, conv.k, conv.stride, p, conv.dilation).unwrap_or(0),
    )
}

fn resample(channels: usize, from: Size, to: Size) -> usize {
    if from == to {
        0
    } else {
        4 * channels * to.0 * to.1
    }
}

#[derive(Default)]
struct Tally {
    cost: Cost,
}

impl Tally {
    fn conv(&mut self, conv: &Conv, input: Size) -> Size {
        let out = conv_out(conv, input);
        self.cost.params += conv.param_count();
        self.cost.macs += conv.macs(out.0, out.1);
        out
    }

    fn block(&mut self, block: &ConvBnRelu, input: Size) -> Size {
        self.cost.params += block.bn.param_count();
        self.conv(&block.conv, input)
    }

    fn macs(&mut self, m: usize) {
        self.cost.macs += m;
    }
}

/// Counts for a single `h x w` image.
pub fn count_params_flops(model: &Model, h: usize, w: usize) -> Cost {
    let cfg = &model.config;
    let width = cfg.width;
    let mut t = Tally::default();

    let mut size = t.block(&model.backbone.stem, (h, w));
    let mut sizes = Vec::with_capacity(LEVELS);
    for [a, b] in &model.backbone.stages {
        size = t.block(a, size);
        size = t.block(b, size);
        sizes.push(size);
    }
    for (r, &s) in model.fusion.reductions.iter().zip(&sizes) {
        t.block(r, s);
    }

    let top = sizes[LEVELS - 1];
    for (&bin, conv) in model.ppm.bins.iter().zip(&model.ppm.branches) {
        t.conv(conv, (bin, bin));
        t.macs(resample(width, (bin, bin), top));
    }
    t.block(&model.ppm.merge, top);

    for (gate, &s) in model.fusion.gates.iter().zip(&sizes) {
        t.conv(gate, s);
    }
    for l in 0..LEVELS {
        let to = sizes[l];
        match cfg.fusion {
            FusionStrategy::Concat | FusionStrategy::Addition => {
                for &from in &sizes {
                    t.macs(resample(width, from, to));
                }
            }
            FusionStrategy::Fpn if l + 1 < LEVELS => t.macs(resample(width, sizes[l + 1], to)),
            FusionStrategy::GatedFpn if l + 1 < LEVELS => {
                t.macs(resample(width, sizes[l + 1], to) + resample(1, sizes[l + 1], to));
            }
            FusionStrategy::Gff => {
                for (i, &from) in sizes.iter().enumerate() {
                    if i != l {
                        t.macs(resample(width, from, to) + resample(1, from, to));
                    }
                }
            }
            _ => {}
        }
    }
    for (stack, &s) in model.fusion.refine.iter().zip(&sizes) {
        t.block(&stack[0], s);
        t.block(&stack[1], s);
    }

    let finest = sizes[0];
    match &model.dfp {
        Some(dfp) => {
            for (i, stage) in dfp.stages.iter().enumerate() {
                let to = sizes[i];
                if dfp.context {
                    t.macs(resample(width, top, to));
                }
                for &from in &sizes[crate::context::dfp_sources(i, dfp.literal)] {
                    t.macs(resample(width, from, to));
                }
                t.block(stage, to);
                t.macs(resample(width, to, finest));
            }
        }
        None => {
            t.macs(resample(width, top, finest));
            for &s in &sizes {
                t.macs(resample(width, s, finest));
            }
        }
    }
    let low = t.conv(&model.classifier, finest);
    t.macs(resample(cfg.classes, low, (h, w)));
    let aux = t.conv(&model.aux, sizes[2]);
    t.macs(resample(cfg.classes, aux, (h, w)));
    t.cost
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layers::Init;
    use crate::network::params::{Builder, ParamStore};
    use rand::SeedableRng;

    #[test]
    fn single_pointwise_conv() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let conv = Conv::new(&mut Builder::new(&mut store, &mut rng), 16, 32, 1, 1, 1, Init::FanIn);
        let mut t = Tally::default();
        t.conv(&conv, (8, 8));
        assert_eq!(t.cost, Cost { params: 544, macs: 32768 });
        assert_eq!(store.trainable_count(), 544);
    }
}
