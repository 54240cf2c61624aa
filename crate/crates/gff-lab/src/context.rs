//! Context modules: pyramid pooling on the coarsest level, and the dense
//! feature pyramid that follows fusion.

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::layers::{Conv, ConvBnRelu, Init};
use crate::network::params::{Builder, Ctx};
use crate::tensor::{Graph, Scalar, Var};

pub const DEFAULT_BINS: [usize; 4] = [1, 2, 3, 6];

/// Pyramid pooling: pooled branches at several grid sizes, upsampled and
/// merged with the input.
#[derive(Clone, Debug)]
pub struct Ppm {
    pub bins: Vec<usize>,
    pub branches: Vec<Conv>,
    pub merge: ConvBnRelu,
    pub width: usize,
}

impl Ppm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, width: usize, bins: &[usize]) -> Result<Self> {
        if bins.is_empty() || bins.windows(2).any(|w| w[0] >= w[1]) || bins[0] == 0 {
            return Err(Error::Config(format!("pyramid pooling bins must be strictly increasing and positive, got {bins:?}")));
        }
        let branches = bins
            .iter()
            .map(|&bin| b.scoped(&format!("bin{bin}"), |b| Conv::new(b, width, width, 1, 1, 1, Init::FanInRelu)))
            .collect();
        let merge = b.scoped("merge", |b| ConvBnRelu::new(b, width * (bins.len() + 1), width, 3, 1, 1));
        Ok(Ppm { bins: bins.to_vec(), branches, merge, width })
    }

    /// Pooled, projected and upsampled branches (before the merge), in bin order.
    pub fn branches<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let [_, _, h, w] = ctx.g.dims4(x)?;
        let mut out = Vec::with_capacity(self.bins.len());
        for (&bin, conv) in self.bins.iter().zip(&self.branches) {
            if bin > h || bin > w {
                return Err(Error::Invalid(format!("pooling bin {bin} exceeds top level {h}x{w}")));
            }
            let pooled = ctx.g.avg_pool(x, bin, bin)?;
            let projected = conv.forward(ctx, pooled)?;
            out.push(ctx.g.resample(projected, h, w)?);
        }
        Ok(out)
    }

    /// Context feature `y_0` at the input's spatial size and the module width.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut parts = vec![x];
        parts.extend(self.branches(ctx, x)?);
        let cat = ctx.g.concat_channels(&parts)?;
        self.merge.forward(ctx, cat)
    }
}

/// Indices into the fused levels consumed by dense stage `stage` (0-based).
///
/// The inclusive form feeds stage `i` with `y_0, X_1..X_i`; the literal form
/// with `y_0, X_1..X_{i-1}`, which never consumes the last level.
pub fn dfp_sources(stage: usize, literal: bool) -> std::ops::Range<usize> {
    if literal {
        0..stage
    } else {
        0..stage + 1
    }
}

/// Concatenation input of dense stage `stage`, every part resampled to `size`.
/// `y0` is left out when `None`.
pub fn dfp_stage_input<T: Scalar>(
    g: &mut Graph<T>,
    y0: Option<Var>,
    fused: &[Var],
    stage: usize,
    literal: bool,
    size: (usize, usize),
) -> Result<Var> {
    let mut parts = Vec::with_capacity(stage + 2);
    if let Some(y0) = y0 {
        parts.push(g.resample(y0, size.0, size.1)?);
    }
    for &x in &fused[dfp_sources(stage, literal)] {
        parts.push(g.resample(x, size.0, size.1)?);
    }
    g.concat_channels(&parts)
}

/// Resamples every output to `size` (the finest level) and concatenates them.
pub fn dfp_collect<T: Scalar>(g: &mut Graph<T>, ys: &[Var], size: (usize, usize)) -> Result<Var> {
    let aligned = ys.iter().map(|&y| g.resample(y, size.0, size.1)).collect::<Result<Vec<_>>>()?;
    g.concat_channels(&aligned)
}

/// Dense feature pyramid: stage `i` sees the context feature and every fused
/// level up to its own.
#[derive(Clone, Debug)]
pub struct Dfp {
    pub stages: Vec<ConvBnRelu>,
    pub literal: bool,
    pub width: usize,
    /// Whether every stage also receives the context feature `y_0`.
    pub context: bool,
}

impl Dfp {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, levels: usize, width: usize, literal: bool) -> Self {
        Self::with_context(b, levels, width, literal, true)
    }

    pub fn with_context<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, levels: usize, width: usize, literal: bool, context: bool) -> Self {
        let stages = (0..levels)
            .map(|i| {
                let cin = width * (usize::from(context) + dfp_sources(i, literal).len());
                b.scoped(&format!("stage{}", i + 1), |b| ConvBnRelu::new(b, cin, width, 3, 1, 1))
            })
            .collect();
        Dfp { stages, literal, width, context }
    }

    /// `y_1..y_L`, each at its fused level's resolution.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, y0: Var, fused: &[Var]) -> Result<Vec<Var>> {
        if fused.len() != self.stages.len() {
            return Err(Error::Invalid(format!("{} fused levels for {} dense stages", fused.len(), self.stages.len())));
        }
        let mut ys = Vec::with_capacity(fused.len());
        for (i, stage) in self.stages.iter().enumerate() {
            let s = ctx.g.shape(fused[i]);
            let size = (s[2], s[3]);
            let input = dfp_stage_input(&mut ctx.g, self.context.then_some(y0), fused, i, self.literal, size)?;
            ys.push(stage.forward(ctx, input)?);
        }
        Ok(ys)
    }
}
