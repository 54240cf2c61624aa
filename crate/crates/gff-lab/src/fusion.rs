//! Multi-level feature fusion over a pyramid of feature maps.
//!
//! Every strategy produces one fused map per level. Level 1 is the finest
//! (largest) map and level `L` the coarsest. Cross-level terms are brought to
//! the receiving level's resolution by bilinear resampling; channel widths are
//! already equal because every level is first reduced by a 1x1 convolution.
//!
//! The gated strategies follow the duplex rule
//!
//! ```text
//! fused_l = (1 + G_l) * X_l + (1 - G_l) * sum_{i != l} G_i * X_i
//! ```
//!
//! where each gate map `G_i = sigmoid(conv1x1(X_i))` is computed at level
//! `i`'s own resolution and broadcast over channels. A level sends when its
//! gate is high and receives only where its own gate is low.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::layers::{Conv, ConvBnRelu, Init};
use crate::network::params::{Builder, Ctx};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    Concat,
    Addition,
    Fpn,
    GatedFpn,
    Gff,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] =
        [FusionStrategy::Concat, FusionStrategy::Addition, FusionStrategy::Fpn, FusionStrategy::GatedFpn, FusionStrategy::Gff];

    pub fn uses_gates(self) -> bool {
        matches!(self, FusionStrategy::GatedFpn | FusionStrategy::Gff)
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::Addition => "addition",
            FusionStrategy::Fpn => "fpn",
            FusionStrategy::GatedFpn => "gated_fpn",
            FusionStrategy::Gff => "gff",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?} (expected concat|addition|fpn|gated_fpn|gff)")))
    }
}

/// Ordered feature maps `X_1..X_L`, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    levels: Vec<Var>,
}

impl FeaturePyramid {
    /// Checks the shared batch extent and non-increasing resolution.
    pub fn new<T: Scalar>(g: &Graph<T>, levels: Vec<Var>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Invalid("feature pyramid needs at least one level".into()));
        }
        let dims = levels.iter().map(|&v| g.dims4(v)).collect::<Result<Vec<_>>>()?;
        for pair in dims.windows(2) {
            let ([n0, _, h0, w0], [n1, _, h1, w1]) = (pair[0], pair[1]);
            if n0 != n1 {
                return Err(Error::Shape(format!("pyramid levels disagree on batch: {n0} vs {n1}")));
            }
            if h1 > h0 || w1 > w0 {
                return Err(Error::Shape(format!("pyramid level {h1}x{w1} is finer than its predecessor {h0}x{w0}")));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn levels(&self) -> &[Var] {
        &self.levels
    }

    /// `(H, W)` of level `l` (0-based).
    pub fn size<T: Scalar>(&self, g: &Graph<T>, l: usize) -> (usize, usize) {
        let s = g.shape(self.levels[l]);
        (s[2], s[3])
    }
}

/// Resamples `x` to `(h, w)`; returns `x` unchanged when it already has that size.
pub fn align_to_level<T: Scalar>(g: &mut Graph<T>, x: Var, (h, w): (usize, usize)) -> Result<Var> {
    g.resample(x, h, w)
}

/// `sigmoid(conv1x1(x))` with a single output channel.
pub fn compute_gate<T: Scalar>(g: &mut Graph<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let [_, c, _, _] = g.dims4(x)?;
    if g.shape(weight) != [1, c, 1, 1] {
        return Err(Error::Shape(format!("gate conv must be [1,{c},1,1], got {:?}", g.shape(weight))));
    }
    let logits = g.conv2d(x, weight, Some(bias), 1, 0, 1)?;
    g.sigmoid(logits)
}

/// Concatenation of every level, aligned to level `l`.
pub fn concat_at<T: Scalar>(g: &mut Graph<T>, p: &FeaturePyramid, l: usize) -> Result<Var> {
    let size = p.size(g, l);
    let aligned = p.levels.iter().map(|&x| align_to_level(g, x, size)).collect::<Result<Vec<_>>>()?;
    g.concat_channels(&aligned)
}

/// Sum of every level aligned to level `l`, in ascending level order.
pub fn addition_at<T: Scalar>(g: &mut Graph<T>, p: &FeaturePyramid, l: usize) -> Result<Var> {
    let size = p.size(g, l);
    let mut acc = align_to_level(g, p.levels[0], size)?;
    for &x in &p.levels[1..] {
        let a = align_to_level(g, x, size)?;
        acc = g.add(acc, a)?;
    }
    Ok(acc)
}

/// Top-down pathway: `out_L = X_L`, `out_l = up(out_{l+1}) + X_l`.
pub fn fpn<T: Scalar>(g: &mut Graph<T>, p: &FeaturePyramid) -> Result<Vec<Var>> {
    let n = p.len();
    let mut out = vec![p.levels[n - 1]; n];
    for l in (0..n - 1).rev() {
        let up = align_to_level(g, out[l + 1], p.size(g, l))?;
        out[l] = g.add(up, p.levels[l])?;
    }
    Ok(out)
}

/// `(1 + G_l) * X_l + (1 - G_l) * incoming`, or `(1 + G_l) * X_l` with nothing incoming.
fn duplex<T: Scalar>(g: &mut Graph<T>, x: Var, gate: Var, incoming: Option<Var>) -> Result<Var> {
    let keep = g.affine(gate, 1.0, 1.0)?;
    let own = g.mul(keep, x)?;
    match incoming {
        None => Ok(own),
        Some(inc) => {
            let open = g.affine(gate, -1.0, 1.0)?;
            let received = g.mul(open, inc)?;
            g.add(own, received)
        }
    }
}

fn check_gates<T: Scalar>(g: &Graph<T>, p: &FeaturePyramid, gates: &[Var]) -> Result<()> {
    if gates.len() != p.len() {
        return Err(Error::Invalid(format!("{} gates for {} levels", gates.len(), p.len())));
    }
    for (l, (&gate, &x)) in gates.iter().zip(&p.levels).enumerate() {
        let ([gn, gc, gh, gw], [n, _, h, w]) = (g.dims4(gate)?, g.dims4(x)?);
        if (gn, gc, gh, gw) != (n, 1, h, w) {
            return Err(Error::Shape(format!("gate {l} is {:?}, level is {:?}", g.shape(gate), g.shape(x))));
        }
    }
    Ok(())
}

/// Duplex gate applied to the single top-down edge of the FPN pathway:
/// `out_l = (1 + G_l) X_l + (1 - G_l) * up(G_{l+1}) * up(out_{l+1})`.
pub fn gated_fpn<T: Scalar>(g: &mut Graph<T>, p: &FeaturePyramid, gates: &[Var]) -> Result<Vec<Var>> {
    check_gates(g, p, gates)?;
    let n = p.len();
    let mut out = vec![p.levels[n - 1]; n];
    for l in (0..n - 1).rev() {
        let size = p.size(g, l);
        let up = align_to_level(g, out[l + 1], size)?;
        let up_gate = align_to_level(g, gates[l + 1], size)?;
        let sent = g.mul(up_gate, up)?;
        out[l] = duplex(g, p.levels[l], gates[l], Some(sent))?;
    }
    Ok(out)
}

/// Gated fully fusion: every level receives from every other level.
/// The incoming sum runs in ascending level order.
pub fn gff<T: Scalar>(g: &mut Graph<T>, p: &FeaturePyramid, gates: &[Var]) -> Result<Vec<Var>> {
    check_gates(g, p, gates)?;
    let mut out = Vec::with_capacity(p.len());
    for l in 0..p.len() {
        let size = p.size(g, l);
        let mut incoming: Option<Var> = None;
        for i in (0..p.len()).filter(|&i| i != l) {
            let x = align_to_level(g, p.levels[i], size)?;
            let gate = align_to_level(g, gates[i], size)?;
            let sent = g.mul(gate, x)?;
            incoming = Some(match incoming {
                None => sent,
                Some(acc) => g.add(acc, sent)?,
            });
        }
        out.push(duplex(g, p.levels[l], gates[l], incoming)?);
    }
    Ok(out)
}

/// Per-level gate values fixed after the sigmoid; `None` leaves a gate as computed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateOverride {
    values: Vec<Option<f64>>,
}

impl GateOverride {
    pub fn none() -> Self {
        GateOverride::default()
    }

    /// Forces the gate of `level` (0-based) to `value`.
    pub fn set(mut self, level: usize, value: f64) -> Self {
        if self.values.len() <= level {
            self.values.resize(level + 1, None);
        }
        self.values[level] = Some(value);
        self
    }

    pub fn all(levels: usize, value: f64) -> Self {
        GateOverride { values: vec![Some(value); levels] }
    }

    pub fn get(&self, level: usize) -> Option<f64> {
        self.values.get(level).copied().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(Option::is_none)
    }

    pub fn max_level(&self) -> Option<usize> {
        self.values.iter().rposition(Option::is_some)
    }
}

/// Graph handles produced by [`FusionModule::forward`].
#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// Gate maps at native resolution, empty for ungated strategies.
    pub gates: Vec<Var>,
    /// Fused maps before the refinement convolutions.
    pub pre_refine: Vec<Var>,
    /// Fused maps after refinement; the module's result.
    pub fused: Vec<Var>,
}

/// Reductions, gates and per-level refinement for one fusion strategy.
#[derive(Clone, Debug)]
pub struct FusionModule {
    pub strategy: FusionStrategy,
    pub width: usize,
    pub reductions: Vec<ConvBnRelu>,
    pub gates: Vec<Conv>,
    pub refine: Vec<[ConvBnRelu; 2]>,
}

impl FusionModule {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, in_widths: &[usize], width: usize, strategy: FusionStrategy) -> Self {
        let levels = in_widths.len();
        let reductions = in_widths
            .iter()
            .enumerate()
            .map(|(l, &c)| b.scoped(&format!("reduce{}", l + 1), |b| ConvBnRelu::new(b, c, width, 1, 1, 1)))
            .collect();
        let gates = if strategy.uses_gates() {
            (0..levels)
                .map(|l| b.scoped(&format!("gate{}", l + 1), |b| Conv::new(b, width, 1, 1, 1, 1, Init::Zeros)))
                .collect()
        } else {
            Vec::new()
        };
        let refine_in = if strategy == FusionStrategy::Concat { levels * width } else { width };
        let refine = (0..levels)
            .map(|l| {
                b.scoped(&format!("refine{}", l + 1), |b| {
                    [
                        b.scoped("a", |b| ConvBnRelu::new(b, refine_in, width, 3, 1, 1)),
                        b.scoped("b", |b| ConvBnRelu::new(b, width, width, 3, 1, 1)),
                    ]
                })
            })
            .collect();
        FusionModule { strategy, width, reductions, gates, refine }
    }

    pub fn levels(&self) -> usize {
        self.reductions.len()
    }

    /// 1x1 reduction of every backbone level to the common width.
    pub fn reduce<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, backbone: &[Var]) -> Result<FeaturePyramid> {
        if backbone.len() != self.levels() {
            return Err(Error::Invalid(format!("{} backbone levels for {} reductions", backbone.len(), self.levels())));
        }
        let reduced = self.reductions.iter().zip(backbone).map(|(r, &x)| r.forward(ctx, x)).collect::<Result<Vec<_>>>()?;
        FeaturePyramid::new(&ctx.g, reduced)
    }

    /// Gate maps for every level, with overrides substituted after the sigmoid.
    pub fn gates<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, p: &FeaturePyramid, overrides: &GateOverride) -> Result<Vec<Var>> {
        self.gates
            .iter()
            .zip(p.levels())
            .enumerate()
            .map(|(l, (conv, &x))| match overrides.get(l) {
                Some(v) => {
                    let [n, _, h, w] = ctx.g.dims4(x)?;
                    Ok(ctx.g.constant(Tensor::full(&[n, 1, h, w], T::lit(v))))
                }
                None => {
                    let (w, b) = (ctx.p(conv.weight), ctx.p(conv.bias));
                    compute_gate(&mut ctx.g, x, w, b)
                }
            })
            .collect()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, p: &FeaturePyramid, overrides: &GateOverride) -> Result<FusionOutput> {
        if let Some(l) = overrides.max_level() {
            if l >= self.levels() {
                return Err(Error::Invalid(format!("gate override for level {} of {}", l + 1, self.levels())));
            }
        }
        let gates = if self.strategy.uses_gates() { self.gates(ctx, p, overrides)? } else { Vec::new() };
        let g = &mut ctx.g;
        let pre_refine = match self.strategy {
            FusionStrategy::Concat => (0..p.len()).map(|l| concat_at(g, p, l)).collect::<Result<Vec<_>>>()?,
            FusionStrategy::Addition => (0..p.len()).map(|l| addition_at(g, p, l)).collect::<Result<Vec<_>>>()?,
            FusionStrategy::Fpn => fpn(g, p)?,
            FusionStrategy::GatedFpn => gated_fpn(g, p, &gates)?,
            FusionStrategy::Gff => gff(g, p, &gates)?,
        };
        let mut fused = Vec::with_capacity(pre_refine.len());
        for (stack, &x) in self.refine.iter().zip(&pre_refine) {
            let y = stack[0].forward(ctx, x)?;
            fused.push(stack[1].forward(ctx, y)?);
        }
        Ok(FusionOutput { gates, pre_refine, fused })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_level(g: &mut Graph<f64>, v: f64) -> Var {
        g.constant(Tensor::full(&[1, 1, 1, 1], v))
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
        }
        assert!("sum".parse::<FusionStrategy>().is_err());
    }

    #[test]
    fn pyramid_rejects_growing_resolution() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
        assert!(FeaturePyramid::new(&g, vec![a, b]).is_err());
        assert!(FeaturePyramid::new(&g, vec![b, a]).is_ok());
        let c = g.constant(Tensor::zeros(&[2, 2, 4, 4]));
        assert!(FeaturePyramid::new(&g, vec![b, c]).is_err());
    }

    #[test]
    fn scalar_gff_and_gated_fpn() {
        let mut g = Graph::<f64>::new();
        let xs = vec![scalar_level(&mut g, 1.0), scalar_level(&mut g, 2.0)];
        let gates = vec![scalar_level(&mut g, 0.5), scalar_level(&mut g, 0.25)];
        let p = FeaturePyramid::new(&g, xs).unwrap();
        let out = gff(&mut g, &p, &gates).unwrap();
        assert!((g.value(out[0]).data()[0] - 1.75).abs() < 1e-12);
        assert!((g.value(out[1]).data()[0] - 2.875).abs() < 1e-12);
        let out = gated_fpn(&mut g, &p, &gates).unwrap();
        assert!((g.value(out[0]).data()[0] - 1.75).abs() < 1e-12);
        assert_eq!(g.value(out[1]).data()[0], 2.0);
    }

    #[test]
    fn scalar_fpn_and_addition() {
        let mut g = Graph::<f64>::new();
        let xs = vec![scalar_level(&mut g, 1.0), scalar_level(&mut g, 2.0), scalar_level(&mut g, 3.0)];
        let p = FeaturePyramid::new(&g, xs).unwrap();
        let out = fpn(&mut g, &p).unwrap();
        let vals: Vec<f64> = out.iter().map(|&v| g.value(v).data()[0]).collect();
        assert_eq!(vals, vec![6.0, 5.0, 3.0]);
        for l in 0..3 {
            let s = addition_at(&mut g, &p, l).unwrap();
            assert_eq!(g.value(s).data()[0], 6.0);
        }
    }

    #[test]
    fn gated_fpn_limits() {
        let mut g = Graph::<f64>::new();
        let xs = vec![scalar_level(&mut g, 1.5), scalar_level(&mut g, -2.0)];
        let p = FeaturePyramid::new(&g, xs).unwrap();
        let zeros = vec![scalar_level(&mut g, 0.0), scalar_level(&mut g, 0.0)];
        let out = gated_fpn(&mut g, &p, &zeros).unwrap();
        assert_eq!(g.value(out[0]).data()[0], 1.5);
        let plain = vec![scalar_level(&mut g, 0.0), scalar_level(&mut g, 1.0)];
        let out = gated_fpn(&mut g, &p, &plain).unwrap();
        assert_eq!(g.value(out[0]).data()[0], -0.5);
    }

    #[test]
    fn gate_override_bookkeeping() {
        let o = GateOverride::none().set(2, 0.0);
        assert_eq!(o.get(2), Some(0.0));
        assert_eq!(o.get(0), None);
        assert_eq!(o.get(7), None);
        assert_eq!(o.max_level(), Some(2));
        assert!(GateOverride::none().is_empty());
    }
}
