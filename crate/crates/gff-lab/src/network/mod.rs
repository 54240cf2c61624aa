//! Backbone and full model assembly.
//!
//! Wiring: backbone -> 1x1 reductions -> pyramid pooling on the top level
//! (`y_0`) -> fusion over all levels -> per-level refinement -> dense
//! feature pyramid (optional) -> concatenation at the finest level -> 1x1
//! classifier -> bilinear upsampling to the input size. An auxiliary 1x1
//! classifier reads the third backbone stage.

pub mod checkpoint;
pub mod cost;
pub mod layers;
pub mod params;

use rand::Rng;

use crate::context::{dfp_collect, Dfp, Ppm, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::fusion::{FeaturePyramid, FusionModule, FusionStrategy, GateOverride};
use crate::rng::Seeds;
use crate::tensor::{LabelMap, Scalar, Var};

use layers::{Conv, ConvBnRelu, Init};
use params::{Builder, Ctx, ParamStore};

pub const LEVELS: usize = 4;
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output widths of the four backbone stages.
    pub stage_widths: [usize; LEVELS],
    /// Common channel width after reduction.
    pub width: usize,
    pub classes: usize,
    pub aux_weight: f64,
    pub fusion: FusionStrategy,
    pub dfp: bool,
    /// Feed dense stage `i` with `X_1..X_{i-1}` instead of `X_1..X_i`.
    pub dfp_literal_indexing: bool,
    pub ppm_bins: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small preset for the synthetic five-class scenes.
    pub fn desk() -> Self {
        ModelConfig {
            stage_widths: [16, 32, 64, 128],
            width: 32,
            classes: 5,
            aux_weight: 0.4,
            fusion: FusionStrategy::Gff,
            dfp: true,
            dfp_literal_indexing: false,
            ppm_bins: DEFAULT_BINS.to_vec(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Tiny two-class model for end-to-end gradient checks on 8x8 inputs.
    pub fn micro() -> Self {
        ModelConfig {
            stage_widths: [4, 4, 4, 4],
            width: 4,
            classes: 2,
            ppm_bins: vec![1],
            ..ModelConfig::desk()
        }
    }

    /// Full-width variant (256 channels) used for cost tables.
    pub fn full_width() -> Self {
        ModelConfig { stage_widths: [256, 512, 1024, 2048], width: 256, ..ModelConfig::desk() }
    }

    pub fn with_fusion(mut self, fusion: FusionStrategy, dfp: bool) -> Self {
        self.fusion = fusion;
        self.dfp = dfp;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!("class count {} outside 2..255", self.classes)));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::Config(format!("aux weight {} must be non-negative", self.aux_weight)));
        }
        if self.width == 0 || self.stage_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.ppm_bins.is_empty() || self.ppm_bins[0] == 0 || self.ppm_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("ppm bins {:?} must be positive and strictly increasing", self.ppm_bins)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("batch norm eps must be positive and momentum in [0,1]".into()));
        }
        Ok(())
    }
}

/// Four plain convolution stages at strides 2, 4, 8 and 8 (the last dilated).
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBnRelu,
    pub stages: Vec<[ConvBnRelu; 2]>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, widths: [usize; LEVELS]) -> Self {
        let stem = b.scoped("stem", |b| ConvBnRelu::new(b, 3, widths[0], 3, 2, 1));
        let mut stages = Vec::with_capacity(LEVELS);
        let mut cin = widths[0];
        for (s, &cout) in widths.iter().enumerate() {
            let (stride, dilation) = match s {
                0 | 3 => (1, if s == 3 { 2 } else { 1 }),
                _ => (2, 1),
            };
            stages.push(b.scoped(&format!("stage{}", s + 1), |b| {
                [
                    b.scoped("a", |b| ConvBnRelu::new(b, cin, cout, 3, stride, dilation)),
                    b.scoped("b", |b| ConvBnRelu::new(b, cout, cout, 3, 1, dilation)),
                ]
            }));
            cin = cout;
        }
        Backbone { stem, stages }
    }

    /// Last feature map of each stage.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        let [_, _, h, w] = ctx.g.dims4(x)?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by 8")));
        }
        let mut y = self.stem.forward(ctx, x)?;
        let mut levels = Vec::with_capacity(LEVELS);
        for [a, b] in &self.stages {
            y = a.forward(ctx, y)?;
            y = b.forward(ctx, y)?;
            levels.push(y);
        }
        Ok(levels)
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[N, K, H, W]` at the input resolution.
    pub logits: Var,
    pub aux_logits: Var,
    /// Gate maps at each level's native resolution (empty without gates).
    pub gates: Vec<Var>,
    pub backbone: Vec<Var>,
    pub reduced: FeaturePyramid,
    pub y0: Var,
    pub pre_refine: Vec<Var>,
    pub fused: Vec<Var>,
    /// Dense pyramid outputs, empty when the dense pyramid is disabled.
    pub dense: Vec<Var>,
}

/// Loss handles; `total = main + aux_weight * aux`.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub main: Var,
    pub aux: Var,
}

/// Parameter layout of a segmentation network; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub fusion: FusionModule,
    pub ppm: Ppm,
    pub dfp: Option<Dfp>,
    pub classifier: Conv,
    pub aux: Conv,
}

impl Model {
    /// Builds the layout and initial parameters. Each component draws from its
    /// own named stream, so components shared between configurations start
    /// from identical values.
    pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let seeds = Seeds::new(seed);
        let mut store = ParamStore::new();
        let backbone = {
            let mut rng = seeds.stream("init.backbone");
            Builder::new(&mut store, &mut rng).scoped("backbone", |b| Backbone::new(b, config.stage_widths))
        };
        let fusion = {
            let mut rng = seeds.stream("init.fusion");
            Builder::new(&mut store, &mut rng)
                .scoped("fusion", |b| FusionModule::new(b, &config.stage_widths, config.width, config.fusion))
        };
        let ppm = {
            let mut rng = seeds.stream("init.ppm");
            Builder::new(&mut store, &mut rng).scoped("ppm", |b| Ppm::new(b, config.width, &config.ppm_bins))?
        };
        let dfp = config.dfp.then(|| {
            let mut rng = seeds.stream("init.dfp");
            Builder::new(&mut store, &mut rng)
                .scoped("dfp", |b| Dfp::new(b, LEVELS, config.width, config.dfp_literal_indexing))
        });
        let collected = if config.dfp { LEVELS * config.width } else { (LEVELS + 1) * config.width };
        let (classifier, aux) = {
            let mut rng = seeds.stream("init.head");
            let mut b = Builder::new(&mut store, &mut rng);
            let classifier = b.scoped("head.classifier", |b| Conv::new(b, collected, config.classes, 1, 1, 1, Init::FanIn));
            let aux = b.scoped("head.aux", |b| Conv::new(b, config.stage_widths[2], config.classes, 1, 1, 1, Init::FanIn));
            (classifier, aux)
        };
        let model = Model { config: config.clone(), backbone, fusion, ppm, dfp, classifier, aux };
        Ok((model, store))
    }

    /// Runs the network on raw images in `[0, 255]`, `[N, 3, H, W]`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var, overrides: &GateOverride) -> Result<ModelOutput> {
        ctx.bn_eps = self.config.bn_eps;
        let [_, c, h, w] = ctx.g.dims4(image)?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3-channel image, got {c}")));
        }
        let x = ctx.g.affine(image, 1.0 / 127.5, -1.0)?;
        let backbone = self.backbone.forward(ctx, x)?;
        let reduced = self.fusion.reduce(ctx, &backbone)?;
        let top = reduced.levels()[LEVELS - 1];
        let y0 = self.ppm.forward(ctx, top)?;
        let fo = self.fusion.forward(ctx, &reduced, overrides)?;
        let finest = reduced.size(&ctx.g, 0);
        let dense = match &self.dfp {
            Some(dfp) => dfp.forward(ctx, y0, &fo.fused)?,
            None => Vec::new(),
        };
        let collected = if dense.is_empty() {
            let mut parts = vec![y0];
            parts.extend(&fo.fused);
            dfp_collect(&mut ctx.g, &parts, finest)?
        } else {
            dfp_collect(&mut ctx.g, &dense, finest)?
        };
        let low = self.classifier.forward(ctx, collected)?;
        let logits = ctx.g.resample(low, h, w)?;
        let aux_low = self.aux.forward(ctx, backbone[2])?;
        let aux_logits = ctx.g.resample(aux_low, h, w)?;
        Ok(ModelOutput {
            logits,
            aux_logits,
            gates: fo.gates,
            backbone,
            reduced,
            y0,
            pre_refine: fo.pre_refine,
            fused: fo.fused,
            dense,
        })
    }

    pub fn losses<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, out: &ModelOutput, labels: &LabelMap) -> Result<Losses> {
        let main = ctx.g.softmax_cross_entropy(out.logits, labels, IGNORE_LABEL)?;
        let aux = ctx.g.softmax_cross_entropy(out.aux_logits, labels, IGNORE_LABEL)?;
        let weighted = ctx.g.scale(aux, self.config.aux_weight)?;
        let total = ctx.g.add(main, weighted)?;
        Ok(Losses { total, main, aux })
    }
}
