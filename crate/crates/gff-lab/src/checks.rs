//! Finite-difference checks of every differentiable operation and of a
//! micro end-to-end model, in 64-bit precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fusion::{self, FeaturePyramid, FusionStrategy, GateOverride};
use crate::network::params::{Ctx, Mode, ParamStore};
use crate::network::{Model, ModelConfig};
use crate::rng::Seeds;
use crate::tensor::gradcheck::{gradcheck, GradcheckReport};
use crate::tensor::{Graph, LabelMap, Tensor, Var};

pub const EPS: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.2, 1)` and random sign, clear of relu kinks.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(out * probe)` for a fixed random probe, turning any output into a scalar.
fn probe(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = Seeds::new(seed).stream("probe");
    let shape = g.shape(out).to_vec();
    let p = g.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let m = g.mul(out, p)?;
    g.sum(m)
}

type Program = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Named checks: inputs plus the scalar program built on them.
fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Program)> {
    let mut rng = Seeds::new(seed).stream("gradcheck.ops");
    let r = &mut rng;
    let x4 = |r: &mut ChaCha8Rng| uniform(r, &[2, 3, 5, 4], -1.0, 1.0);
    vec![
        ("add", vec![x4(r), x4(r)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, 1)
        })),
        ("add (single-channel broadcast)", vec![x4(r), uniform(r, &[2, 1, 5, 4], -1.0, 1.0)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, 2)
        })),
        ("mul", vec![x4(r), x4(r)], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, 3)
        })),
        ("mul (single-channel broadcast)", vec![x4(r), uniform(r, &[2, 1, 5, 4], -1.0, 1.0)], Box::new(|g, v| {
            let y = g.mul(v[1], v[0])?;
            probe(g, y, 4)
        })),
        ("affine", vec![x4(r)], Box::new(|g, v| {
            let y = g.affine(v[0], -1.5, 0.25)?;
            probe(g, y, 5)
        })),
        ("sigmoid", vec![uniform(r, &[2, 3, 5, 4], -3.0, 3.0)], Box::new(|g, v| {
            let y = g.sigmoid(v[0])?;
            probe(g, y, 6)
        })),
        ("relu", vec![signed(r, &[2, 3, 5, 4])], Box::new(|g, v| {
            let y = g.relu(v[0])?;
            probe(g, y, 7)
        })),
        ("conv2d 3x3", vec![uniform(r, &[2, 3, 6, 5], -1.0, 1.0), uniform(r, &[4, 3, 3, 3], -0.5, 0.5), uniform(r, &[4], -0.5, 0.5)], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)?;
            probe(g, y, 8)
        })),
        ("conv2d strided", vec![uniform(r, &[2, 3, 7, 6], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -0.5, 0.5)], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], None, 2, 1, 1)?;
            probe(g, y, 9)
        })),
        ("conv2d dilated", vec![uniform(r, &[1, 2, 7, 7], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -0.5, 0.5), uniform(r, &[3], -0.5, 0.5)], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 2, 2)?;
            probe(g, y, 10)
        })),
        ("conv2d 1x1", vec![uniform(r, &[2, 4, 3, 3], -1.0, 1.0), uniform(r, &[2, 4, 1, 1], -0.5, 0.5), uniform(r, &[2], -0.5, 0.5)], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0, 1)?;
            probe(g, y, 11)
        })),
        ("bilinear upsample", vec![uniform(r, &[1, 2, 3, 4], -1.0, 1.0)], Box::new(|g, v| {
            let y = g.resample(v[0], 7, 9)?;
            probe(g, y, 12)
        })),
        ("bilinear downsample", vec![uniform(r, &[1, 2, 8, 6], -1.0, 1.0)], Box::new(|g, v| {
            let y = g.resample(v[0], 3, 4)?;
            probe(g, y, 13)
        })),
        ("adaptive avg pool", vec![uniform(r, &[2, 2, 7, 5], -1.0, 1.0)], Box::new(|g, v| {
            let y = g.avg_pool(v[0], 3, 2)?;
            probe(g, y, 14)
        })),
        ("batch norm (train)", vec![uniform(r, &[3, 2, 3, 3], -1.0, 1.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)], Box::new(|g, v| {
            let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            probe(g, y, 15)
        })),
        ("batch norm (eval)", vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)], Box::new(|g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.8, 1.3], 1e-5)?;
            probe(g, y, 16)
        })),
        ("concat + slice", vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)], Box::new(|g, v| {
            let c = g.concat_channels(&[v[0], v[1]])?;
            let s = g.slice_channels(c, 1, 3)?;
            probe(g, s, 17)
        })),
        ("softmax cross-entropy", vec![uniform(r, &[2, 4, 3, 3], -2.0, 2.0)], Box::new(|g, v| {
            let mut labels: Vec<u8> = (0..18).map(|i| (i * 7 % 4) as u8).collect();
            labels[5] = 255;
            let labels = LabelMap::new(2, 3, 3, labels)?;
            g.softmax_cross_entropy(v[0], &labels, 255)
        })),
        ("gated fully fusion", pyramid_inputs(r), Box::new(|g, v| fused_probe(g, v, FusionStrategy::Gff))),
        ("gated fpn", pyramid_inputs(r), Box::new(|g, v| fused_probe(g, v, FusionStrategy::GatedFpn))),
        ("fpn", pyramid_inputs(r), Box::new(|g, v| fused_probe(g, v, FusionStrategy::Fpn))),
    ]
}

/// Three levels `[1,2,8,8] [1,2,4,4] [1,2,2,2]` plus a 1x1 gate conv per level.
fn pyramid_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let mut v = Vec::new();
    for s in [8, 4, 2] {
        v.push(uniform(r, &[1, 2, s, s], -1.0, 1.0));
    }
    for _ in 0..3 {
        v.push(uniform(r, &[1, 2, 1, 1], -1.0, 1.0));
        v.push(uniform(r, &[1], -0.5, 0.5));
    }
    v
}

fn fused_probe(g: &mut Graph<f64>, v: &[Var], strategy: FusionStrategy) -> Result<Var> {
    let p = FeaturePyramid::new(g, v[..3].to_vec())?;
    let gates = (0..3).map(|l| fusion::compute_gate(g, v[l], v[3 + 2 * l], v[4 + 2 * l])).collect::<Result<Vec<_>>>()?;
    let fused = match strategy {
        FusionStrategy::Gff => fusion::gff(g, &p, &gates)?,
        FusionStrategy::GatedFpn => fusion::gated_fpn(g, &p, &gates)?,
        _ => fusion::fpn(g, &p)?,
    };
    let mut total: Option<Var> = None;
    for (l, f) in fused.into_iter().enumerate() {
        let s = probe(g, f, 30 + l as u64)?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.expect("three levels"))
}

/// Gradient check of every differentiable operation.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, GradcheckReport)>> {
    op_cases(seed).into_iter().map(|(name, inputs, f)| Ok((name, gradcheck(&inputs, EPS, f)?))).collect()
}

/// Total loss and the relu activation pattern that produced it.
fn model_loss(model: &Model, store: &ParamStore<f64>, image: &Tensor<f64>, labels: &LabelMap, mode: Mode) -> Result<(f64, Vec<bool>)> {
    let mut ctx = Ctx::new(store, mode);
    let x = ctx.g.constant(image.clone());
    let out = model.forward(&mut ctx, x, &GateOverride::none())?;
    let l = model.losses(&mut ctx, &out, labels)?;
    Ok((ctx.g.value(l.total).data()[0], ctx.g.activation_pattern()))
}

/// Checks the loss gradient of `model` against central differences over
/// every trainable parameter, with batch norm in the given mode.
pub fn model_gradcheck(
    model: &Model,
    store: &ParamStore<f64>,
    image: &Tensor<f64>,
    labels: &LabelMap,
    eps: f64,
    mode: Mode,
) -> Result<GradcheckReport> {
    let grads = {
        let mut ctx = Ctx::new(store, mode);
        let x = ctx.g.constant(image.clone());
        let out = model.forward(&mut ctx, x, &GateOverride::none())?;
        let l = model.losses(&mut ctx, &out, labels)?;
        ctx.g.backward(l.total)?;
        ctx.param_grads()
    };
    let (_, base) = model_loss(model, store, image, labels, mode)?;
    let mut probe = store.clone();
    let mut report = GradcheckReport::empty();
    for id in store.ids().filter(|&id| store.entry(id).kind.trainable()) {
        let analytic = grads.iter().find(|(g, _)| *g == id).map(|(_, t)| t.data().to_vec());
        for j in 0..store.get(id).numel() {
            let a = analytic.as_ref().map_or(0.0, |v| v[j]);
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let (plus, plus_pattern) = model_loss(model, &probe, image, labels, mode)?;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let (minus, minus_pattern) = model_loss(model, &probe, image, labels, mode)?;
            probe.get_mut(id).data_mut()[j] = orig;
            let crossed = plus_pattern != base || minus_pattern != base;
            report.record((id.index(), j), a, (plus - minus) / (2.0 * eps), crossed);
        }
    }
    Ok(report)
}

/// Micro model: 8x8 inputs, two classes, width 4, gated fully fusion and the
/// dense pyramid, batch of two.
///
/// Batch norm runs on its stored statistics. With batch statistics the two
/// stride-8 levels are 1x1, each channel is normalized over two values, and
/// the loss curves too sharply for a 1e-3 step; that backward path is
/// covered by the batch norm case of [`op_suite`].
pub fn micro_model_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let config = ModelConfig::micro();
    debug_assert!(config.fusion == FusionStrategy::Gff && config.dfp);
    let (model, mut store) = Model::build::<f64>(&config, seed)?;
    let mut rng = Seeds::new(seed).stream("gradcheck.micro");
    // zero-initialized gates would make every gate exactly 0.5; randomize them
    for id in store.ids().collect::<Vec<_>>() {
        if store.entry(id).name.starts_with("fusion.gate") {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = uniform(&mut rng, &shape, -0.5, 0.5);
        }
    }
    let image = uniform(&mut rng, &[2, 3, 8, 8], 0.0, 255.0);
    let labels = LabelMap::new(2, 8, 8, (0..128).map(|_| rng.gen_range(0..2u8)).collect())?;
    model_gradcheck(&model, &store, &image, &labels, EPS, Mode::Eval)
}
