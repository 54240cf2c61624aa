//! Training loop, inference and evaluation.
//!
//! A run is a pure function of the seed, the configuration and the dataset.
//! Model initialization, data order and augmentation draw from separate named
//! streams of the seed.

pub mod augment;
pub mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::fusion::GateOverride;
use crate::metrics::{argmax_predict, ConfusionMatrix};
use crate::network::params::{apply_bn_observations, Ctx, Mode, ParamStore};
use crate::network::{Model, IGNORE_LABEL};
use crate::rng::Seeds;
use crate::tensor::{kernels, LabelMap, Scalar, Tensor};

pub use augment::{augment, AugmentConfig};
pub use optim::{poly_lr, sgd_step, OptimState, Schedule};

/// Test-time scales for multi-scale inference.
pub const MULTISCALE: [f64; 5] = [0.75, 1.0, 1.25, 1.5, 1.75];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_power: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub threads: usize,
}

impl TrainConfig {
    /// 64x64 crops, batch 8, 2000 iterations.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 2000,
            batch: 8,
            // from-scratch training on the toy scenes stalls at 1e-3
            base_lr: 3e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_power: 0.9,
            augment: AugmentConfig::standard((64, 64)),
            seed: 0,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::Config("iterations and batch must be positive".into()));
        }
        if !self.augment.crop.0.is_multiple_of(8) || !self.augment.crop.1.is_multiple_of(8) {
            return Err(Error::Config(format!("crop {:?} must be a multiple of 8", self.augment.crop)));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate, momentum or weight decay out of range".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub loss_total: f64,
}

pub const LOG_HEADER: &str = "iter,lr,loss_main,loss_aux,loss_total";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{:e},{},{},{}", r.iter, r.lr, r.loss_main, r.loss_aux, r.loss_total).unwrap();
    }
    out
}

/// Parameter norms, largest first, for divergence diagnostics.
pub fn param_norm_report<T: Scalar>(store: &ParamStore<T>, top: usize) -> String {
    let mut norms: Vec<(f64, &str)> = store
        .entries()
        .iter()
        .map(|e| (e.value.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt(), e.name.as_str()))
        .collect();
    norms.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Less));
    let parts: Vec<String> = norms.iter().take(top).map(|(n, name)| format!("{name}={n:.4e}")).collect();
    format!("largest parameter norms: {}", parts.join(", "))
}

/// Endless sequence of sample indices in shuffled epochs.
struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, rng: rand_chacha::ChaCha8Rng) -> Self {
        EpochSampler { order: (0..n).collect(), cursor: n, rng }
    }

    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

fn stack_samples(samples: &[SegmentationSample]) -> Result<(Tensor<f32>, LabelMap)> {
    let images: Vec<Tensor<f32>> = samples.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
    Ok((Tensor::stack(&images)?, LabelMap::stack(&labels)?))
}

fn diverged<T: Scalar>(iter: usize, store: &ParamStore<T>, cause: &Error) -> Error {
    Error::Diverged { iter, report: format!("{cause}; {}", param_norm_report(store, 5)) }
}

/// Trains `store` in place for `cfg.iterations` steps and returns the log.
/// `on_row` sees every row as it is produced.
pub fn train(
    model: &Model,
    store: &mut ParamStore<f32>,
    data: &[SegmentationSample],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let seeds = Seeds::new(cfg.seed);
    let mut sampler = EpochSampler::new(data.len(), seeds.stream("data.order"));
    let mut aug_rng = seeds.stream("augment");
    let mut opt = OptimState::new(cfg.base_lr, cfg.iterations);
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;
    opt.schedule = Schedule::Poly { power: cfg.lr_power };

    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let batch: Vec<SegmentationSample> = (0..cfg.batch)
            .map(|_| augment(&data[sampler.next()], &cfg.augment, &mut aug_rng))
            .collect::<Result<_>>()?;
        let (images, labels) = stack_samples(&batch)?;

        let (grads, observations, main, aux, total) = {
            let mut ctx = Ctx::new(store, Mode::Train).threads(cfg.threads);
            let step = (|| {
                let x = ctx.g.constant(images);
                let out = model.forward(&mut ctx, x, &GateOverride::none())?;
                let losses = model.losses(&mut ctx, &out, &labels)?;
                ctx.g.backward(losses.total)?;
                Ok::<_, Error>(losses)
            })();
            let losses = match step {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => return Err(diverged(iter, store, &e)),
                Err(e) => return Err(e),
            };
            let read = |v| ctx.g.value(v).data()[0] as f64;
            (
                ctx.param_grads(),
                ctx.observations().to_vec(),
                read(losses.main),
                read(losses.aux),
                read(losses.total),
            )
        };
        let lr = sgd_step(store, &grads, &mut opt)?;
        apply_bn_observations(store, &observations, model.config.bn_momentum);
        if !store.entries().iter().all(|e| e.value.is_finite()) {
            return Err(diverged(iter, store, &Error::NonFinite("sgd_step".into())));
        }
        let row = LogRow { iter, lr, loss_main: main, loss_aux: aux, loss_total: total };
        on_row(&row);
        log.push(row);
    }
    Ok(log)
}

/// Channel softmax of `[N, K, H, W]` logits.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, k, h, w] = logits.dims4()?;
    let plane = h * w;
    let mut out = logits.clone();
    let d = out.data_mut();
    for b in 0..n {
        for p in 0..plane {
            let idx = |c: usize| (b * k + c) * plane + p;
            let m = (0..k).map(|c| d[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (d[idx(c)] - m).exp();
                d[idx(c)] = e;
                z = z + e;
            }
            for c in 0..k {
                d[idx(c)] = d[idx(c)] / z;
            }
        }
    }
    Ok(out)
}

/// Logits `[N, K, H, W]` in evaluation mode.
pub fn predict_logits<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    overrides: &GateOverride,
) -> Result<Tensor<T>> {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let x = ctx.g.constant(images.clone());
    let out = model.forward(&mut ctx, x, overrides)?;
    Ok(ctx.g.value(out.logits).clone())
}

/// Side length at test scale `s`, rounded to a multiple of 8.
pub fn scaled_extent(extent: usize, s: f64) -> usize {
    (((extent as f64 * s) / 8.0).round() as usize).max(1) * 8
}

/// Class probabilities averaged over `scales`: each scale resizes the input,
/// runs the network, applies softmax and resizes the probabilities back.
pub fn infer_multiscale<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    scales: &[f64],
    overrides: &GateOverride,
) -> Result<Tensor<T>> {
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Invalid(format!("scales {scales:?}")));
    }
    let [n, c, h, w] = images.dims4()?;
    let k = model.config.classes;
    let mut acc: Option<Tensor<T>> = None;
    for &s in scales {
        let (sh, sw) = (scaled_extent(h, s), scaled_extent(w, s));
        let input = if (sh, sw) == (h, w) {
            images.clone()
        } else {
            Tensor::new(&[n, c, sh, sw], kernels::resample_forward(images.data(), n * c, h, w, sh, sw))?
        };
        let probs = softmax_channels(&predict_logits(model, store, &input, overrides)?)?;
        let probs = if (sh, sw) == (h, w) {
            probs
        } else {
            Tensor::new(&[n, k, h, w], kernels::resample_forward(probs.data(), n * k, sh, sw, h, w))?
        };
        acc = Some(match acc {
            None => probs,
            Some(mut a) => {
                for (x, &y) in a.data_mut().iter_mut().zip(probs.data()) {
                    *x = *x + y;
                }
                a
            }
        });
    }
    let inv = T::lit(1.0 / scales.len() as f64);
    Ok(acc.expect("at least one scale").map(|v| v * inv))
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub scales: Vec<f64>,
    pub overrides: GateOverride,
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { scales: vec![1.0], overrides: GateOverride::none(), batch: 8 }
    }
}

impl EvalOptions {
    pub fn multiscale() -> Self {
        EvalOptions { scales: MULTISCALE.to_vec(), ..EvalOptions::default() }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub predictions: Vec<LabelMap>,
}

/// Predicts every sample and scores it against its labels.
pub fn evaluate<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[SegmentationSample],
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let mut confusion = ConfusionMatrix::new(model.config.classes);
    let mut predictions = Vec::with_capacity(samples.len());
    let mut start = 0;
    while start < samples.len() {
        let size = (samples[start].height(), samples[start].width());
        let mut end = start + 1;
        while end < samples.len() && end - start < opts.batch.max(1) && (samples[end].height(), samples[end].width()) == size {
            end += 1;
        }
        let (images, labels) = stack_samples(&samples[start..end])?;
        let probs = infer_multiscale(model, store, &images.cast::<T>(), &opts.scales, &opts.overrides)?;
        let pred = argmax_predict(&probs)?;
        confusion.accumulate(&pred, &labels, IGNORE_LABEL)?;
        predictions.extend((0..pred.n).map(|b| pred.item(b)));
        start = end;
    }
    Ok(Evaluation { confusion, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin() * 4.0);
        let p = softmax_channels(&t).unwrap();
        for b in 0..2 {
            for px in 0..4 {
                let s: f64 = (0..3).map(|c| p.data()[(b * 3 + c) * 4 + px]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaled_extents_are_multiples_of_eight() {
        assert_eq!(scaled_extent(64, 1.0), 64);
        assert_eq!(scaled_extent(64, 0.75), 48);
        assert_eq!(scaled_extent(64, 1.25), 80);
        assert_eq!(scaled_extent(64, 1.75), 112);
        assert!(MULTISCALE.iter().all(|&s| scaled_extent(40, s).is_multiple_of(8)));
    }

    #[test]
    fn csv_header() {
        let rows = [LogRow { iter: 0, lr: 1e-3, loss_main: 1.5, loss_aux: 2.0, loss_total: 2.3 }];
        assert!(log_csv(&rows).starts_with("iter,lr,loss_main,loss_aux,loss_total\n0,"));
    }
}
