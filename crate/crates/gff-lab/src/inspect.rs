//! Gate maps, gate statistics and gate ablation on a trained model.

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::fusion::GateOverride;
use crate::metrics::ConfusionMatrix;
use crate::network::params::{Ctx, Mode, ParamStore};
use crate::network::Model;
use crate::tensor::{Scalar, Tensor};
use crate::training::{evaluate, EvalOptions};

/// Gate values of one sample at every level's native resolution, `[h, w]` each.
pub fn gate_maps<T: Scalar>(model: &Model, store: &ParamStore<T>, sample: &SegmentationSample) -> Result<Vec<Tensor<f64>>> {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let image = sample.image.cast::<T>().reshape(&[1, 3, sample.height(), sample.width()])?;
    let x = ctx.g.constant(image);
    let out = model.forward(&mut ctx, x, &GateOverride::none())?;
    out.gates
        .iter()
        .map(|&g| {
            let [_, _, h, w] = ctx.g.dims4(g)?;
            Tensor::new(&[h, w], ctx.g.value(g).data().iter().map(|v| v.to_f64().unwrap()).collect())
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GateStats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation of each level over all given maps.
pub fn gate_stats(maps: &[Vec<Tensor<f64>>]) -> Vec<GateStats> {
    let levels = maps.first().map_or(0, Vec::len);
    (0..levels)
        .map(|l| {
            let values: Vec<f64> = maps.iter().flat_map(|m| m[l].data().iter().copied()).collect();
            let n = values.len().max(1) as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            GateStats { mean, std: var.sqrt() }
        })
        .collect()
}

/// Predictions with and without a gate override, compared pixel by pixel.
#[derive(Clone, Debug)]
pub struct Ablation {
    /// False when the model has no gates; nothing is ablated then.
    pub has_gates: bool,
    pub changed: Vec<usize>,
    pub pixels: usize,
    pub masks: Vec<Vec<bool>>,
    pub normal: ConfusionMatrix,
    pub ablated: ConfusionMatrix,
}

impl Ablation {
    pub fn changed_fraction(&self) -> f64 {
        self.changed.iter().sum::<usize>() as f64 / self.pixels.max(1) as f64
    }

    /// Ablated minus normal IoU per class; `None` where either side is undefined.
    pub fn iou_delta(&self) -> Result<Vec<Option<f64>>> {
        let a = self.ablated.per_class_iou()?;
        let n = self.normal.per_class_iou()?;
        Ok(a.iter().zip(&n).map(|(a, n)| Some((*a)? - (*n)?)).collect())
    }

    pub fn miou_delta(&self) -> Result<f64> {
        Ok(self.ablated.miou()? - self.normal.miou()?)
    }
}

/// Gate overrides forcing the given 0-based levels to zero; an empty list means all levels.
pub fn zero_gates(model: &Model, levels: &[usize]) -> Result<GateOverride> {
    let total = model.fusion.levels();
    if let Some(&l) = levels.iter().find(|&&l| l >= total) {
        return Err(Error::Invalid(format!("level {} outside 1..={total}", l + 1)));
    }
    if levels.is_empty() {
        return Ok(GateOverride::all(total, 0.0));
    }
    Ok(levels.iter().fold(GateOverride::none(), |o, &l| o.set(l, 0.0)))
}

pub fn ablate<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[SegmentationSample],
    overrides: &GateOverride,
    opts: &EvalOptions,
) -> Result<Ablation> {
    let normal = evaluate(model, store, samples, opts)?;
    let has_gates = model.config.fusion.uses_gates();
    let ablated = if has_gates {
        evaluate(model, store, samples, &EvalOptions { overrides: overrides.clone(), ..opts.clone() })?
    } else {
        normal.clone()
    };
    let masks: Vec<Vec<bool>> = normal
        .predictions
        .iter()
        .zip(&ablated.predictions)
        .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| x != y).collect())
        .collect();
    Ok(Ablation {
        has_gates,
        changed: masks.iter().map(|m| m.iter().filter(|&&c| c).count()).collect(),
        pixels: masks.iter().map(Vec::len).sum(),
        masks,
        normal: normal.confusion,
        ablated: ablated.confusion,
    })
}
