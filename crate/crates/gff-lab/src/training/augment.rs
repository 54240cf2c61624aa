//! Training-time augmentation: random scale, horizontal flip, per-channel
//! color jitter and random crop, applied in that order.

use rand::Rng;

use crate::data::SegmentationSample;
use crate::error::{Error, Result};
use crate::network::IGNORE_LABEL;
use crate::tensor::{kernels, LabelMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Output `(height, width)`.
    pub crop: (usize, usize),
    /// Additive offset range `[-jitter, jitter]` on the 0..255 scale.
    pub jitter: f64,
    pub scale: (f64, f64),
}

impl AugmentConfig {
    pub fn standard(crop: (usize, usize)) -> Self {
        AugmentConfig { flip_prob: 0.5, crop, jitter: 10.0, scale: (0.75, 2.0) }
    }

    /// Leaves `h x w` samples untouched.
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentConfig { flip_prob: 0.0, crop: (h, w), jitter: 0.0, scale: (1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale range ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(self.jitter >= 0.0) {
            return Err(Error::Config("flip probability must lie in [0,1] and jitter be non-negative".into()));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Bilinear image resize with nearest-neighbour labels.
pub fn rescale(s: &SegmentationSample, oh: usize, ow: usize) -> Result<SegmentationSample> {
    let (h, w) = (s.height(), s.width());
    if (oh, ow) == (h, w) {
        return Ok(s.clone());
    }
    let image = Tensor::new(&[3, oh, ow], kernels::resample_forward(s.image.data(), 3, h, w, oh, ow))?;
    let ys: Vec<usize> = (0..oh).map(|y| (((y as f64 + 0.5) * h as f64 / oh as f64) as usize).min(h - 1)).collect();
    let xs: Vec<usize> = (0..ow).map(|x| (((x as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1)).collect();
    let mut labels = Vec::with_capacity(oh * ow);
    for &y in &ys {
        labels.extend(xs.iter().map(|&x| s.labels.get(0, y, x)));
    }
    SegmentationSample::new(image, LabelMap::new(1, oh, ow, labels)?)
}

pub fn hflip(s: &SegmentationSample) -> SegmentationSample {
    let (h, w) = (s.height(), s.width());
    let mut image = s.image.clone();
    for row in image.data_mut().chunks_mut(w) {
        row.reverse();
    }
    let mut labels = s.labels.clone();
    for row in labels.data.chunks_mut(w) {
        row.reverse();
    }
    debug_assert_eq!(labels.data.len(), h * w);
    SegmentationSample { image, labels }
}

/// Window of size `crop` at `(y0, x0)`; pixels beyond the sample are zero
/// in the image and the ignore label in the labels.
pub fn crop_at(s: &SegmentationSample, y0: usize, x0: usize, (ch, cw): (usize, usize)) -> Result<SegmentationSample> {
    let (h, w) = (s.height(), s.width());
    let src = s.image.data();
    let mut image = vec![0.0f32; 3 * ch * cw];
    let mut labels = vec![IGNORE_LABEL; ch * cw];
    for y in 0..ch {
        let sy = y0 + y;
        if sy >= h {
            break;
        }
        for x in 0..cw {
            let sx = x0 + x;
            if sx >= w {
                break;
            }
            for c in 0..3 {
                image[(c * ch + y) * cw + x] = src[(c * h + sy) * w + sx];
            }
            labels[y * cw + x] = s.labels.get(0, sy, sx);
        }
    }
    SegmentationSample::new(Tensor::new(&[3, ch, cw], image)?, LabelMap::new(1, ch, cw, labels)?)
}

pub fn augment(s: &SegmentationSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<SegmentationSample> {
    cfg.validate()?;
    let (lo, hi) = cfg.scale;
    let u = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let oh = ((s.height() as f64 * u).round() as usize).max(1);
    let ow = ((s.width() as f64 * u).round() as usize).max(1);
    let mut out = rescale(s, oh, ow)?;

    if rng.gen_bool(cfg.flip_prob) {
        out = hflip(&out);
    }

    let plane = oh * ow;
    for c in 0..3 {
        let d = if cfg.jitter > 0.0 { rng.gen_range(-cfg.jitter..=cfg.jitter) as f32 } else { 0.0 };
        for v in &mut out.image.data_mut()[c * plane..(c + 1) * plane] {
            *v = (*v + d).clamp(0.0, 255.0);
        }
    }

    let (ch, cw) = cfg.crop;
    let y0 = rng.gen_range(0..=oh.saturating_sub(ch));
    let x0 = rng.gen_range(0..=ow.saturating_sub(cw));
    if (y0, x0, ch, cw) == (0, 0, oh, ow) {
        return Ok(out);
    }
    crop_at(&out, y0, x0, cfg.crop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_config_is_identity() {
        let s = &generate(&SceneSpec::default(), 1).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(s, &AugmentConfig::identity(64, 64), &mut rng).unwrap();
        assert_eq!(&out, s);
    }

    #[test]
    fn flip_is_an_involution() {
        let s = &generate(&SceneSpec::default(), 1).unwrap()[0];
        assert_eq!(&hflip(&hflip(s)), s);
        assert_ne!(&hflip(s), s);
    }

    #[test]
    fn padding_uses_ignore_label() {
        let s = &generate(&SceneSpec::default(), 1).unwrap()[0];
        let out = crop_at(s, 40, 40, (32, 32)).unwrap();
        assert_eq!(out.labels.get(0, 31, 31), IGNORE_LABEL);
        assert_eq!(out.image.data()[31 * 32 + 31], 0.0);
        assert_eq!(out.labels.get(0, 0, 0), s.labels.get(0, 40, 40));
    }
}
