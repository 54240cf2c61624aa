//! Synthetic street scenes: large buildings, medium cars, thin poles and
//! small lights on top of the poles, drawn as flat colors with pixel noise.
//!
//! Every sample draws from its own derived stream, so sample `i` does not
//! depend on how many samples come before it.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::IGNORE_LABEL;
use crate::rng::Seeds;
use crate::tensor::{io, LabelMap, Tensor};

pub const CLASSES: usize = 5;
pub const CLASS_NAMES: [&str; CLASSES] = ["background", "building", "car", "pole", "light"];
pub const BACKGROUND: u8 = 0;
pub const BUILDING: u8 = 1;
pub const CAR: u8 = 2;
pub const POLE: u8 = 3;
pub const LIGHT: u8 = 4;

const PALETTE: [[f32; 3]; CLASSES] = [
    [95.0, 110.0, 125.0],
    [170.0, 150.0, 120.0],
    [40.0, 60.0, 170.0],
    [60.0, 60.0, 60.0],
    [235.0, 210.0, 60.0],
];

/// Offset between training and test sample indices.
const TEST_OFFSET: u64 = 1 << 32;

/// One image `[3, H, W]` in `[0, 255]` with its `[1, H, W]` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
}

impl SegmentationSample {
    pub fn new(image: Tensor<f32>, labels: LabelMap) -> Result<Self> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 || labels.n != 1 || (shape[1], shape[2]) != (labels.h, labels.w) {
            return Err(Error::Shape(format!(
                "image {shape:?} does not match labels {}x{}x{}",
                labels.n, labels.h, labels.w
            )));
        }
        Ok(SegmentationSample { image, labels })
    }

    pub fn height(&self) -> usize {
        self.labels.h
    }

    pub fn width(&self) -> usize {
        self.labels.w
    }
}

/// Inclusive object-count range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Count {
    pub min: usize,
    pub max: usize,
}

impl Count {
    pub const fn new(min: usize, max: usize) -> Self {
        Count { min, max }
    }

    pub const fn none() -> Self {
        Count { min: 0, max: 0 }
    }

    fn draw(self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min..=self.max.max(self.min))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub buildings: Count,
    pub cars: Count,
    pub poles: Count,
    /// Lights beyond the number of drawn poles are dropped.
    pub lights: Count,
    pub noise_sigma: f64,
    /// Per-object color offset, uniform in `[-tint, tint]` per channel.
    pub tint: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            buildings: Count::new(1, 3),
            cars: Count::new(1, 3),
            poles: Count::new(1, 3),
            lights: Count::new(1, 3),
            noise_sigma: 12.0,
            tint: 20.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => TEST_OFFSET,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

struct Canvas {
    h: usize,
    w: usize,
    rgb: Vec<[f32; 3]>,
    labels: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, y: usize, x: usize, class: u8, color: [f32; 3]) {
        if y < self.h && x < self.w {
            self.rgb[y * self.w + x] = color;
            self.labels[y * self.w + x] = class;
        }
    }

    fn rect(&mut self, y0: usize, x0: usize, y1: usize, x1: usize, class: u8, color: [f32; 3]) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                self.paint(y, x, class, color);
            }
        }
    }
}

fn tinted(class: u8, tint: f64, rng: &mut impl Rng) -> [f32; 3] {
    let base = PALETTE[class as usize];
    let mut c = [0.0; 3];
    for (o, b) in c.iter_mut().zip(base) {
        let d = if tint > 0.0 { rng.gen_range(-tint..=tint) } else { 0.0 };
        *o = (b as f64 + d).clamp(0.0, 255.0) as f32;
    }
    c
}

/// Column positions at least `gap` apart, at most `n` of them.
fn spaced_columns(n: usize, w: usize, gap: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut xs: Vec<usize> = Vec::with_capacity(n);
    let margin = 2.min(w / 4);
    for _ in 0..n * 20 {
        if xs.len() == n {
            break;
        }
        let x = rng.gen_range(margin..w - margin - 1);
        if xs.iter().all(|&o| o.abs_diff(x) >= gap) {
            xs.push(x);
        }
    }
    xs
}

fn draw_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<SegmentationSample> {
    let (h, w) = (spec.height, spec.width);
    let bg = tinted(BACKGROUND, spec.tint * 0.75, rng);
    let mut cv = Canvas { h, w, rgb: vec![bg; h * w], labels: vec![BACKGROUND; h * w] };

    for _ in 0..spec.buildings.draw(rng) {
        let bw = rng.gen_range(w / 6..=w / 2);
        let bh = rng.gen_range(h / 4..=2 * h / 3);
        let x0 = rng.gen_range(0..w - bw / 2);
        let bottom = rng.gen_range(h / 2..=h);
        let color = tinted(BUILDING, spec.tint, rng);
        cv.rect(bottom.saturating_sub(bh), x0, bottom, x0 + bw, BUILDING, color);
    }

    for _ in 0..spec.cars.draw(rng) {
        let rx = rng.gen_range((w / 16).max(2)..=(w / 9).max(3)) as f64;
        let ry = (rx * rng.gen_range(0.5..0.7)).max(1.5);
        let cy = rng.gen_range(h as f64 / 3.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let color = tinted(CAR, spec.tint, rng);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                if dx * dx + dy * dy <= 1.0 {
                    cv.paint(y, x, CAR, color);
                }
            }
        }
    }

    // poles stay at least 6 columns apart so neither two poles nor a light
    // and a neighbouring pole can merge into a wider component
    let xs = spaced_columns(spec.poles.draw(rng), w, 6, rng);
    let mut tops = Vec::with_capacity(xs.len());
    for &x in &xs {
        let pw = rng.gen_range(1..=2);
        let ph = rng.gen_range(h / 5..=h / 2);
        let bottom = rng.gen_range(h / 2..=h);
        let top = bottom.saturating_sub(ph).max(3);
        let color = tinted(POLE, spec.tint, rng);
        cv.rect(top, x, bottom, x + pw, POLE, color);
        tops.push((top, x, pw));
    }
    let lights = spec.lights.draw(rng).min(tops.len());
    for &(top, x, pw) in &tops[..lights] {
        let s = rng.gen_range(2..=3usize);
        let x0 = (x + pw / 2).saturating_sub(s / 2);
        let color = tinted(LIGHT, spec.tint, rng);
        cv.rect(top - s, x0, top, x0 + s, LIGHT, color);
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut image = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for p in 0..h * w {
            let v = cv.rgb[p][c] as f64 + noise.sample(rng);
            image[c * h * w + p] = v.clamp(0.0, 255.0) as f32;
        }
    }
    SegmentationSample::new(Tensor::new(&[3, h, w], image)?, LabelMap::new(1, h, w, cv.labels)?)
}

fn check_spec(spec: &SceneSpec) -> Result<()> {
    if spec.height < 32 || spec.width < 32 {
        return Err(Error::Config(format!("scene size {}x{} is below 32x32", spec.height, spec.width)));
    }
    if !(spec.noise_sigma >= 0.0) || !(spec.tint >= 0.0) {
        return Err(Error::Config("noise sigma and tint must be non-negative".into()));
    }
    Ok(())
}

/// Sample `index` of a split; the same arguments always give the same sample.
pub fn scene(spec: &SceneSpec, split: Split, index: u64) -> Result<SegmentationSample> {
    check_spec(spec)?;
    let mut rng = Seeds::new(spec.seed).indexed("scene", split.offset() + index);
    draw_scene(spec, &mut rng)
}

/// The first `n` training samples.
pub fn generate(spec: &SceneSpec, n: usize) -> Result<Vec<SegmentationSample>> {
    generate_split(spec, Split::Train, n)
}

pub fn generate_split(spec: &SceneSpec, split: Split, n: usize) -> Result<Vec<SegmentationSample>> {
    (0..n as u64).map(|i| scene(spec, split, i)).collect()
}

/// Pixel count per class; ignored pixels are not counted.
pub fn class_pixel_counts(samples: &[SegmentationSample], classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for s in samples {
        for &l in &s.labels.data {
            if (l as usize) < classes {
                counts[l as usize] += 1;
            }
        }
    }
    counts
}

pub const INDEX_FILE: &str = "index.txt";

pub fn sample_id(split: Split, i: usize) -> String {
    format!("{}_{i:05}", split.name())
}

/// Writes `{id}_img.gfft`, `{id}_lbl.gfft` per sample and an index listing the ids.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[(String, SegmentationSample)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (id, s) in samples {
        if id.is_empty() || id.contains(char::is_whitespace) || id.contains('/') {
            return Err(Error::Invalid(format!("sample id {id:?}")));
        }
        io::save(dir.join(format!("{id}_img.gfft")), &s.image)?;
        let labels = Tensor::new(&[s.height(), s.width()], s.labels.data.iter().map(|&l| l as f32).collect())?;
        io::save(dir.join(format!("{id}_lbl.gfft")), &labels)?;
        index.push_str(id);
        index.push('\n');
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(path, e))
}

pub fn read_ids(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = dir.as_ref().join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

pub fn read_sample(dir: impl AsRef<Path>, id: &str) -> Result<SegmentationSample> {
    let dir = dir.as_ref();
    let image = io::load::<f32>(dir.join(format!("{id}_img.gfft")))?;
    let raw = io::load::<f32>(dir.join(format!("{id}_lbl.gfft")))?;
    let &[h, w] = raw.shape() else {
        return Err(Error::format("label dump", format!("{id}: expected 2 dimensions, got {:?}", raw.shape())));
    };
    let mut labels = Vec::with_capacity(h * w);
    for &v in raw.data() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::format("label dump", format!("{id}: label value {v}")));
        }
        labels.push(v as u8);
    }
    SegmentationSample::new(image, LabelMap::new(1, h, w, labels)?)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<(String, SegmentationSample)>> {
    let dir = dir.as_ref();
    read_ids(dir)?.into_iter().map(|id| read_sample(dir, &id).map(|s| (id, s))).collect()
}

/// True when every pixel is a known class or the ignore label.
pub fn labels_valid(s: &SegmentationSample, classes: usize) -> bool {
    s.labels.data.iter().all(|&l| (l as usize) < classes || l == IGNORE_LABEL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_background_without_objects() {
        let spec = SceneSpec {
            buildings: Count::none(),
            cars: Count::none(),
            poles: Count::none(),
            lights: Count::none(),
            ..SceneSpec::default()
        };
        for s in generate(&spec, 5).unwrap() {
            assert!(s.labels.data.iter().all(|&l| l == BACKGROUND));
        }
    }

    #[test]
    fn deterministic_and_index_addressed() {
        let spec = SceneSpec { seed: 9, ..SceneSpec::default() };
        let a = generate(&spec, 4).unwrap();
        let b = generate(&spec, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(scene(&spec, Split::Train, 3).unwrap(), a[3]);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn image_range_and_labels() {
        for s in generate(&SceneSpec::default(), 10).unwrap() {
            assert!(s.image.min() >= 0.0 && s.image.max() <= 255.0);
            assert!(labels_valid(&s, CLASSES));
        }
    }

    #[test]
    fn rejects_small_scenes() {
        let spec = SceneSpec { height: 16, ..SceneSpec::default() };
        assert!(scene(&spec, Split::Train, 0).is_err());
    }
}
