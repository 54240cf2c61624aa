//! Experiment configuration: flat `key = value` files with `#` comments.
//! Unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::network::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub train_samples: usize,
    pub test_samples: usize,
    pub multiscale: bool,
    /// Dataset directory written by `synth`; scenes are generated in memory when unset.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            scene: SceneSpec::default(),
            train_samples: 512,
            test_samples: 128,
            multiscale: false,
            data: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

/// `(line number, key, value)` triples in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        pairs.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

pub fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.scene;
        match key {
            "seed" => t.seed = num(key, v)?,
            "fusion" => m.fusion = v.parse::<FusionStrategy>()?,
            "dfp" => m.dfp = parse_switch(key, v)?,
            "dfp_literal_indexing" => m.dfp_literal_indexing = parse_switch(key, v)?,
            "stage_widths" => {
                let w: Vec<usize> = list(key, v)?;
                m.stage_widths = w
                    .try_into()
                    .map_err(|w: Vec<usize>| Error::Config(format!("{key}: expected 4 widths, got {}", w.len())))?;
            }
            "width" => m.width = num(key, v)?,
            "aux_weight" => m.aux_weight = num(key, v)?,
            "ppm_bins" => m.ppm_bins = list(key, v)?,
            "bn_eps" => m.bn_eps = num(key, v)?,
            "bn_momentum" => m.bn_momentum = num(key, v)?,
            "iterations" => t.iterations = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "base_lr" => t.base_lr = num(key, v)?,
            "momentum" => t.momentum = num(key, v)?,
            "weight_decay" => t.weight_decay = num(key, v)?,
            "lr_power" => t.lr_power = num(key, v)?,
            "crop" => {
                let c: usize = num(key, v)?;
                t.augment.crop = (c, c);
            }
            "scale_min" => t.augment.scale.0 = num(key, v)?,
            "scale_max" => t.augment.scale.1 = num(key, v)?,
            "flip_prob" => t.augment.flip_prob = num(key, v)?,
            "jitter" => t.augment.jitter = num(key, v)?,
            "threads" => t.threads = num(key, v)?,
            "data_seed" => s.seed = num(key, v)?,
            "image_size" => {
                let n: usize = num(key, v)?;
                s.height = n;
                s.width = n;
            }
            "noise_sigma" => s.noise_sigma = num(key, v)?,
            "tint" => s.tint = num(key, v)?,
            "train_samples" => self.train_samples = num(key, v)?,
            "test_samples" => self.test_samples = num(key, v)?,
            "multiscale" => self.multiscale = parse_switch(key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (line, k, v) in parse_pairs(text)? {
            cfg.set(&k, &v).map_err(|e| Error::Config(format!("line {line}: {e}")))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train_samples == 0 {
            return Err(Error::Config("train_samples must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its current value; [`ExperimentConfig::from_text`] reads it back.
    /// `out` is left out: the text is saved inside the output directory, and two
    /// runs that differ only in where they write should produce identical files.
    pub fn to_text(&self) -> String {
        let (m, t, s) = (&self.model, &self.train, &self.scene);
        let mut out = String::from("# gff-lab experiment\n");
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("seed", t.seed.to_string());
        kv("fusion", m.fusion.to_string());
        kv("dfp", on_off(m.dfp).into());
        kv("dfp_literal_indexing", on_off(m.dfp_literal_indexing).into());
        kv("stage_widths", join(&m.stage_widths));
        kv("width", m.width.to_string());
        kv("aux_weight", m.aux_weight.to_string());
        kv("ppm_bins", join(&m.ppm_bins));
        kv("bn_eps", m.bn_eps.to_string());
        kv("bn_momentum", m.bn_momentum.to_string());
        kv("iterations", t.iterations.to_string());
        kv("batch", t.batch.to_string());
        kv("base_lr", t.base_lr.to_string());
        kv("momentum", t.momentum.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("lr_power", t.lr_power.to_string());
        kv("crop", t.augment.crop.0.to_string());
        kv("scale_min", t.augment.scale.0.to_string());
        kv("scale_max", t.augment.scale.1.to_string());
        kv("flip_prob", t.augment.flip_prob.to_string());
        kv("jitter", t.augment.jitter.to_string());
        kv("threads", t.threads.to_string());
        kv("data_seed", s.seed.to_string());
        kv("image_size", s.height.to_string());
        kv("noise_sigma", s.noise_sigma.to_string());
        kv("tint", s.tint.to_string());
        kv("train_samples", self.train_samples.to_string());
        kv("test_samples", self.test_samples.to_string());
        kv("multiscale", on_off(self.multiscale).into());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        out
    }
}
