//! The `gff` command line: dataset synthesis, training, evaluation, gradient
//! checks, gate export, gate ablation and cost tables.
//!
//! Exit codes: 0 success, 1 usage error, 2 I/O or data error, 3 numeric failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checks;
use crate::config::{parse_switch, ExperimentConfig};
use crate::data::{self, SegmentationSample, Split, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::export::{gate_file_name, Gray};
use crate::fusion::FusionStrategy;
use crate::inspect;
use crate::network::cost::{count_params_flops, Cost};
use crate::network::params::ParamStore;
use crate::network::{checkpoint, Model, ModelConfig};
use crate::training::{self, EvalOptions, MULTISCALE};

#[derive(Parser, Debug)]
#[command(name = "gff", version, about = "Multi-level feature fusion lab for semantic segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Convolution workers; results stay deterministic for a fixed count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Extra `key=value` config overrides.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write train and test splits of synthetic scenes.
    Synth {
        #[arg(long)]
        train_samples: Option<usize>,
        #[arg(long)]
        test_samples: Option<usize>,
    },
    /// Train a model and write checkpoint, loss log and test metrics.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Dataset directory from `synth`; scenes are generated in memory otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitArg,
        /// Average probabilities over scales 0.75..1.75.
        #[arg(long)]
        multiscale: bool,
        /// Explicit comma-separated test scales.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
    },
    /// Finite-difference gradient checks of every operation and a micro model.
    Gradcheck {
        /// Skip the end-to-end model check.
        #[arg(long)]
        ops_only: bool,
    },
    /// Export gate maps as PGM images and print per-level statistics.
    Gates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitArg,
        /// Comma-separated sample ids; defaults to the first two of the split.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
    /// Compare predictions with one gate (or all gates) forced to zero.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitArg,
        /// 1-based pyramid level, or `all`.
        #[arg(long)]
        level: String,
    },
    /// Parameter and multiply-accumulate table for baseline, +GFF and +GFF+DFP.
    Bench {
        #[arg(long, default_value_t = 512)]
        size: usize,
        /// `desk` or `full` (256-channel fusion width).
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelFlags {
    /// concat | addition | fpn | gated_fpn | gff
    #[arg(long)]
    pub fusion: Option<String>,
    /// on | off
    #[arg(long)]
    pub dfp: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Invalid(_) => 1,
        Error::NonFinite(_) | Error::Diverged { .. } => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, A>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    match execute(&cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Config file (or the one stored next to `checkpoint`), then flag overrides.
fn resolve_config(common: &Common, checkpoint: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match (&common.config, checkpoint) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(ck)) => {
            let stored = ck.parent().map(|p| p.join(CONFIG_FILE));
            match stored {
                Some(p) if p.exists() => ExperimentConfig::load(p)?,
                _ => ExperimentConfig::default(),
            }
        }
        (None, None) => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    Ok(cfg)
}

fn apply_model_flags(cfg: &mut ExperimentConfig, flags: &ModelFlags) -> Result<()> {
    if let Some(f) = &flags.fusion {
        cfg.model.fusion = f.parse::<FusionStrategy>()?;
    }
    if let Some(d) = &flags.dfp {
        cfg.model.dfp = parse_switch("dfp", d)?;
    }
    Ok(())
}

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG_FILE: &str = "log.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Samples of a split with their ids, from disk when a dataset directory is set.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<(String, SegmentationSample)>> {
    match &cfg.data {
        Some(dir) => data::read_dataset(dir.join(split.name())),
        None => {
            let n = match split {
                Split::Train => cfg.train_samples,
                Split::Test => cfg.test_samples,
            };
            Ok(data::generate_split(&cfg.scene, split, n)?
                .into_iter()
                .enumerate()
                .map(|(i, s)| (data::sample_id(split, i), s))
                .collect())
        }
    }
}

fn samples_only(v: Vec<(String, SegmentationSample)>) -> Vec<SegmentationSample> {
    v.into_iter().map(|(_, s)| s).collect()
}

/// Rebuilds the model of `cfg` and loads the checkpoint into it.
pub fn load_model(cfg: &ExperimentConfig, dir: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed)?;
    store.load_from(checkpoint::load::<f32>(dir)?)?;
    Ok((model, store))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Synth { train_samples, test_samples } => {
            let mut cfg = resolve_config(&cli.common, None)?;
            if let Some(n) = train_samples {
                cfg.train_samples = *n;
            }
            if let Some(n) = test_samples {
                cfg.test_samples = *n;
            }
            let text = synth(&cfg)?;
            out.write_all(text.as_bytes()).map_err(io_err)
        }
        Command::Train { model, iterations, batch, data } => {
            let mut cfg = resolve_config(&cli.common, None)?;
            apply_model_flags(&mut cfg, model)?;
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            if let Some(n) = batch {
                cfg.train.batch = *n;
            }
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            let text = train(&cfg, err)?;
            out.write_all(text.as_bytes()).map_err(io_err)
        }
        Command::Eval { checkpoint, data, split, multiscale, scales } => {
            let mut cfg = resolve_config(&cli.common, Some(checkpoint))?;
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            let scales = match scales {
                Some(s) => s.clone(),
                None if *multiscale || cfg.multiscale => MULTISCALE.to_vec(),
                None => vec![1.0],
            };
            let csv = eval(&cfg, checkpoint, (*split).into(), &scales)?;
            if cli.common.out.is_some() {
                create_dir(&cfg.out)?;
                write_file(&cfg.out.join(format!("metrics_{}.csv", Split::from(*split).name())), &csv)?;
            }
            out.write_all(csv.as_bytes()).map_err(io_err)
        }
        Command::Gradcheck { ops_only } => gradcheck(cli.common.seed.unwrap_or(0), !ops_only, out),
        Command::Gates { checkpoint, data, split, ids } => {
            let mut cfg = resolve_config(&cli.common, Some(checkpoint))?;
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            let text = gates(&cfg, checkpoint, (*split).into(), ids)?;
            out.write_all(text.as_bytes()).map_err(io_err)
        }
        Command::Ablate { checkpoint, data, split, level } => {
            let mut cfg = resolve_config(&cli.common, Some(checkpoint))?;
            if let Some(d) = data {
                cfg.data = Some(d.clone());
            }
            let levels = if level == "all" {
                Vec::new()
            } else {
                let l: usize = level.parse().map_err(|_| Error::Config(format!("level {level:?} is not a number or `all`")))?;
                if l == 0 {
                    return Err(Error::Invalid("levels are numbered from 1".into()));
                }
                vec![l - 1]
            };
            let text = ablate(&cfg, checkpoint, (*split).into(), &levels)?;
            out.write_all(text.as_bytes()).map_err(io_err)
        }
        Command::Bench { size, preset } => {
            let cfg = resolve_config(&cli.common, None)?;
            let base = match preset.as_str() {
                "desk" => cfg.model.clone(),
                "full" => ModelConfig { classes: cfg.model.classes, ..ModelConfig::full_width() },
                _ => return Err(Error::Config(format!("unknown preset {preset:?} (expected desk|full)"))),
            };
            let rows = cost_table(&base, *size, *size)?;
            out.write_all(format_cost_table(&rows, *size, *size).as_bytes()).map_err(io_err)
        }
    }
}

/// Writes both splits below `cfg.out` and returns a per-class pixel table.
pub fn synth(cfg: &ExperimentConfig) -> Result<String> {
    let mut text = String::from("split,samples");
    for name in CLASS_NAMES {
        write!(text, ",{name}").unwrap();
    }
    text.push_str(",total\n");
    for (split, n) in [(Split::Train, cfg.train_samples), (Split::Test, cfg.test_samples)] {
        let samples = data::generate_split(&cfg.scene, split, n)?;
        let named: Vec<(String, SegmentationSample)> =
            samples.into_iter().enumerate().map(|(i, s)| (data::sample_id(split, i), s)).collect();
        data::write_dataset(cfg.out.join(split.name()), &named)?;
        let counts = data::class_pixel_counts(&samples_only(named), CLASS_NAMES.len());
        write!(text, "{},{n}", split.name()).unwrap();
        for c in &counts {
            write!(text, ",{c}").unwrap();
        }
        writeln!(text, ",{}", counts.iter().sum::<u64>()).unwrap();
    }
    Ok(text)
}

/// Trains per `cfg` and writes config, checkpoint, loss log and test metrics below `cfg.out`.
pub fn train(cfg: &ExperimentConfig, progress: &mut dyn Write) -> Result<String> {
    cfg.validate()?;
    let train_set = samples_only(load_split(cfg, Split::Train)?);
    let test_set = samples_only(load_split(cfg, Split::Test)?);
    let (model, mut store) = Model::build::<f32>(&cfg.model, cfg.train.seed)?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join(CONFIG_FILE), &cfg.to_text())?;
    let every = (cfg.train.iterations / 20).max(1);
    let log = training::train(&model, &mut store, &train_set, &cfg.train, |r| {
        if r.iter % every == 0 || r.iter + 1 == cfg.train.iterations {
            let _ = writeln!(progress, "iter {:>5}  lr {:.3e}  loss {:.4} (main {:.4}, aux {:.4})", r.iter, r.lr, r.loss_total, r.loss_main, r.loss_aux);
        }
    })?;
    write_file(&cfg.out.join(LOG_FILE), &training::log_csv(&log))?;
    checkpoint::save(cfg.out.join(CHECKPOINT_DIR), &store)?;
    let mut summary = format!("trained {} ({} dfp) for {} iterations\n", cfg.model.fusion, if cfg.model.dfp { "with" } else { "without" }, log.len());
    if !test_set.is_empty() {
        let ev = training::evaluate(&model, &store, &test_set, &EvalOptions::default())?;
        let csv = ev.confusion.to_csv(&CLASS_NAMES)?;
        write_file(&cfg.out.join(METRICS_FILE), &csv)?;
        summary.push_str(&csv);
    }
    Ok(summary)
}

pub fn eval(cfg: &ExperimentConfig, checkpoint_dir: &Path, split: Split, scales: &[f64]) -> Result<String> {
    let (model, store) = load_model(cfg, checkpoint_dir)?;
    let samples = samples_only(load_split(cfg, split)?);
    let opts = EvalOptions { scales: scales.to_vec(), ..EvalOptions::default() };
    training::evaluate(&model, &store, &samples, &opts)?.confusion.to_csv(&CLASS_NAMES)
}

pub fn gradcheck(seed: u64, with_model: bool, out: &mut dyn Write) -> Result<()> {
    let mut failed = Vec::new();
    let mut line = |name: &str, r: &crate::tensor::gradcheck::GradcheckReport| -> Result<()> {
        let ok = r.passes(checks::TOLERANCE);
        if !ok {
            failed.push(name.to_string());
        }
        let verdict = if ok { "ok" } else { "FAIL" };
        let kinked = if r.kinked > 0 { format!("  ({} across relu kinks)", r.kinked) } else { String::new() };
        writeln!(out, "{name:<30} {:>6} coords  max rel err {:.3e}  {verdict}{kinked}", r.coordinates, r.max_rel_error).map_err(io_err)
    };
    for (name, r) in checks::op_suite(seed)? {
        line(name, &r)?;
    }
    if with_model {
        line("micro model (gff + dfp)", &checks::micro_model_gradcheck(seed)?)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn gates(cfg: &ExperimentConfig, checkpoint_dir: &Path, split: Split, ids: &[String]) -> Result<String> {
    let (model, store) = load_model(cfg, checkpoint_dir)?;
    if !model.config.fusion.uses_gates() {
        return Ok(format!("no gates: fusion strategy {} has none\n", model.config.fusion));
    }
    let all = load_split(cfg, split)?;
    let chosen: Vec<&(String, SegmentationSample)> = if ids.is_empty() {
        all.iter().take(2).collect()
    } else {
        ids.iter()
            .map(|id| all.iter().find(|(i, _)| i == id).ok_or_else(|| Error::format("sample id", format!("{id:?} not found in the {} split", split.name()))))
            .collect::<Result<_>>()?
    };
    create_dir(&cfg.out)?;
    let mut maps = Vec::with_capacity(chosen.len());
    for (id, s) in &chosen {
        let levels = inspect::gate_maps(&model, &store, s)?;
        for (l, m) in levels.iter().enumerate() {
            let &[h, w] = m.shape() else { unreachable!("gate maps are 2-d") };
            Gray::from_unit(h, w, m.data())?.save(cfg.out.join(gate_file_name(l + 1, id)))?;
        }
        maps.push(levels);
    }
    let mut text = String::from("level,mean,std\n");
    for (l, st) in inspect::gate_stats(&maps).iter().enumerate() {
        writeln!(text, "{},{:.6},{:.6}", l + 1, st.mean, st.std).unwrap();
    }
    Ok(text)
}

pub fn ablate(cfg: &ExperimentConfig, checkpoint_dir: &Path, split: Split, levels: &[usize]) -> Result<String> {
    let (model, store) = load_model(cfg, checkpoint_dir)?;
    let samples = load_split(cfg, split)?;
    let overrides = inspect::zero_gates(&model, levels)?;
    let (ids, samples): (Vec<String>, Vec<SegmentationSample>) = samples.into_iter().unzip();
    let report = inspect::ablate(&model, &store, &samples, &overrides, &EvalOptions::default())?;
    let tag = if levels.is_empty() { "all".to_string() } else { levels.iter().map(|l| (l + 1).to_string()).collect::<Vec<_>>().join("+") };
    let dir = cfg.out.join(format!("ablate_L{tag}"));
    create_dir(&dir)?;

    let mut per_sample = String::from("sample,changed,pixels\n");
    for ((id, &c), (m, s)) in ids.iter().zip(&report.changed).zip(report.masks.iter().zip(&samples)) {
        writeln!(per_sample, "{id},{c},{}", m.len()).unwrap();
        Gray::from_mask(s.height(), s.width(), m)?.save(dir.join(format!("mask_{id}.pgm")))?;
    }
    write_file(&dir.join("changed.csv"), &per_sample)?;

    let mut table = String::from("class,iou_normal,iou_ablated,delta\n");
    let (n, a) = (report.normal.per_class_iou()?, report.ablated.per_class_iou()?);
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let d = n[c].zip(a[c]).map(|(n, a)| a - n);
        writeln!(table, "{name},{},{},{}", fmt(n[c]), fmt(a[c]), fmt(d)).unwrap();
    }
    writeln!(table, "mIoU,{:.6},{:.6},{:.6}", report.normal.miou()?, report.ablated.miou()?, report.miou_delta()?).unwrap();
    write_file(&dir.join("iou_delta.csv"), &table)?;

    let mut text = String::new();
    if !report.has_gates {
        writeln!(text, "no gates: fusion strategy {} has none; predictions unchanged", model.config.fusion).unwrap();
    }
    writeln!(
        text,
        "gates zeroed at level {tag}: {} of {} pixels changed ({:.3}%)",
        report.changed.iter().sum::<usize>(),
        report.pixels,
        100.0 * report.changed_fraction()
    )
    .unwrap();
    text.push_str(&table);
    Ok(text)
}

/// Rows `baseline` (addition, no dense pyramid), `+GFF` and `+GFF+DFP` built from `base`.
pub fn cost_table(base: &ModelConfig, h: usize, w: usize) -> Result<Vec<(&'static str, Cost)>> {
    let rows = [
        ("baseline", FusionStrategy::Addition, false),
        ("+GFF", FusionStrategy::Gff, false),
        ("+GFF+DFP", FusionStrategy::Gff, true),
    ];
    rows.iter()
        .map(|&(name, fusion, dfp)| {
            let (model, _) = Model::build::<f32>(&base.clone().with_fusion(fusion, dfp), 0)?;
            Ok((name, count_params_flops(&model, h, w)))
        })
        .collect()
}

pub fn format_cost_table(rows: &[(&str, Cost)], h: usize, w: usize) -> String {
    let mut text = format!("input {h}x{w}\n{:<10} {:>14} {:>14} {:>12}\n", "config", "params", "MACs", "GMACs");
    for (name, c) in rows {
        writeln!(text, "{:<10} {:>14} {:>14} {:>12.3}", name, c.params, c.macs, c.macs as f64 / 1e9).unwrap();
    }
    text
}
