//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! The training regression trains six desk models (two fusion strategies, three
//! seeds, 2000 iterations each), so expect this target to take most of an hour
//! on a single core.

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use gff_lab::checks;
use gff_lab::cli;
use gff_lab::config::ExperimentConfig;
use gff_lab::data::{self, Split, LIGHT, POLE};
use gff_lab::export::Gray;
use gff_lab::fusion::{self, FeaturePyramid, FusionStrategy};
use gff_lab::inspect;
use gff_lab::metrics::ConfusionMatrix;
use gff_lab::network::cost::count_params_flops;
use gff_lab::network::params::{ParamId, ParamKind, ParamStore};
use gff_lab::network::{checkpoint, Model, ModelConfig};
use gff_lab::tensor::{io, Graph, LabelMap, Tensor};
use gff_lab::training::optim::{poly_lr, sgd_step, OptimState, Schedule};
use gff_lab::training::{self, EvalOptions};
use rand::Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = ("", 0.0f64);
    for (name, r) in checks::op_suite(0).map_err(err)? {
        ensure(r.passes(1e-4), format!("{name}: {:.3e}", r.max_rel_error))?;
        if r.max_rel_error > worst.1 {
            worst = (name, r.max_rel_error);
        }
    }
    let m = checks::micro_model_gradcheck(0).map_err(err)?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(m.passes(1e-4), format!("micro model: {:.3e}", m.max_rel_error))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("worst op {} {:.2e}, micro model {:.2e} over {} coords, {secs:.1}s", worst.0, worst.1, m.max_rel_error, m.coordinates))
}

fn gff_identities() -> Outcome {
    let mut r = rng(7);
    let mut g = Graph::<f64>::new();
    let xs: Vec<_> = [16, 8, 4, 4].iter().map(|&s| g.constant(random_tensor(&mut r, &[2, 3, s, s]))).collect();
    let p = FeaturePyramid::new(&g, xs.clone()).map_err(err)?;
    let bits = |g: &Graph<f64>, v| g.value(v).data().iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
    let gate = |g: &mut Graph<f64>, x, v: f64| {
        let [n, _, h, w] = g.dims4(x).unwrap();
        g.constant(Tensor::full(&[n, 1, h, w], v))
    };

    let zeros: Vec<_> = xs.iter().map(|&x| gate(&mut g, x, 0.0)).collect();
    let fused = fusion::gff(&mut g, &p, &zeros).map_err(err)?;
    for (f, x) in fused.iter().zip(&xs) {
        ensure(bits(&g, *f) == bits(&g, *x), "zero gates are not the identity")?;
    }
    for l in 0..4 {
        let gates: Vec<_> = xs.iter().enumerate().map(|(i, &x)| gate(&mut g, x, if i == l { 1.0 } else { 0.3 })).collect();
        let fused = fusion::gff(&mut g, &p, &gates).map_err(err)?;
        let doubled: Vec<u64> = g.value(xs[l]).data().iter().map(|v| (2.0 * v).to_bits()).collect();
        ensure(bits(&g, fused[l]) == doubled, format!("G_{} = 1 does not double its level", l + 1))?;
    }

    let mut g = Graph::<f64>::new();
    let c = |g: &mut Graph<f64>, v| g.constant(Tensor::full(&[1, 1, 1, 1], v));
    let (x1, x2, g1, g2) = (c(&mut g, 1.0), c(&mut g, 2.0), c(&mut g, 0.5), c(&mut g, 0.25));
    let p = FeaturePyramid::new(&g, vec![x1, x2]).map_err(err)?;
    let fused = fusion::gff(&mut g, &p, &[g1, g2]).map_err(err)?;
    let (a, b) = (g.value(fused[0]).data()[0], g.value(fused[1]).data()[0]);
    ensure((a - 1.75).abs() < 1e-12 && (b - 2.875).abs() < 1e-12, format!("scalar case gave ({a}, {b})"))?;
    Ok(format!("zero/saturated gates bit-exact, scalar case ({a}, {b})"))
}

fn oracles() -> Outcome {
    let mut r = rng(31);
    let (mut cases, mut worst) = (0, 0.0f64);
    while cases < 150 {
        let (n, cin, cout) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5));
        let (h, w) = (r.gen_range(2..11), r.gen_range(2..11));
        let k = [1, 3][cases % 2];
        let dil = if k == 3 { r.gen_range(1..3) } else { 1 };
        let (pad, stride) = (r.gen_range(0..=dil), r.gen_range(1..3));
        if dil * (k - 1) + 1 > h.min(w) + 2 * pad {
            continue;
        }
        let x = random_tensor(&mut r, &[n, cin, h, w]);
        let kt = random_tensor(&mut r, &[cout, cin, k, k]);
        let b = random_tensor(&mut r, &[cout]);
        let mut g = Graph::new();
        let (vx, vk, vb) = (g.constant(x.clone()), g.constant(kt.clone()), g.constant(b.clone()));
        let y = g.conv2d(vx, vk, Some(vb), stride, pad, dil).map_err(err)?;
        let (expect, _, _) = naive_conv(x.data(), [n, cin, h, w], kt.data(), [cout, cin, k, k], b.data(), stride, pad, dil);
        let d_conv = max_rel_diff(g.value(y).data(), &expect);

        let (oh, ow) = (r.gen_range(1..16), r.gen_range(1..16));
        let up = g.resample(vx, oh, ow).map_err(err)?;
        let d_res = max_rel_diff(g.value(up).data(), &naive_resample(x.data(), n * cin, h, w, oh, ow));

        let (bh, bw) = (r.gen_range(1..=h), r.gen_range(1..=w));
        let pool = g.avg_pool(vx, bh, bw).map_err(err)?;
        let d_pool = max_rel_diff(g.value(pool).data(), &naive_pool(x.data(), n * cin, h, w, bh, bw));

        worst = worst.max(d_conv).max(d_res).max(d_pool);
        ensure(worst < 1e-6, format!("case {cases}: conv {d_conv:.2e}, resample {d_res:.2e}, pool {d_pool:.2e}"))?;
        cases += 1;
    }
    Ok(format!("{cases} random shapes per op, worst relative difference {worst:.2e}"))
}

fn schedule_and_optimizer() -> Outcome {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let total = r.gen_range(1..50_000usize);
        let iter = r.gen_range(0..=total);
        let base = r.gen_range(1e-4..1.0);
        let expect = if iter == total { 0.0 } else { base * (0.9 * (1.0 - iter as f64 / total as f64).ln()).exp() };
        worst = worst.max((poly_lr(iter, total, base, 0.9) - expect).abs());
    }
    ensure(worst < 1e-12, format!("poly_lr off by {worst:.2e}"))?;

    let mut store = ParamStore::<f64>::new();
    let id: ParamId = store.push("w", ParamKind::Weight, Tensor::full(&[1], 1.0));
    let mut opt = OptimState::new(0.1, 10);
    opt.schedule = Schedule::Constant;
    opt.weight_decay = 0.0;
    let grad = vec![(id, Tensor::full(&[1], 1.0))];
    let mut path = vec![store.get(id).data()[0]];
    for _ in 0..2 {
        sgd_step(&mut store, &grad, &mut opt).map_err(err)?;
        path.push(store.get(id).data()[0]);
    }
    ensure((path[1] - 0.9).abs() < 1e-12 && (path[2] - 0.71).abs() < 1e-12, format!("momentum path {path:?}"))?;
    Ok(format!("poly_lr worst {worst:.1e} over 1000 points, momentum path {path:?}"))
}

fn metrics() -> Outcome {
    let gt = LabelMap::new(1, 1, 4, vec![0, 0, 1, 1]).map_err(err)?;
    let pred = LabelMap::new(1, 1, 4, vec![0, 1, 1, 1]).map_err(err)?;
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &gt, 255).map_err(err)?;
    let (m, a) = (cm.miou().map_err(err)?, cm.pixel_acc().map_err(err)?);
    ensure((m - 7.0 / 12.0).abs() < 1e-12 && (a - 0.75).abs() < 1e-12, format!("mIoU {m}, accuracy {a}"))?;
    Ok(format!("mIoU {m:.12} (7/12), accuracy {a}"))
}

struct Run {
    fusion: FusionStrategy,
    seed: u64,
    model: Model,
    store: ParamStore<f32>,
    first_loss: f64,
    final_loss: f64,
    confusion: ConfusionMatrix,
}

impl Run {
    fn drop(&self) -> f64 {
        1.0 - self.final_loss / self.first_loss
    }

    fn thin_iou(&self) -> f64 {
        let iou = self.confusion.per_class_iou().unwrap();
        (iou[POLE as usize].unwrap_or(0.0) + iou[LIGHT as usize].unwrap_or(0.0)) / 2.0
    }
}

/// Trains the desk preset: 512 train and 128 test scenes of 64x64, batch 8.
fn train_desk(fusion: FusionStrategy, seed: u64, train_set: &[data::SegmentationSample], test_set: &[data::SegmentationSample]) -> gff_lab::Result<Run> {
    let mut cfg = ExperimentConfig::default();
    cfg.model = cfg.model.with_fusion(fusion, true);
    cfg.train.seed = seed;
    let (model, mut store) = Model::build::<f32>(&cfg.model, seed)?;
    let t0 = Instant::now();
    let log = training::train(&model, &mut store, train_set, &cfg.train, |r| {
        if r.iter % 500 == 0 {
            eprintln!("  {fusion} seed {seed}: iter {:>4} loss {:.4} ({:.0}s)", r.iter, r.loss_total, t0.elapsed().as_secs_f64());
        }
    })?;
    // the last 20 iterations, so one noisy batch does not decide the drop
    let tail = &log[log.len().saturating_sub(20)..];
    let final_loss = tail.iter().map(|r| r.loss_total).sum::<f64>() / tail.len() as f64;
    let confusion = training::evaluate(&model, &store, test_set, &EvalOptions::default())?.confusion;
    Ok(Run { fusion, seed, model, store, first_loss: log[0].loss_total, final_loss, confusion })
}

fn train_all() -> gff_lab::Result<Vec<Run>> {
    let cfg = ExperimentConfig::default();
    let train_set = data::generate_split(&cfg.scene, Split::Train, cfg.train_samples)?;
    let test_set = data::generate_split(&cfg.scene, Split::Test, cfg.test_samples)?;
    let mut runs = Vec::new();
    for fusion in [FusionStrategy::Gff, FusionStrategy::Addition] {
        for seed in 0..3 {
            let run = train_desk(fusion, seed, &train_set, &test_set)?;
            eprintln!("  {fusion} seed {seed}: loss drop {:.3}, mIoU {:.4}, pole+light {:.4}", run.drop(), run.confusion.miou()?, run.thin_iou());
            runs.push(run);
        }
    }
    Ok(runs)
}

fn training_regression(runs: &[Run]) -> Outcome {
    let mean = |fusion, f: &dyn Fn(&Run) -> f64| {
        let v: Vec<f64> = runs.iter().filter(|r| r.fusion == fusion).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let gff0 = runs.iter().find(|r| r.fusion == FusionStrategy::Gff && r.seed == 0).ok_or("no gff seed 0 run")?;
    let miou0 = gff0.confusion.miou().map_err(err)?;
    let miou = |r: &Run| r.confusion.miou().unwrap();
    let (gm, am) = (mean(FusionStrategy::Gff, &miou), mean(FusionStrategy::Addition, &miou));
    let (gt, at) = (mean(FusionStrategy::Gff, &Run::thin_iou), mean(FusionStrategy::Addition, &Run::thin_iou));
    let min_drop = runs.iter().map(Run::drop).fold(f64::INFINITY, f64::min);
    let detail = format!(
        "gff seed 0 drop {:.3} (all runs >= {min_drop:.3}) mIoU {miou0:.4}; mean mIoU gff {gm:.4} vs addition {am:.4}; pole+light gff {gt:.4} vs addition {at:.4}",
        gff0.drop()
    );
    ensure(gff0.drop() >= 0.9, format!("loss drop below 90%: {detail}"))?;
    ensure(miou0 >= 0.80, format!("gff mIoU below 0.80: {detail}"))?;
    ensure(gm >= am, format!("gff mIoU below addition: {detail}"))?;
    ensure(gt >= at, format!("gff thin-class IoU below addition: {detail}"))?;
    Ok(detail)
}

fn gate_ablation(runs: &[Run]) -> Outcome {
    let run = runs.iter().find(|r| r.fusion == FusionStrategy::Gff && r.seed == 0).ok_or("no gff seed 0 run")?;
    let cfg = ExperimentConfig::default();
    let test_set = data::generate_split(&cfg.scene, Split::Test, cfg.test_samples).map_err(err)?;
    let opts = EvalOptions::default();
    let all = inspect::zero_gates(&run.model, &[]).map_err(err)?;
    let all = inspect::ablate(&run.model, &run.store, &test_set, &all, &opts).map_err(err)?;
    let level1 = inspect::zero_gates(&run.model, &[0]).map_err(err)?;
    let level1 = inspect::ablate(&run.model, &run.store, &test_set, &level1, &opts).map_err(err)?;
    let pole = level1.iou_delta().map_err(err)?[POLE as usize].ok_or("pole absent from the test split")?;
    let detail = format!("all gates zero changes {:.2}% of pixels; level-1 pole IoU delta {pole:+.4}", 100.0 * all.changed_fraction());
    ensure(all.changed_fraction() >= 0.01, detail.clone())?;
    ensure(pole < 0.0, detail.clone())?;
    Ok(detail)
}

fn cost_accounting() -> Outcome {
    let mut lines = Vec::new();
    for (preset, base) in [("desk", ModelConfig::desk()), ("full", ModelConfig::full_width())] {
        let rows = cli::cost_table(&base, 512, 512).map_err(err)?;
        let (b, g, d) = (rows[0].1, rows[1].1, rows[2].1);
        ensure(b.params < g.params && g.params < d.params, format!("{preset}: params not increasing"))?;
        ensure(b.macs < g.macs && g.macs < d.macs, format!("{preset}: MACs not increasing"))?;
        // one 1x1 gate conv (weights plus bias) per level
        let gate_params = base.stage_widths.len() * (base.width + 1);
        ensure(g.params - b.params == gate_params, format!("{preset}: GFF adds {} params, expected {gate_params}", g.params - b.params))?;
        lines.push(format!("{preset} {} < {} < {} params", b.params, g.params, d.params));
    }
    let (m, _) = Model::build::<f32>(&ModelConfig::desk(), 0).map_err(err)?;
    ensure(count_params_flops(&m, 64, 64).params > 0, "empty model")?;
    Ok(lines.join(", "))
}

fn formats() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut r = rng(11);
    let t = Tensor::<f32>::from_fn(&[3, 4, 5], |_| r.gen_range(-10.0..10.0));
    let back: Tensor<f32> = io::decode(&io::encode(&t)).map_err(err)?;
    ensure(back.shape() == t.shape() && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "GFFT round trip")?;

    let (_, store) = Model::build::<f32>(&ModelConfig::desk(), 3).map_err(err)?;
    checkpoint::save(dir.path().join("ck"), &store).map_err(err)?;
    let loaded = checkpoint::load::<f32>(dir.path().join("ck")).map_err(err)?;
    let same = store.entries().len() == loaded.entries().len()
        && store.entries().iter().zip(loaded.entries()).all(|(a, b)| {
            a.name == b.name && a.value.shape() == b.value.shape() && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    ensure(same, "checkpoint round trip")?;

    let vals: Vec<f64> = (0..16 * 16).map(|_| r.gen_range(0.0..=1.0)).collect();
    let pgm = Gray::decode(&Gray::from_unit(16, 16, &vals).map_err(err)?.encode()).map_err(err)?;
    let pgm_err = pgm.unit_values().iter().zip(&vals).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(pgm_err <= 0.5 / 255.0 + 1e-12, format!("PGM error {pgm_err}"))?;

    let run = |name: &str| -> std::result::Result<Vec<(String, Vec<u8>)>, String> {
        let out = dir.path().join(name);
        let (mut so, mut se) = (Vec::new(), Vec::new());
        let args = [
            "gff", "--out", out.to_str().unwrap(), "--seed", "5", "--set", "stage_widths=4,4,4,4", "--set", "width=4", "--set", "ppm_bins=1",
            "--set", "image_size=32", "--set", "crop=32", "--set", "train_samples=4", "--set", "test_samples=2", "train", "--iterations", "2",
            "--batch", "2",
        ];
        let code = cli::run(args, &mut so, &mut se);
        ensure(code == 0, String::from_utf8_lossy(&se).into_owned())?;
        let mut files = Vec::new();
        let mut stack = vec![out.clone()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).map_err(err)? {
                let p = e.map_err(err)?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push((p.strip_prefix(&out).unwrap().display().to_string(), fs::read(&p).map_err(err)?));
                }
            }
        }
        files.sort();
        Ok(files)
    };
    let (a, b) = (run("a")?, run("b")?);
    ensure(!a.is_empty() && a == b, "train output trees differ for identical seeds")?;
    Ok(format!("GFFT, checkpoint ({} tensors), PGM error {pgm_err:.2e}, {} identical output files", store.entries().len(), a.len()))
}

fn main() {
    let mut failures = 0;
    let mut report = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {id} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failures += 1;
                println!("FAIL {id} {name}: {d} [{secs:.1}s]");
            }
        }
    };
    report(1, "gradient correctness", &mut gradients);
    report(2, "gff identities", &mut gff_identities);
    report(3, "kernel oracles", &mut oracles);
    report(4, "schedule and optimizer", &mut schedule_and_optimizer);
    report(5, "metrics", &mut metrics);

    eprintln!("training 2 fusion strategies x 3 seeds on the desk preset");
    let runs = panic::catch_unwind(train_all).map_err(|_| "training panicked".to_string()).and_then(|r| r.map_err(err));
    report(6, "desk training regression", &mut || training_regression(runs.as_ref().map_err(Clone::clone)?));
    report(7, "gate ablation", &mut || gate_ablation(runs.as_ref().map_err(Clone::clone)?));

    report(8, "cost accounting", &mut cost_accounting);
    report(9, "formats", &mut formats);
    if failures > 0 {
        println!("{failures} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
