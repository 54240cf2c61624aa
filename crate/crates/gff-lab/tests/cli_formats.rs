mod common;

use std::fs;
use std::path::{Path, PathBuf};

use common::*;
use gff_lab::cli::{self, CHECKPOINT_DIR, CONFIG_FILE, LOG_FILE, METRICS_FILE};
use gff_lab::config::ExperimentConfig;
use gff_lab::data::Split;
use gff_lab::export::{gate_file_name, quantize, Gray};
use gff_lab::network::checkpoint;
use gff_lab::network::{Model, ModelConfig};
use gff_lab::tensor::{io, Tensor};
use rand::Rng;

const MICRO: [&str; 3] = ["stage_widths=4,4,4,4", "width=4", "ppm_bins=1"];

fn gff(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = cli::run(std::iter::once("gff").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn with_sets<'a>(mut args: Vec<&'a str>, sets: &[&'a str]) -> Vec<&'a str> {
    for s in sets {
        args.extend(["--set", s]);
    }
    args
}

/// Small config written to `dir`, micro model on 32px scenes.
fn micro_config(dir: &Path, fusion: &str) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    for kv in MICRO.iter().chain(&["image_size=32", "crop=32", "train_samples=4", "test_samples=3", "batch=2", "iterations=3"]) {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    cfg.set("fusion", fusion).unwrap();
    let path = dir.join("micro.txt");
    fs::write(&path, cfg.to_text()).unwrap();
    path
}

/// Untrained checkpoint plus its config, laid out like a `train` output.
fn untrained_run(dir: &Path, fusion: &str) -> PathBuf {
    let cfg = ExperimentConfig::load(micro_config(dir, fusion)).unwrap();
    let (_, store) = Model::build::<f32>(&cfg.model, cfg.train.seed).unwrap();
    checkpoint::save(dir.join(CHECKPOINT_DIR), &store).unwrap();
    fs::write(dir.join(CONFIG_FILE), cfg.to_text()).unwrap();
    dir.join(CHECKPOINT_DIR)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn tensor_files_round_trip_bit_exactly() {
    let mut r = rng(0);
    let t = Tensor::<f32>::from_fn(&[2, 3, 5], |_| r.gen_range(-1e6..1e6));
    let bytes = io::encode(&t);
    assert_eq!(&bytes[..4], io::MAGIC);
    let back: Tensor<f32> = io::decode(&bytes).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let special = Tensor::<f64>::new(&[3], vec![f64::MIN_POSITIVE / 2.0, -0.0, f64::MAX]).unwrap();
    let back: Tensor<f64> = io::decode(&io::encode(&special)).unwrap();
    assert!(back.data().iter().zip(special.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    assert!(io::decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(io::decode::<f32>(&bad).is_err());
    assert!(io::decode::<f32>(&[bytes.clone(), vec![0]].concat()).is_err());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (_, store) = Model::build::<f32>(&ModelConfig::desk(), 5).unwrap();
    checkpoint::save(dir.path(), &store).unwrap();
    let manifest = fs::read_to_string(dir.path().join(checkpoint::MANIFEST)).unwrap();
    assert!(manifest.starts_with("# gff-lab checkpoint v1"));
    let back = checkpoint::load::<f32>(dir.path()).unwrap();
    assert_eq!(back.entries().len(), store.entries().len());
    for (a, b) in store.entries().iter().zip(back.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.kind, b.kind);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // loading into a model with different shapes fails
    let (_, mut micro) = Model::build::<f32>(&ModelConfig::micro(), 0).unwrap();
    assert!(micro.load_from(back).is_err());
}

#[test]
fn pgm_quantization_and_parse_back() {
    assert_eq!(quantize(0.5), 128);
    assert_eq!(quantize(0.0), 0);
    assert_eq!(quantize(1.0), 255);
    let mut r = rng(1);
    let vals: Vec<f64> = (0..7 * 9).map(|_| r.gen_range(0.0..=1.0)).collect();
    let img = Gray::from_unit(7, 9, &vals).unwrap();
    let bytes = img.encode();
    assert!(bytes.starts_with(b"P5\n9 7\n255\n"));
    let back = Gray::decode(&bytes).unwrap();
    for (a, b) in back.unit_values().iter().zip(&vals) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
    }
    assert!(Gray::from_unit(2, 2, &[0.0, 0.5, 1.0]).is_err());
    assert!(Gray::decode(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn untrained_gates_export_as_mid_gray() {
    let dir = tempfile::tempdir().unwrap();
    let ck = untrained_run(dir.path(), "gff");
    let out = dir.path().join("gates");
    let (code, text, err) = gff(&["gates", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(text.starts_with("level,mean,std\n"));
    let files: Vec<_> = fs::read_dir(&out).unwrap().collect();
    assert_eq!(files.len(), 2 * 4);
    // strides 2, 4, 8, 8 on a 32px scene
    for (l, side) in [(1, 16), (2, 8), (3, 4), (4, 4)] {
        let img = Gray::load(out.join(gate_file_name(l, "test_00000"))).unwrap();
        assert_eq!((img.height, img.width), (side, side));
        assert!(img.pixels.iter().all(|&p| p == 128));
    }
    for row in text.lines().skip(1) {
        let f: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        assert!((f[1] - 0.5).abs() < 1e-9 && f[2].abs() < 1e-9, "{row}");
    }
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let args = vec!["synth", "--train-samples", "5", "--test-samples", "2", "--out", out.to_str().unwrap()];
        let (code, text, err) = gff(&with_sets(args, &[seed, "image_size=32"]));
        assert_eq!(code, 0, "{err}");
        (text, tree(&out))
    };
    let (text_a, a) = run("a", "data_seed=3");
    let (text_b, b) = run("b", "data_seed=3");
    let (_, c) = run("c", "data_seed=4");
    assert_eq!(text_a, text_b);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 2 * 5 + 2 * 2 + 2);

    for row in text_a.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        let n: u64 = f[1].parse().unwrap();
        let classes: u64 = f[2..f.len() - 1].iter().map(|v| v.parse::<u64>().unwrap()).sum();
        assert_eq!(classes, 32 * 32 * n);
        assert_eq!(f[f.len() - 1].parse::<u64>().unwrap(), classes);
    }
}

#[test]
fn train_then_eval_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path(), "gff");
    let out = dir.path().join("run");
    let (code, text, err) = gff(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(text.starts_with("trained gff (with dfp) for 3 iterations"));
    for f in [CONFIG_FILE, LOG_FILE, METRICS_FILE] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.join(LOG_FILE)).unwrap().lines().count(), 1 + 3);

    let ck = out.join(CHECKPOINT_DIR);
    let (code, csv, err) = gff(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(csv, fs::read_to_string(out.join(METRICS_FILE)).unwrap());
    let (_, unit_scale, _) = gff(&["eval", "--checkpoint", ck.to_str().unwrap(), "--scales", "1.0"]);
    assert_eq!(unit_scale, csv);
}

#[test]
fn cli_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let (code, _, err) = gff(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert_eq!(gff(&["bench", "--set", "colour=red"]).0, 1);
    assert_eq!(gff(&["bench", "--preset", "huge"]).0, 1);
    assert_eq!(gff(&["no-such-command"]).0, 1);
    assert_eq!(gff(&["--help"]).0, 0);

    let ck = untrained_run(dir.path(), "gff");
    let (code, _, _) = gff(&["ablate", "--checkpoint", ck.to_str().unwrap(), "--level", "0"]);
    assert_eq!(code, 1);
    let (code, _, _) = gff(&["gates", "--checkpoint", ck.to_str().unwrap(), "--ids", "test_99999"]);
    assert_eq!(code, 2);
}

#[test]
fn bench_orders_configs_by_cost() {
    let (code, text, _) = gff(&["bench", "--size", "64"]);
    assert_eq!(code, 0);
    let rows = cli::cost_table(&ModelConfig::desk(), 64, 64).unwrap();
    assert_eq!(text, cli::format_cost_table(&rows, 64, 64));
    let (base, gff_, full) = (rows[0].1, rows[1].1, rows[2].1);
    assert!(base.params < gff_.params && gff_.params < full.params);
    assert!(base.macs < gff_.macs && gff_.macs < full.macs);
    // one 1x1 gate conv with bias per level
    let (levels, width) = (4, ModelConfig::desk().width);
    assert_eq!(gff_.params - base.params, levels * (width + 1));
}

#[test]
fn ablation_without_gates_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ck = untrained_run(dir.path(), "addition");
    let out = dir.path().join("abl");
    let (code, text, err) = gff(&["ablate", "--checkpoint", ck.to_str().unwrap(), "--level", "all", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(text.starts_with("no gates"));
    assert!(text.contains(": 0 of 3072 pixels changed"));
    let changed = fs::read_to_string(out.join("ablate_Lall/changed.csv")).unwrap();
    assert_eq!(changed.lines().count(), 1 + 3);
    let (_, gates_text, _) = gff(&["gates", "--checkpoint", ck.to_str().unwrap()]);
    assert!(gates_text.starts_with("no gates"));
}

#[test]
fn ablation_files_for_a_gated_model() {
    let dir = tempfile::tempdir().unwrap();
    let ck = untrained_run(dir.path(), "gff");
    let out = dir.path().join("abl");
    let (code, text, err) = gff(&["ablate", "--checkpoint", ck.to_str().unwrap(), "--level", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(text.contains("gates zeroed at level 2"));
    let d = out.join("ablate_L2");
    let table = fs::read_to_string(d.join("iou_delta.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 5 + 1);
    for i in 0..3 {
        let id = gff_lab::data::sample_id(Split::Test, i);
        let mask = Gray::load(d.join(format!("mask_{id}.pgm"))).unwrap();
        assert_eq!((mask.height, mask.width), (32, 32));
        assert!(mask.pixels.iter().all(|&p| p == 0 || p == 255));
    }
}

#[test]
fn train_output_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path(), "gff");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let args = ["train", "--config", cfg.to_str().unwrap(), "--seed", "4", "--iterations", "2", "--out", out.to_str().unwrap()];
        assert_eq!(gff(&args).0, 0);
        tree(&out)
    };
    let (a, b) = (run("a"), run("b"));
    assert!(a.iter().any(|(p, _)| p.ends_with(CONFIG_FILE)));
    assert_eq!(a, b);
}
