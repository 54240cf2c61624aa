//! Checkpoint directories: `manifest.txt` lists every tensor as
//! `name<TAB>kind<TAB>d0,d1,...` in store order, and each tensor is stored
//! as `<name>.gfft` next to it.

use std::fs;
use std::path::Path;

use super::params::{ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{io, Scalar};

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "# gff-lab checkpoint v1";

fn kind_name(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Weight => "weight",
        ParamKind::Bias => "bias",
        ParamKind::BnGamma => "bn_gamma",
        ParamKind::BnBeta => "bn_beta",
        ParamKind::RunningMean => "running_mean",
        ParamKind::RunningVar => "running_var",
    }
}

fn parse_kind(s: &str) -> Option<ParamKind> {
    Some(match s {
        "weight" => ParamKind::Weight,
        "bias" => ParamKind::Bias,
        "bn_gamma" => ParamKind::BnGamma,
        "bn_beta" => ParamKind::BnBeta,
        "running_mean" => ParamKind::RunningMean,
        "running_var" => ParamKind::RunningVar,
        _ => return None,
    })
}

pub fn save<T: Scalar>(dir: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    for e in store.entries() {
        let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{}\t{}\t{}\n", e.name, kind_name(e.kind), dims.join(",")));
        io::save(dir.join(format!("{}.gfft", e.name)), &e.value)?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and checks it entry by entry against the manifest.
pub fn load<T: Scalar>(dir: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(Error::format("checkpoint manifest", "missing header"));
    }
    let mut store = ParamStore::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, kind, dims] = fields[..] else {
            return Err(Error::format("checkpoint manifest", format!("line {}: {line:?}", i + 2)));
        };
        let kind = parse_kind(kind).ok_or_else(|| Error::format("checkpoint manifest", format!("unknown kind {kind:?}")))?;
        let shape = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("checkpoint manifest", format!("{name}: {e}")))?;
        let value = io::load::<T>(dir.join(format!("{name}.gfft")))?;
        if value.shape() != shape.as_slice() {
            return Err(Error::Shape(format!("{name}: manifest says {shape:?}, dump holds {:?}", value.shape())));
        }
        store.push(name, kind, value);
    }
    Ok(store)
}
