//! Scalar-loop oracles shared by the integration tests. They deliberately
//! avoid the library's kernels so they can check them.
#![allow(dead_code)]

use gff_lab::tensor::{Graph, Tensor, Var};
use gff_lab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero, for checking kinked functions.
pub fn random_away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(out * probe)` with a fixed random probe, so every output coordinate
/// contributes with a distinct weight.
pub fn probe_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let probe = random_tensor(&mut r, g.shape(out));
    let p = g.constant(probe);
    let prod = g.mul(out, p)?;
    g.sum(prod)
}

#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    [n, cin, h, w]: [usize; 4],
    k: &[f64],
    [cout, _, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
    dil: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dil) as i64 - pad as i64;
                                let ix = (ox * stride + kx * dil) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += x[((b * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * k[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, oh, ow)
}

fn source_coord(d: usize, input: usize, output: usize) -> f64 {
    let s = (d as f64 + 0.5) * input as f64 / output as f64 - 0.5;
    s.max(0.0).min((input - 1) as f64)
}

/// Bilinear sample of a single plane at continuous coordinates.
fn sample(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let at = |y: usize, x: usize| plane[y * w + x];
    at(y0, x0) * (1.0 - fy) * (1.0 - fx) + at(y0, x1) * (1.0 - fy) * fx + at(y1, x0) * fy * (1.0 - fx) + at(y1, x1) * fy * fx
}

pub fn naive_resample(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(sample(plane, h, w, source_coord(oy, h, oh), source_coord(ox, w, ow)));
            }
        }
    }
    out
}

/// Bin index of cell `i` when `extent` cells are split into `bins` near-equal runs.
fn bin_of(i: usize, bins: usize, extent: usize) -> usize {
    // smallest b whose end boundary lies past i
    (0..bins).find(|&b| (b + 1) * extent / bins > i).unwrap()
}

pub fn naive_pool(x: &[f64], planes: usize, h: usize, w: usize, bh: usize, bw: usize) -> Vec<f64> {
    let mut sums = vec![0.0; planes * bh * bw];
    let mut counts = vec![0usize; planes * bh * bw];
    for p in 0..planes {
        for y in 0..h {
            for xx in 0..w {
                let cell = (p * bh + bin_of(y, bh, h)) * bw + bin_of(xx, bw, w);
                sums[cell] += x[(p * h + y) * w + xx];
                counts[cell] += 1;
            }
        }
    }
    sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect()
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
