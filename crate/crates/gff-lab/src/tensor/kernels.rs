//! Forward and backward kernels on raw NCHW buffers.
//!
//! These are the inner loops behind the [`Graph`](super::Graph) operations.
//! They are public so tests and the cost model can reach them directly.

use super::linalg::{gemm, Mat};
use super::Scalar;

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Output extent along one axis, or `None` when the dilated kernel does not fit.
    pub fn out_extent(input: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
        let span = dilation * (k - 1) + 1;
        let padded = input + 2 * padding;
        if span > padded || stride == 0 {
            return None;
        }
        Some((padded - span) / stride + 1)
    }

    pub fn oh(&self) -> usize {
        Self::out_extent(self.h, self.kh, self.stride, self.padding, self.dilation).unwrap_or(0)
    }

    pub fn ow(&self) -> usize {
        Self::out_extent(self.w, self.kw, self.stride, self.padding, self.dilation).unwrap_or(0)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.oh(), g.ow());
    let plane = oh * ow;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let (oh, ow) = (g.oh(), g.ow());
    let plane = oh * ow;
    for c in 0..g.cin {
        let gxc = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut gxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding; `bias` has `cout` entries.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.oh() * g.ow();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * plane] };
    let wmat = Mat::new(weight, g.cout, g.patch());
    for b in 0..g.n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(wmat, Mat::new(xb, g.patch(), plane), beta, ob);
        } else {
            im2col(xb, g, &mut cols);
            gemm(wmat, Mat::new(&cols, g.patch(), plane), beta, ob);
        }
    }
    out
}

/// Gradients `(d_input, d_weight, d_bias)` of [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(x: &[T], weight: &[T], gy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = g.oh() * g.ow();
    let in_len = g.cin * g.h * g.w;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.cout];
    let mut cols = vec![T::zero(); g.patch() * plane];
    let wmat = Mat::new(weight, g.cout, g.patch());
    for b in 0..g.n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gyb = &gy[b * g.cout * plane..(b + 1) * g.cout * plane];
        for (co, chunk) in gyb.chunks(plane).enumerate() {
            gb[co] = chunk.iter().fold(gb[co], |a, &v| a + v);
        }
        let gymat = Mat::new(gyb, g.cout, plane);
        let gxb = &mut gx[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            gemm(gymat, Mat::new(xb, g.patch(), plane).t(), T::one(), &mut gw);
            gemm(wmat.t(), gymat, T::zero(), gxb);
        } else {
            im2col(xb, g, &mut cols);
            gemm(gymat, Mat::new(&cols, g.patch(), plane).t(), T::one(), &mut gw);
            gemm(wmat.t(), gymat, T::zero(), &mut cols);
            col2im(&cols, g, gxb);
        }
    }
    (gx, gw, gb)
}

/// Contiguous batch ranges for up to `threads` workers.
fn batch_chunks(n: usize, threads: usize) -> Vec<std::ops::Range<usize>> {
    let workers = threads.clamp(1, n.max(1));
    (0..workers).map(|t| t * n / workers..(t + 1) * n / workers).collect()
}

/// [`conv2d_forward`] with batch items spread over `threads` workers. Items
/// are independent, so the result equals the serial one bit for bit.
pub fn conv2d_forward_threaded<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom, threads: usize) -> Vec<T> {
    if threads <= 1 || g.n <= 1 {
        return conv2d_forward(x, weight, bias, g);
    }
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.oh() * g.ow();
    let mut out = vec![T::zero(); g.n * out_len];
    std::thread::scope(|s| {
        let mut rest = out.as_mut_slice();
        for r in batch_chunks(g.n, threads) {
            let (mine, tail) = rest.split_at_mut(r.len() * out_len);
            rest = tail;
            let xs = &x[r.start * in_len..r.end * in_len];
            s.spawn(move || {
                let sub = ConvGeom { n: r.len(), ..*g };
                mine.copy_from_slice(&conv2d_forward(xs, weight, bias, &sub));
            });
        }
    });
    out
}

/// [`conv2d_backward`] with batch items spread over `threads` workers. Weight
/// and bias gradients are formed per item and summed in item order, so the
/// result does not depend on the worker count.
pub fn conv2d_backward_threaded<T: Scalar>(x: &[T], weight: &[T], gy: &[T], g: &ConvGeom, threads: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    if threads <= 1 || g.n <= 1 {
        return conv2d_backward(x, weight, gy, g);
    }
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * g.oh() * g.ow();
    let one = ConvGeom { n: 1, ..*g };
    let mut gx = vec![T::zero(); x.len()];
    let mut partials: Vec<(Vec<T>, Vec<T>)> = Vec::with_capacity(g.n);
    std::thread::scope(|s| {
        let mut rest = gx.as_mut_slice();
        let mut handles = Vec::new();
        for r in batch_chunks(g.n, threads) {
            let (mine, tail) = rest.split_at_mut(r.len() * in_len);
            rest = tail;
            handles.push(s.spawn(move || {
                let mut parts = Vec::with_capacity(r.len());
                for (k, b) in r.enumerate() {
                    let (gxb, gwb, gbb) = conv2d_backward(
                        &x[b * in_len..(b + 1) * in_len],
                        weight,
                        &gy[b * out_len..(b + 1) * out_len],
                        &one,
                    );
                    mine[k * in_len..(k + 1) * in_len].copy_from_slice(&gxb);
                    parts.push((gwb, gbb));
                }
                parts
            }));
        }
        for h in handles {
            partials.extend(h.join().expect("conv worker panicked"));
        }
    });
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.cout];
    for (pw, pb) in &partials {
        for (a, &v) in gw.iter_mut().zip(pw) {
            *a = *a + v;
        }
        for (a, &v) in gb.iter_mut().zip(pb) {
            *a = *a + v;
        }
    }
    (gx, gw, gb)
}

/// Per-output-index source taps `(i0, i1, w0, w1)` under half-pixel centers.
pub fn resample_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resampling of every `h x w` plane in `x` to `oh x ow`.
pub fn resample_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = resample_taps(h, oh);
    let tx: Vec<_> = resample_taps(w, ow).into_iter().map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb))).collect();
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * ow + ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
            }
        }
    }
    out
}

pub fn resample_backward<T: Scalar>(gy: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = resample_taps(h, oh);
    let tx: Vec<_> = resample_taps(w, ow).into_iter().map(|(a, b, wa, wb)| (a, b, T::lit(wa), T::lit(wb))).collect();
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let gv = src[oy * ow + ox];
                dst[y0 * w + x0] = dst[y0 * w + x0] + gv * wy0 * wx0;
                dst[y0 * w + x1] = dst[y0 * w + x1] + gv * wy0 * wx1;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gv * wy1 * wx0;
                dst[y1 * w + x1] = dst[y1 * w + x1] + gv * wy1 * wx1;
            }
        }
    }
    gx
}

/// Half-open range of input cells pooled into bin `i` of `bins`; consecutive bins tile `0..extent`.
pub fn pool_range(i: usize, bins: usize, extent: usize) -> (usize, usize) {
    (i * extent / bins, (i + 1) * extent / bins)
}

pub fn avg_pool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, bh: usize, bw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * bh * bw);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for by in 0..bh {
            let (y0, y1) = pool_range(by, bh, h);
            for bx in 0..bw {
                let (x0, x1) = pool_range(bx, bw, w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for v in &src[y * w + x0..y * w + x1] {
                        acc = acc + *v;
                    }
                }
                out.push(acc / T::from_usize((y1 - y0) * (x1 - x0)).unwrap());
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(gy: &[T], planes: usize, h: usize, w: usize, bh: usize, bw: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for by in 0..bh {
            let (y0, y1) = pool_range(by, bh, h);
            for bx in 0..bw {
                let (x0, x1) = pool_range(bx, bw, w);
                let share = gy[(p * bh + by) * bw + bx] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for y in y0..y1 {
                    for v in &mut dst[y * w + x0..y * w + x1] {
                        *v = *v + share;
                    }
                }
            }
        }
    }
    gx
}

/// Per-channel mean and biased variance over batch and spatial positions.
pub fn channel_moments<T: Scalar>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::from_usize(n * plane).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            acc = x[base..base + plane].iter().fold(acc, |a, &v| a + v);
        }
        let m = acc / count;
        let mut sq = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * plane;
            sq = x[base..base + plane].iter().fold(sq, |a, &v| a + (v - m) * (v - m));
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_formula() {
        assert_eq!(ConvGeom::out_extent(8, 3, 1, 1, 1), Some(8));
        assert_eq!(ConvGeom::out_extent(8, 3, 2, 1, 1), Some(4));
        assert_eq!(ConvGeom::out_extent(8, 3, 1, 2, 2), Some(8));
        assert_eq!(ConvGeom::out_extent(2, 5, 1, 0, 1), None);
    }

    #[test]
    fn half_pixel_taps() {
        let taps = resample_taps(2, 4);
        let row = [0.0f64, 1.0];
        let vals: Vec<f64> = taps.iter().map(|&(a, b, wa, wb)| wa * row[a] + wb * row[b]).collect();
        assert_eq!(vals, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn pool_ranges_tile_extent() {
        for extent in 1..20 {
            for bins in 1..=extent {
                let mut next = 0;
                for i in 0..bins {
                    let (a, b) = pool_range(i, bins, extent);
                    assert_eq!(a, next);
                    assert!(b > a);
                    next = b;
                }
                assert_eq!(next, extent);
            }
        }
    }
}
