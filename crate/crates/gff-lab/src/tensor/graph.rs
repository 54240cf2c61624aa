use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{LabelMap, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Totals reported by [`Graph::census`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Census {
    pub convs: usize,
    pub conv_macs: usize,
    pub resamples: usize,
    pub resample_macs: usize,
    pub param_scalars: usize,
}

impl Census {
    pub fn macs(&self) -> usize {
        self.conv_macs + self.resample_macs
    }
}

/// Which operand of a binary op is a single-channel map broadcast over channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

enum Op<T> {
    Leaf,
    Add { a: Var, b: Var, bcast: Broadcast },
    Mul { a: Var, b: Var, bcast: Broadcast },
    Affine { x: Var, scale: T },
    Sum { x: Var },
    /// `kinked` marks piecewise-linear functions such as relu.
    Pointwise { x: Var, deriv: Vec<T>, kinked: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Resample { x: Var },
    AvgPool { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Concat { xs: Vec<Var> },
    Slice { x: Var, start: usize },
    SoftmaxCe { logits: Var, probs: Vec<T>, labels: Rc<LabelMap>, ignore: u8, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only operation tape. Nodes are stored in creation order, which is
/// also a topological order, so [`Graph::backward`] is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    threads: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Affine { .. } => "affine",
        Op::Sum { .. } => "sum",
        Op::Pointwise { .. } => "pointwise",
        Op::Conv2d { .. } => "conv2d",
        Op::Resample { .. } => "bilinear_resample",
        Op::AvgPool { .. } => "avg_pool_adaptive",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Concat { .. } => "concat_channels",
        Op::Slice { .. } => "slice_channels",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), threads: 1 }
    }

    /// Spreads convolutions over `threads` workers per batch. Results stay
    /// deterministic for a fixed worker setting; see the threaded kernels.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cost census by walking the recorded operations: multiply-accumulates of
    /// convolutions and resamples (4 per output value), and tracked leaf sizes.
    pub fn census(&self) -> Census {
        let mut c = Census::default();
        for node in &self.nodes {
            match &node.op {
                Op::Leaf if node.requires_grad => c.param_scalars += node.value.numel(),
                Op::Conv2d { geom, .. } => {
                    c.convs += 1;
                    c.conv_macs += geom.n * geom.cout * geom.oh() * geom.ow() * geom.cin * geom.kh * geom.kw;
                }
                Op::Resample { .. } => {
                    c.resamples += 1;
                    c.resample_macs += 4 * node.value.numel();
                }
                _ => {}
            }
        }
        c
    }

    /// Active/inactive state of every relu unit, in recording order. Two passes
    /// of the same program with equal patterns lie on one linear piece of each relu.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Pointwise { deriv, kinked: true, .. } = &node.op {
                pattern.extend(deriv.iter().map(|&d| d > T::zero()));
            }
        }
        pattern
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims4(&self, v: Var) -> Result<[usize; 4]> {
        self.value(v).dims4()
    }

    /// Gradient of the last [`backward`](Self::backward) target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn broadcast(&self, a: Var, b: Var, what: &str) -> Result<(Broadcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((Broadcast::None, sa.to_vec()));
        }
        if sa.len() == 4 && sb.len() == 4 && sa[0] == sb[0] && sa[2..] == sb[2..] {
            if sb[1] == 1 {
                return Ok((Broadcast::Rhs, sa.to_vec()));
            }
            if sa[1] == 1 {
                return Ok((Broadcast::Lhs, sb.to_vec()));
            }
        }
        Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Broadcast)> {
        let (bcast, shape) = self.broadcast(a, b, what)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = match bcast {
            Broadcast::None => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Lhs | Broadcast::Rhs => {
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let mut out = Vec::with_capacity(shape.iter().product());
                for n in 0..shape[0] {
                    for ch in 0..c {
                        for p in 0..plane {
                            let full = (n * c + ch) * plane + p;
                            let single = n * plane + p;
                            out.push(match bcast {
                                Broadcast::Lhs => f(va[single], vb[full]),
                                _ => f(va[full], vb[single]),
                            });
                        }
                    }
                }
                out
            }
        };
        Ok((Tensor::new(&shape, data)?, bcast))
    }

    /// Elementwise sum; either side may be a 1-channel map broadcast over channels.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bcast) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add { a, b, bcast }, &[a, b])
    }

    /// Elementwise product with the same broadcast rule as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, bcast) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul { a, b, bcast }, &[a, b])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, c) = (T::lit(scale), T::lit(shift));
        let t = self.value(x).map(|v| s * v + c);
        self.push(t, Op::Affine { x, scale: s }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        let s = T::lit(scale);
        let t = self.value(x).map(|v| s * v);
        self.push(t, Op::Affine { x, scale: s }, &[x])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x }, &[x])
    }

    /// Applies `f` pointwise; `df` supplies the derivative for the backward pass.
    pub fn pointwise(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(x);
        let deriv = src.data().iter().map(|&v| df(v)).collect();
        let t = src.map(f);
        self.push(t, Op::Pointwise { x, deriv, kinked: false }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let deriv = t.data().iter().map(|&s| s * (T::one() - s)).collect();
        self.push(t, Op::Pointwise { x, deriv, kinked: false }, &[x])
    }

    /// `max(0, x)`; the derivative at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let deriv = src.data().iter().map(|&v| if v > T::zero() { T::one() } else { T::zero() }).collect();
        let t = src.map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Pointwise { x, deriv, kinked: true }, &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, dilation: usize) -> Result<Var> {
        let [n, cin, h, wd] = self.dims4(x)?;
        let [cout, wcin, kh, kw] = self.dims4(w)?;
        if wcin != cin {
            return Err(Error::Shape(format!("conv2d: input has {cin} channels, kernel expects {wcin}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::Shape(format!("conv2d: bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::Invalid("conv2d: stride and dilation must be positive".into()));
        }
        let geom = ConvGeom { n, cin, h, w: wd, cout, kh, kw, stride, padding, dilation };
        let (oh, ow) = match (
            ConvGeom::out_extent(h, kh, stride, padding, dilation),
            ConvGeom::out_extent(wd, kw, stride, padding, dilation),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::Shape(format!("conv2d: kernel {kh}x{kw} (dilation {dilation}) exceeds padded {h}x{wd}"))),
        };
        let out = kernels::conv2d_forward_threaded(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            self.threads,
        );
        let t = Tensor::new(&[n, cout, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(t, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Bilinear resampling with half-pixel centers; same-size requests return `x` itself.
    pub fn resample(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        if oh == 0 || ow == 0 {
            return Err(Error::Invalid("resample: output extent must be positive".into()));
        }
        if (oh, ow) == (h, w) {
            return Ok(x);
        }
        let out = kernels::resample_forward(self.value(x).data(), n * c, h, w, oh, ow);
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        self.push(t, Op::Resample { x }, &[x])
    }

    /// Adaptive average pooling onto a `bh x bw` grid of exact partitions.
    pub fn avg_pool(&mut self, x: Var, bh: usize, bw: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        if bh == 0 || bw == 0 || bh > h || bw > w {
            return Err(Error::Invalid(format!("avg_pool: bins {bh}x{bw} for input {h}x{w}")));
        }
        let out = kernels::avg_pool_forward(self.value(x).data(), n * c, h, w, bh, bw);
        let t = Tensor::new(&[n, c, bh, bw], out)?;
        self.push(t, Op::AvgPool { x }, &[x])
    }

    /// Batch normalization with batch statistics. Returns the output together
    /// with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let [n, c, h, w] = self.dims4(x)?;
        self.check_affine(c, gamma, beta)?;
        if n * h * w < 2 {
            return Err(Error::Invalid("batch_norm: training needs at least 2 values per channel".into()));
        }
        let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, h * w);
        let eps = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let [_, c, _, _] = self.dims4(x)?;
        self.check_affine(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("batch_norm: running stats for {} channels, input has {c}", mean.len())));
        }
        let eps = T::lit(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, &inv_std, false)
    }

    fn check_affine(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: affine params {:?}/{:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T], training: bool) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x)?;
        let plane = h * w;
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for &v in &xv[base..base + plane] {
                    let xh = (v - mean[ch]) * inv_std[ch];
                    xhat.push(xh);
                    out.push(gv[ch] * xh + bv[ch]);
                }
            }
        }
        let t = Tensor::new(&[n, c, h, w], out)?;
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std: inv_std.to_vec(), training };
        self.push(t, op, &[x, gamma, beta])
    }

    /// Channel concatenation in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let [n, _, h, w] = self.dims4(first)?;
        let mut total = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = self.dims4(x)?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::Shape(format!("concat: {:?} vs {:?}", self.shape(x), self.shape(first))));
            }
            total += xc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &x in xs {
                let xc = self.shape(x)[1];
                out.extend_from_slice(&self.value(x).data()[b * xc * plane..(b + 1) * xc * plane]);
            }
        }
        let t = Tensor::new(&[n, total, h, w], out)?;
        self.push(t, Op::Concat { xs: xs.to_vec() }, xs)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_channels(start, len)?;
        self.push(t, Op::Slice { x, start }, &[x])
    }

    /// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &LabelMap, ignore: u8) -> Result<Var> {
        let [n, k, h, w] = self.dims4(logits)?;
        if (labels.n, labels.h, labels.w) != (n, h, w) {
            return Err(Error::Shape(format!(
                "cross entropy: labels {}x{}x{} for logits {:?}",
                labels.n,
                labels.h,
                labels.w,
                self.shape(logits)
            )));
        }
        let plane = h * w;
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for b in 0..n {
            for p in 0..plane {
                let label = labels.data[b * plane + p];
                if label == ignore {
                    continue;
                }
                if label as usize >= k {
                    return Err(Error::Invalid(format!("label {label} outside 0..{k}")));
                }
                let at = |c: usize| (b * k + c) * plane + p;
                let m = (0..k).map(|c| lv[at(c)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for c in 0..k {
                    let e = (lv[at(c)] - m).exp();
                    probs[at(c)] = e;
                    z = z + e;
                }
                for c in 0..k {
                    probs[at(c)] = probs[at(c)] / z;
                }
                total = total + (z.ln() + m - lv[at(label as usize)]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let t = Tensor::scalar(total / T::from_usize(count).unwrap());
        let op = Op::SoftmaxCe { logits, probs, labels: Rc::new(labels.clone()), ignore, count };
        self.push(t, op, &[logits])
    }

    /// Reverse sweep from a one-element `target`. Replaces any earlier gradients.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).numel() != 1 {
            return Err(Error::Shape(format!("backward target must be a scalar, got {:?}", self.shape(target))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[target.0] = Some(Tensor::full(self.shape(target), T::one()));
        for id in (0..=target.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.backward_node(id, &gy, &mut grads)?;
            grads[id] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, id: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let gyd = gy.data();
        let mut send = |v: Var, data: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, g) in acc.data_mut().iter_mut().zip(data) {
                        *a = *a + g;
                    }
                }
                slot @ None => {
                    let shape = self.nodes[v.0].value.shape();
                    *slot = Some(Tensor::new(shape, data).expect("gradient matches value shape"));
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b, bcast } => {
                let shape = node.value.shape();
                let (ga, gb) = match bcast {
                    Broadcast::None => (gyd.to_vec(), gyd.to_vec()),
                    Broadcast::Lhs => (reduce_channels(gyd, shape), gyd.to_vec()),
                    Broadcast::Rhs => (gyd.to_vec(), reduce_channels(gyd, shape)),
                };
                send(*a, ga);
                send(*b, gb);
            }
            Op::Mul { a, b, bcast } => {
                let shape = node.value.shape();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                match bcast {
                    Broadcast::None => {
                        send(*a, gyd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                        send(*b, gyd.iter().zip(va).map(|(&g, &x)| g * x).collect());
                    }
                    Broadcast::Lhs => {
                        send(*a, reduce_channels(&mul_bcast(gyd, vb, shape, false), shape));
                        send(*b, mul_bcast(gyd, va, shape, true));
                    }
                    Broadcast::Rhs => {
                        send(*a, mul_bcast(gyd, vb, shape, true));
                        send(*b, reduce_channels(&mul_bcast(gyd, va, shape, false), shape));
                    }
                }
            }
            Op::Affine { x, scale } => send(*x, gyd.iter().map(|&g| g * *scale).collect()),
            Op::Sum { x } => send(*x, vec![gyd[0]; self.value(*x).numel()]),
            Op::Pointwise { x, deriv, .. } => send(*x, gyd.iter().zip(deriv).map(|(&g, &d)| g * d).collect()),
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward_threaded(self.value(*x).data(), self.value(*w).data(), gyd, geom, self.threads);
                send(*x, gx);
                send(*w, gw);
                if let Some(b) = b {
                    send(*b, gb);
                }
            }
            Op::Resample { x } => {
                let [n, c, h, w] = self.dims4(*x)?;
                let [_, _, oh, ow] = gy.dims4()?;
                send(*x, kernels::resample_backward(gyd, n * c, h, w, oh, ow));
            }
            Op::AvgPool { x } => {
                let [n, c, h, w] = self.dims4(*x)?;
                let [_, _, bh, bw] = gy.dims4()?;
                send(*x, kernels::avg_pool_backward(gyd, n * c, h, w, bh, bw));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                let [n, c, h, w] = self.dims4(*x)?;
                let plane = h * w;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            sum_g[ch] = sum_g[ch] + gyd[i];
                            sum_gx[ch] = sum_gx[ch] + gyd[i] * xhat[i];
                        }
                    }
                }
                let m = T::from_usize(n * plane).unwrap();
                let mut gx = vec![T::zero(); gyd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * plane;
                        let k = gv[ch] * inv_std[ch];
                        for i in base..base + plane {
                            gx[i] = if *training {
                                k * (gyd[i] - sum_g[ch] / m - xhat[i] * sum_gx[ch] / m)
                            } else {
                                k * gyd[i]
                            };
                        }
                    }
                }
                send(*x, gx);
                send(*gamma, sum_gx);
                send(*beta, sum_g);
            }
            Op::Concat { xs } => {
                let [n, total, h, w] = gy.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &x in xs {
                    let xc = self.shape(x)[1];
                    let mut part = Vec::with_capacity(n * xc * plane);
                    for b in 0..n {
                        let base = (b * total + offset) * plane;
                        part.extend_from_slice(&gyd[base..base + xc * plane]);
                    }
                    send(x, part);
                    offset += xc;
                }
            }
            Op::Slice { x, start } => {
                let [n, c, h, w] = self.dims4(*x)?;
                let len = gy.shape()[1];
                let plane = h * w;
                let mut gx = vec![T::zero(); n * c * plane];
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    gx[dst..dst + len * plane].copy_from_slice(&gyd[b * len * plane..(b + 1) * len * plane]);
                }
                send(*x, gx);
            }
            Op::SoftmaxCe { logits, probs, labels, ignore, count } => {
                let [n, k, h, w] = self.dims4(*logits)?;
                let plane = h * w;
                let scale = gyd[0] / T::from_usize(*count).unwrap();
                let mut gx = vec![T::zero(); probs.len()];
                for b in 0..n {
                    for p in 0..plane {
                        let label = labels.data[b * plane + p];
                        if label == *ignore {
                            continue;
                        }
                        for c in 0..k {
                            let i = (b * k + c) * plane + p;
                            let onehot = if c == label as usize { T::one() } else { T::zero() };
                            gx[i] = (probs[i] - onehot) * scale;
                        }
                    }
                }
                send(*logits, gx);
            }
        }
        Ok(())
    }
}

fn reduce_channels<T: Scalar>(g: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); n * plane];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for p in 0..plane {
                out[b * plane + p] = out[b * plane + p] + g[base + p];
            }
        }
    }
    out
}

/// `g * other` where `other` is either full-size or a single-channel map.
fn mul_bcast<T: Scalar>(g: &[T], other: &[T], shape: &[usize], other_is_single: bool) -> Vec<T> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = Vec::with_capacity(g.len());
    for b in 0..n {
        for ch in 0..c {
            for p in 0..plane {
                let full = (b * c + ch) * plane + p;
                let o = if other_is_single { other[b * plane + p] } else { other[full] };
                out.push(g[full] * o);
            }
        }
    }
    out
}
