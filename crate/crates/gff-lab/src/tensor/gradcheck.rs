//! Central finite-difference gradient checking in 64-bit precision.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a [`gradcheck`] run.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Coordinates whose `±eps` stencil switched some relu between active and
    /// inactive. Central differences are not a derivative estimate there, so
    /// they are counted but left out of `max_rel_error`.
    pub kinked: usize,
}

impl GradcheckReport {
    pub fn empty() -> Self {
        GradcheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, coordinates: 0, kinked: 0 }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.kinked < self.coordinates
    }

    /// Adds one coordinate. `crossed` marks a stencil that crossed a kink.
    pub fn record(&mut self, at: (usize, usize), analytic: f64, numeric: f64, crossed: bool) {
        self.coordinates += 1;
        if crossed {
            self.kinked += 1;
            return;
        }
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.coordinates == self.kinked + 1 {
            self.max_rel_error = err;
            self.worst = at;
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

type Kept = (Graph<f64>, Vec<Var>, Var);

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F, keep_graph: bool) -> Result<(f64, Vec<bool>, Option<Kept>)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Shape(format!("gradcheck target must be scalar, got {:?}", g.shape(out))));
    }
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck target".into()));
    }
    let pattern = g.activation_pattern();
    Ok((v, pattern, keep_graph.then_some((g, vars, out))))
}

/// Compares the tape gradient of the scalar program `f` against central
/// differences with step `eps`, over every coordinate of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, base, kept) = evaluate(inputs, &f, true)?;
    let (mut g, vars, out) = kept.expect("graph kept");
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|gr| gr.data().to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let mut report = GradcheckReport::empty();
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let (plus, plus_pattern, _) = evaluate(&probe, &f, false)?;
            probe[i].data_mut()[j] = orig - eps;
            let (minus, minus_pattern, _) = evaluate(&probe, &f, false)?;
            probe[i].data_mut()[j] = orig;
            let crossed = plus_pattern != base || minus_pattern != base;
            report.record((i, j), a, (plus - minus) / (2.0 * eps), crossed);
        }
    }
    Ok(report)
}
