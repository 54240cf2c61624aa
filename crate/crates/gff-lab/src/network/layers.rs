use rand::Rng;

use super::params::{BnObservation, Builder, Ctx, Mode, ParamId, ParamKind};
use crate::error::Result;
use crate::tensor::{Scalar, Var};

/// Weight initialization for a convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`; for layers followed by relu.
    FanInRelu,
    /// Uniform in `±1 / sqrt(fan_in)`; for linear output heads.
    FanIn,
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv {
    pub fn new<T: Scalar, R: Rng>(
        b: &mut Builder<'_, T, R>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        init: Init,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let shape = [cout, cin, k, k];
        let weight = match init {
            Init::FanInRelu => b.uniform("weight", ParamKind::Weight, &shape, (6.0 / fan_in).sqrt()),
            Init::FanIn => b.uniform("weight", ParamKind::Weight, &shape, 1.0 / fan_in.sqrt()),
            Init::Zeros => b.constant("weight", ParamKind::Weight, &shape, 0.0),
        };
        let bias = b.constant("bias", ParamKind::Bias, &[cout], 0.0);
        Conv { weight, bias, cin, cout, k, stride, dilation }
    }

    /// Shape-preserving padding for the configured kernel and dilation.
    pub fn padding(&self) -> usize {
        self.dilation * (self.k - 1) / 2
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.g.conv2d(x, w, Some(b), self.stride, self.padding(), self.dilation)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    /// Multiply-accumulates for an output of `oh x ow` per image.
    pub fn macs(&self, oh: usize, ow: usize) -> usize {
        self.cout * oh * ow * self.cin * self.k * self.k
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, channels: usize) -> Self {
        BatchNorm {
            gamma: b.constant("bn.gamma", ParamKind::BnGamma, &[channels], 1.0),
            beta: b.constant("bn.beta", ParamKind::BnBeta, &[channels], 0.0),
            running_mean: b.constant("bn.running_mean", ParamKind::RunningMean, &[channels], 0.0),
            running_var: b.constant("bn.running_var", ParamKind::RunningVar, &[channels], 1.0),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        let eps = ctx.bn_eps;
        match ctx.mode {
            Mode::Train => {
                let [n, _, h, w] = ctx.g.dims4(x)?;
                let (y, mean, var) = ctx.g.batch_norm_train(x, gamma, beta, eps)?;
                ctx.observe(BnObservation {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    mean,
                    var,
                    count: n * h * w,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                let (mean, var) = (store.get(self.running_mean).data(), store.get(self.running_var).data());
                ctx.g.batch_norm_eval(x, gamma, beta, mean, var, eps)
            }
        }
    }

    /// Trainable parameters (gamma, beta).
    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Convolution, batch norm, relu.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng>(b: &mut Builder<'_, T, R>, cin: usize, cout: usize, k: usize, stride: usize, dilation: usize) -> Self {
        let conv = Conv::new(b, cin, cout, k, stride, dilation, Init::FanInRelu);
        let bn = BatchNorm::new(b, cout);
        ConvBnRelu { conv, bn }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.g.relu(y)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}
