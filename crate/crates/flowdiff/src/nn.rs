//! Layer building blocks on top of the autograd tape: convolution, linear,
//! group norm, and the sinusoidal timestep embedding.
//!
//! A layer owns [`ParamId`]s into a shared [`Params`] store and knows how
//! to splice itself into a [`Graph`]. Parameter names are explicit
//! dot-separated paths ("enc.down2.conv.w"), which keeps checkpoints
//! self-describing and lets training phases freeze whole subtrees by
//! prefix.

use rand::Rng;

use crate::autograd::{Graph, NodeId, ParamId, Params};
use crate::tensor::Tensor;

/// He-normal initialisation for a conv kernel `[co, ci, k, k]`.
fn conv_init<R: Rng>(co: usize, ci: usize, k: usize, gain: f32, rng: &mut R) -> Tensor {
    let fan_in = (ci * k * k) as f32;
    let std = gain * (2.0 / fan_in).sqrt();
    Tensor::randn(&[co, ci, k, k], rng).scale(std)
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2dLayer {
    pub fn new<R: Rng>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self::with_gain(params, rng, name, ci, co, k, stride, 1.0)
    }

    /// `gain` scales the init; output heads use a small gain so the first
    /// forward pass starts near zero.
    pub fn with_gain<R: Rng>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        gain: f32,
    ) -> Self {
        let w = params.add(format!("{name}.w"), conv_init(co, ci, k, gain, rng));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[co]));
        Conv2dLayer {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, x: NodeId) -> NodeId {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    w: ParamId,
    b: ParamId,
}

impl LinearLayer {
    pub fn new<R: Rng>(
        params: &mut Params,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let std = (2.0 / fan_in as f32).sqrt();
        let w = params.add(
            format!("{name}.w"),
            Tensor::randn(&[fan_out, fan_in], rng).scale(std),
        );
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        LinearLayer { w, b }
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, x: NodeId) -> NodeId {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNormLayer {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNormLayer {
    pub fn new(params: &mut Params, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0, "channels must divide groups");
        let gamma = params.add(format!("{name}.g"), Tensor::filled(&[channels], 1.0));
        let beta = params.add(format!("{name}.b"), Tensor::zeros(&[channels]));
        GroupNormLayer {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &Params, x: NodeId) -> NodeId {
        let ga = g.param(params, self.gamma);
        let be = g.param(params, self.beta);
        g.group_norm(x, ga, be, self.groups)
    }
}

/// Sinusoidal embedding of a (global) timestep, `[dim]` with interleaved
/// sin/cos frequency bands, max period 10000.
pub fn timestep_embedding(t: f32, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000.0f32.ln()) * i as f32 / half as f32).exp();
        data.push((t * freq).sin());
    }
    for i in 0..half {
        let freq = (-(10000.0f32.ln()) * i as f32 / half as f32).exp();
        data.push((t * freq).cos());
    }
    Tensor::from_vec(&[dim], data)
}
