//! Parameterized building blocks. Each block owns the ids of its
//! parameters and emits tape operations.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::params::{he_normal, ParamId, ParamStore, Tensor};

pub(crate) const LEAKY_SLOPE: f32 = 0.01;

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(IxDyn(shape))
}

fn filled(shape: &[usize], v: f32) -> Tensor {
    Tensor::from_elem(IxDyn(shape), v)
}

fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let d = Normal::new(0.0, std).expect("valid std");
    Tensor::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
}

/// Plain convolution with bias.
#[derive(Debug, Clone)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

impl Conv {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * kernel.pow(3);
        let w = store.add(format!("{prefix}.weight"), he_normal(rng, &[cout, cin, kernel, kernel, kernel], fan_in));
        let b = store.add(format!("{prefix}.bias"), zeros(&[cout]));
        Self { w, b, stride }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (w, b) = (t.param(self.w), t.param(self.b));
        t.conv3d(x, w, b, self.stride)
    }
}

/// Convolution, instance normalization, LeakyReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    conv: Conv,
    gamma: ParamId,
    beta: ParamId,
}

impl ConvBlock {
    pub fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv = Conv::build(store, rng, &format!("{prefix}.conv"), cin, cout, 3, stride);
        let gamma = store.add(format!("{prefix}.norm.weight"), filled(&[cout], 1.0));
        let beta = store.add(format!("{prefix}.norm.bias"), zeros(&[cout]));
        Self { conv, gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.conv.forward(t, x);
        let (g, b) = (t.param(self.gamma), t.param(self.beta));
        let h = t.instance_norm(h, g, b);
        t.leaky_relu(h, LEAKY_SLOPE)
    }
}

/// Fully connected layer over `(B, F)`.
#[derive(Debug, Clone)]
pub(crate) struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    pub fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, fin: usize, fout: usize) -> Self {
        let w = store.add(format!("{prefix}.weight"), he_normal(rng, &[fout, fin], fin));
        let b = store.add(format!("{prefix}.bias"), zeros(&[fout]));
        Self { w, b }
    }

    /// Weights drawn with a fixed standard deviation and a constant bias.
    pub fn build_with<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        fin: usize,
        fout: usize,
        std: f32,
        bias: f32,
    ) -> Self {
        let w = store.add(format!("{prefix}.weight"), normal(rng, &[fout, fin], std));
        let b = store.add(format!("{prefix}.bias"), filled(&[fout], bias));
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let (w, b) = (t.param(self.w), t.param(self.b));
        t.linear(x, w, b)
    }
}

/// Feature-wise affine modulation of a `(B, C, ...)` map by a `(B, F)`
/// conditioning vector. Starts near the identity: scale bias 1, shift bias 0.
#[derive(Debug, Clone)]
pub(crate) struct Film {
    scale: Dense,
    shift: Dense,
}

impl Film {
    pub fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cond: usize, channels: usize) -> Self {
        let std = 0.5 / (cond as f32).sqrt();
        Self {
            scale: Dense::build_with(store, rng, &format!("{prefix}.scale"), cond, channels, std, 1.0),
            shift: Dense::build_with(store, rng, &format!("{prefix}.shift"), cond, channels, std, 0.0),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, cond: Var) -> Var {
        let s = self.scale.forward(t, cond);
        let h = self.shift.forward(t, cond);
        t.film(x, s, h)
    }
}

/// Gated fusion: a pointwise gate per modality and a channel-mixing
/// projection after the softmax-weighted sum.
#[derive(Debug, Clone)]
pub(crate) struct Fusion {
    gate_w: ParamId,
    gate_b: ParamId,
    proj: Conv,
}

impl Fusion {
    pub fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, modalities: usize, channels: usize) -> Self {
        let gate_w = store.add("fusion.gate.weight", normal(rng, &[modalities, channels], 0.1));
        let gate_b = store.add("fusion.gate.bias", zeros(&[modalities]));
        let proj = Conv::build(store, rng, "fusion.proj", channels, channels, 1, 1);
        Self { gate_w, gate_b, proj }
    }

    pub fn forward(&self, t: &mut Tape, anat: &[Var], masks: &[Vec<bool>]) -> Var {
        let (w, b) = (t.param(self.gate_w), t.param(self.gate_b));
        let mixed = t.masked_fusion(anat, w, b, masks);
        self.proj.forward(t, mixed)
    }
}
