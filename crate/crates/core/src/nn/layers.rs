//! Parameterized layers and the parameter-binding convention.
//!
//! A network's parameters live in plain `ndarray` buffers inside layer
//! structs. To run a forward pass, the network binds each buffer into a
//! fresh [`Graph`] through a [`Binder`], which records the leaf handles in
//! binding order. The same order is used by `collect`/`collect_mut`, so
//! `binder.leaves[i]` always corresponds to `collect()[i]` — that pairing
//! is what the optimizer and the checkpoint format rely on.

use ndarray::ArrayD;

use super::conv::Pad;
use super::graph::{Graph, Tensor};
use super::init;
use crate::rng::Rng;

/// Records parameter leaves created during a forward pass. A frozen binder
/// registers constants instead, so no gradients flow into (or memory is
/// spent on) parameters that are not being trained.
pub struct Binder {
    trainable: bool,
    pub leaves: Vec<Tensor>,
}

impl Binder {
    pub fn trainable() -> Self {
        Binder {
            trainable: true,
            leaves: Vec::new(),
        }
    }

    pub fn frozen() -> Self {
        Binder {
            trainable: false,
            leaves: Vec::new(),
        }
    }

    pub fn bind(&mut self, g: &mut Graph<f32>, p: &ArrayD<f32>) -> Tensor {
        let t = if self.trainable {
            g.leaf(p.clone())
        } else {
            g.constant(p.clone())
        };
        self.leaves.push(t);
        t
    }

    /// Gradients of all bound parameters, in binding order, after a
    /// backward pass on `g`.
    pub fn grads(&self, g: &Graph<f32>) -> Vec<Option<ArrayD<f32>>> {
        self.leaves.iter().map(|t| g.grad(*t).cloned()).collect()
    }
}

/// Named views over a parameter set, in a fixed deterministic order.
pub type ParamRefs<'a> = Vec<(String, &'a ArrayD<f32>)>;
pub type ParamMuts<'a> = Vec<(String, &'a mut ArrayD<f32>)>;

/// Stride-1 convolution layer with bias.
pub struct Conv2dLayer {
    pub w: ArrayD<f32>,
    pub b: ArrayD<f32>,
    pub pad: Pad,
    pub dilation: usize,
}

impl Conv2dLayer {
    pub fn new(rng: &mut Rng, ci: usize, co: usize, k: usize, pad: Pad, dilation: usize) -> Self {
        Conv2dLayer {
            w: init::conv_kernel(rng, co, ci, k, k),
            b: init::zero_bias(co),
            pad,
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: Tensor, binder: &mut Binder) -> Tensor {
        let w = binder.bind(g, &self.w);
        let b = binder.bind(g, &self.b);
        let y = g.conv2d(x, w, self.pad, self.dilation);
        g.add_bias(y, b)
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}

/// Instance normalization with learned per-channel scale and shift.
pub struct InstanceNorm2d {
    pub gamma: ArrayD<f32>,
    pub beta: ArrayD<f32>,
    pub eps: f32,
}

impl InstanceNorm2d {
    pub fn new(c: usize) -> Self {
        InstanceNorm2d {
            gamma: init::ones(c),
            beta: init::zero_bias(c),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: Tensor, binder: &mut Binder) -> Tensor {
        let gamma = binder.bind(g, &self.gamma);
        let beta = binder.bind(g, &self.beta);
        g.instance_norm(x, gamma, beta, self.eps)
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

/// Activation applied at the end of a [`ConvBlock`].
#[derive(Copy, Clone, Debug)]
pub enum Act {
    LeakyRelu(f32),
    Tanh,
    None,
}

/// conv -> (instance norm) -> activation.
pub struct ConvBlock {
    pub conv: Conv2dLayer,
    pub norm: Option<InstanceNorm2d>,
    pub act: Act,
}

impl ConvBlock {
    pub fn new(rng: &mut Rng, ci: usize, co: usize, k: usize, pad: Pad, norm: bool, act: Act) -> Self {
        ConvBlock {
            conv: Conv2dLayer::new(rng, ci, co, k, pad, 1),
            norm: norm.then(|| InstanceNorm2d::new(co)),
            act,
        }
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: Tensor, binder: &mut Binder) -> Tensor {
        let mut y = self.conv.forward(g, x, binder);
        if let Some(norm) = &self.norm {
            y = norm.forward(g, y, binder);
        }
        match self.act {
            Act::LeakyRelu(a) => g.leaky_relu(y, a),
            Act::Tanh => g.tanh(y),
            Act::None => y,
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        if let Some(norm) = &self.norm {
            norm.collect(&format!("{prefix}.norm"), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a>) {
        self.conv.collect_mut(&format!("{prefix}.conv"), out);
        if let Some(norm) = &mut self.norm {
            norm.collect_mut(&format!("{prefix}.norm"), out);
        }
    }
}
