//! Low-resolution generator trained against an external prior.
//!
//! `G` maps a noise map concatenated with a fixed sinusoidal positional
//! encoding to a low-resolution image (signed range, tanh output). It is
//! fully convolutional, so the same weights generate at any spatial size.
//! A small critic scores whole low-resolution images; the generator side
//! of the objective combines the non-saturating GAN loss with a mode-
//! seeking penalty that rewards distinct critic responses for distinct
//! noise draws.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::nn::conv::Pad;
use crate::nn::graph::{Graph, Tensor};
use crate::nn::layers::{Act, Binder, Conv2dLayer, ConvBlock, ParamMuts, ParamRefs};
use crate::rng::Rng;

/// Sinusoidal positional encoding `[channels, h, w]`, values in `[-1, 1]`.
/// The first half of the channels encodes the row index, the second half
/// the column index; within a half, channel `j` uses frequency
/// `10000^(-2*(j/2) / half)`, with even `j` taking `sin` and odd `j`
/// taking `cos`.
pub fn positional_encoding(channels: usize, h: usize, w: usize) -> Result<Array3<f32>> {
    if channels < 2 || channels % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs an even channel count >= 2, got {channels}"
        )));
    }
    let half = channels / 2;
    let mut pe = Array3::<f32>::zeros((channels, h, w));
    for j in 0..half {
        let k = (j / 2) as f64;
        let freq = 10000f64.powf(-2.0 * k / half as f64);
        for y in 0..h {
            let arg = y as f64 * freq;
            let v = if j % 2 == 0 { arg.sin() } else { arg.cos() } as f32;
            for x in 0..w {
                pe[[j, y, x]] = v;
            }
        }
        for x in 0..w {
            let arg = x as f64 * freq;
            let v = if j % 2 == 0 { arg.sin() } else { arg.cos() } as f32;
            for y in 0..h {
                pe[[half + j, y, x]] = v;
            }
        }
    }
    Ok(pe)
}

/// Fully convolutional low-resolution generator.
pub struct LowResGenerator {
    pub blocks: Vec<ConvBlock>,
    pub head: ConvBlock,
    pub noise_channels: usize,
    pub pe_channels: usize,
}

impl LowResGenerator {
    pub fn new(
        rng: &mut Rng,
        noise_channels: usize,
        pe_channels: usize,
        hidden: usize,
        depth: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("generator needs at least one block".into()));
        }
        // Validate the encoding config early.
        positional_encoding(pe_channels, 1, 1)?;
        let mut blocks = Vec::with_capacity(depth);
        let mut ci = noise_channels + pe_channels;
        for _ in 0..depth {
            blocks.push(ConvBlock::new(
                rng,
                ci,
                hidden,
                3,
                Pad::same_zero(3, 1),
                true,
                Act::LeakyRelu(0.2),
            ));
            ci = hidden;
        }
        let head = ConvBlock::new(rng, hidden, 3, 3, Pad::same_zero(3, 1), false, Act::Tanh);
        Ok(LowResGenerator {
            blocks,
            head,
            noise_channels,
            pe_channels,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.noise_channels + self.pe_channels
    }

    /// Draw a batch of inputs: fresh standard-normal noise maps with the
    /// positional encoding for `(h, w)` appended along the channel axis.
    pub fn make_input(&self, rng: &mut Rng, n: usize, h: usize, w: usize) -> Result<Array4<f32>> {
        let pe = positional_encoding(self.pe_channels, h, w)?;
        let mut input = Array4::<f32>::zeros((n, self.input_channels(), h, w));
        for ni in 0..n {
            for c in 0..self.noise_channels {
                for y in 0..h {
                    for x in 0..w {
                        input[[ni, c, y, x]] = rng.normal_f32();
                    }
                }
            }
            for c in 0..self.pe_channels {
                for y in 0..h {
                    for x in 0..w {
                        input[[ni, self.noise_channels + c, y, x]] = pe[[c, y, x]];
                    }
                }
            }
        }
        Ok(input)
    }

    /// Graph forward: `[n, noise+pe, h, w]` -> signed `[n, 3, h, w]`.
    pub fn forward(&self, g: &mut Graph<f32>, input: Tensor, binder: &mut Binder) -> Tensor {
        let mut y = input;
        for b in &self.blocks {
            y = b.forward(g, y, binder);
        }
        self.head.forward(g, y, binder)
    }

    /// Value-level generation (no gradients): signed output `[n, 3, h, w]`.
    pub fn generate(&self, input: &Array4<f32>) -> Array4<f32> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(input.clone().into_dyn());
        let mut binder = Binder::frozen();
        let out = self.forward(&mut g, x, &mut binder);
        g.value(out)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned()
    }

    pub fn collect<'a>(&'a self, out: &mut ParamRefs<'a>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("g.block{i}"), out);
        }
        self.head.collect("g.head", out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("g.block{i}"), out);
        }
        self.head.collect_mut("g.head", out);
    }
}

/// Critic over whole low-resolution images; returns one raw logit per
/// sample (spatial mean of a final logit map).
pub struct PriorCritic {
    pub blocks: Vec<ConvBlock>,
    pub head: Conv2dLayer,
}

impl PriorCritic {
    pub fn new(rng: &mut Rng, hidden: usize, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidArgument("critic needs at least one block".into()));
        }
        let mut blocks = Vec::with_capacity(depth);
        let mut ci = 3;
        for _ in 0..depth {
            blocks.push(ConvBlock::new(
                rng,
                ci,
                hidden,
                3,
                Pad::same_zero(3, 1),
                false,
                Act::LeakyRelu(0.2),
            ));
            ci = hidden;
        }
        let head = Conv2dLayer::new(rng, hidden, 1, 3, Pad::same_zero(3, 1), 1);
        Ok(PriorCritic { blocks, head })
    }

    /// `[n, 3, h, w]` signed images -> `[n]` raw logits.
    pub fn forward(&self, g: &mut Graph<f32>, x: Tensor, binder: &mut Binder) -> Tensor {
        let mut y = x;
        for b in &self.blocks {
            y = b.forward(g, y, binder);
        }
        let logits = self.head.forward(g, y, binder);
        g.mean_per_sample(logits)
    }

    pub fn collect<'a>(&'a self, out: &mut ParamRefs<'a>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("dg.block{i}"), out);
        }
        self.head.collect("dg.head", out);
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("dg.block{i}"), out);
        }
        self.head.collect_mut("dg.head", out);
    }
}

/// Critic-side loss on raw per-sample logits:
/// `mean softplus(-real) + mean softplus(fake)`
/// (the non-saturating discriminator objective,
/// `-E log σ(real) - E log(1 - σ(fake))`, written stably).
pub fn critic_loss(g: &mut Graph<f32>, real_logits: Tensor, fake_logits: Tensor) -> Tensor {
    let nr = g.neg(real_logits);
    let lr = g.softplus(nr);
    let lr = g.mean_all(lr);
    let lf = g.softplus(fake_logits);
    let lf = g.mean_all(lf);
    g.add(lr, lf)
}

/// Generator-side external-prior loss on raw logits of three independent
/// fake batches: the non-saturating term on `fake`, minus
/// `lambda_div * mean |d(fake1) - d(fake2)|`, which pushes the generator
/// to produce samples the critic can tell apart (an anti-collapse term —
/// it uses raw logits, not sigmoids, so its gradient does not vanish
/// when the critic saturates).
pub fn generator_prior_loss(
    g: &mut Graph<f32>,
    d_fake: Tensor,
    d_fake1: Tensor,
    d_fake2: Tensor,
    lambda_div: f32,
) -> Tensor {
    let nf = g.neg(d_fake);
    let ns = g.softplus(nf);
    let ns = g.mean_all(ns);
    let diff = g.sub(d_fake1, d_fake2);
    let adiff = g.abs(diff);
    let spread = g.mean_all(adiff);
    let penalty = g.scale(spread, -lambda_div);
    g.add(ns, penalty)
}
