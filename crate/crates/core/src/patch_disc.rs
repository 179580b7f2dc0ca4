//! Multi-dilation patch critic over full-resolution images.
//!
//! Several parallel convolutional branches score overlapping patches of
//! the input; each branch uses a different dilation, so the branches see
//! patch statistics at different scales without any downsampling. Every
//! spatial location of a branch output is one raw patch logit. The
//! adversarial objective is the plain non-saturating GAN loss averaged
//! over locations and branches — no gradient penalty and no
//! normalization layers, which keeps the critic exactly translation
//! equivariant under circular padding.

use crate::error::{Error, Result};
use crate::nn::conv::Pad;
use crate::nn::graph::{Graph, Tensor};
use crate::nn::layers::{Binder, Conv2dLayer, ParamMuts, ParamRefs};
use crate::rng::Rng;

/// One dilated conv stack: 3 -> hidden -> ... -> 1 logit map.
pub struct CriticBranch {
    pub dilation: usize,
    pub convs: Vec<Conv2dLayer>,
}

impl CriticBranch {
    fn new(rng: &mut Rng, hidden: usize, layers: usize, dilation: usize, circular: bool) -> Self {
        let pad = |d: usize| {
            if circular {
                Pad::Circular(d)
            } else {
                Pad::Zero(d)
            }
        };
        let mut convs = Vec::with_capacity(layers);
        let mut ci = 3;
        for li in 0..layers {
            let co = if li + 1 == layers { 1 } else { hidden };
            convs.push(Conv2dLayer::new(rng, ci, co, 3, pad(dilation), dilation));
            ci = co;
        }
        CriticBranch { dilation, convs }
    }

    /// Receptive field side of one output logit: each 3x3 conv at
    /// dilation `d` widens it by `2d`.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * self.dilation * self.convs.len()
    }

    fn forward(&self, g: &mut Graph<f32>, x: Tensor, binder: &mut Binder) -> Tensor {
        let mut y = x;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(g, y, binder);
            if i + 1 < self.convs.len() {
                y = g.leaky_relu(y, 0.2);
            }
        }
        y
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut ParamRefs<'a>) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.collect(&format!("{prefix}.conv{i}"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut ParamMuts<'a>) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.collect_mut(&format!("{prefix}.conv{i}"), out);
        }
    }
}

/// Parallel dilated branches; `forward` yields one logit map per branch.
pub struct PatchCritic {
    pub branches: Vec<CriticBranch>,
}

impl PatchCritic {
    /// `dilations` fixes the branch scales (e.g. `[1, 2, 4]`); `layers`
    /// convs per branch. `circular` selects wrap-around padding, which
    /// makes every branch exactly translation equivariant.
    pub fn new(
        rng: &mut Rng,
        hidden: usize,
        layers: usize,
        dilations: &[usize],
        circular: bool,
    ) -> Result<Self> {
        if dilations.is_empty() {
            return Err(Error::InvalidArgument("critic needs at least one branch".into()));
        }
        if layers < 2 {
            return Err(Error::InvalidArgument(
                "critic branches need at least two conv layers".into(),
            ));
        }
        if dilations.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        let branches = dilations
            .iter()
            .map(|&d| CriticBranch::new(&mut rng.stream(&format!("branch{d}")), hidden, layers, d, circular))
            .collect();
        Ok(PatchCritic { branches })
    }

    pub fn receptive_fields(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.receptive_field()).collect()
    }

    /// `[n, 3, h, w]` signed image -> per-branch logit maps `[n, 1, h, w]`.
    pub fn forward(&self, g: &mut Graph<f32>, x: Tensor, binder: &mut Binder) -> Vec<Tensor> {
        self.branches.iter().map(|b| b.forward(g, x, binder)).collect()
    }

    pub fn collect<'a>(&'a self, out: &mut ParamRefs<'a>) {
        for b in &self.branches {
            b.collect(&format!("d.dil{}", b.dilation), out);
        }
    }

    pub fn collect_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        for b in &mut self.branches {
            let prefix = format!("d.dil{}", b.dilation);
            b.collect_mut(&prefix, out);
        }
    }
}

/// Critic-side patch-adversarial loss: per branch
/// `mean softplus(-real) + mean softplus(fake)` over all patch logits,
/// averaged across branches.
pub fn patch_critic_loss(g: &mut Graph<f32>, real: &[Tensor], fake: &[Tensor]) -> Tensor {
    assert_eq!(real.len(), fake.len());
    let per_branch: Vec<Tensor> = real
        .iter()
        .zip(fake.iter())
        .map(|(&r, &f)| {
            let nr = g.neg(r);
            let lr = g.softplus(nr);
            let lr = g.mean_all(lr);
            let lf = g.softplus(f);
            let lf = g.mean_all(lf);
            g.add(lr, lf)
        })
        .collect();
    g.mean_of(&per_branch)
}

/// Generator-side patch-adversarial loss: per branch
/// `mean softplus(-fake)`, averaged across branches.
pub fn patch_generator_loss(g: &mut Graph<f32>, fake: &[Tensor]) -> Tensor {
    let per_branch: Vec<Tensor> = fake
        .iter()
        .map(|&f| {
            let nf = g.neg(f);
            let lf = g.softplus(nf);
            g.mean_all(lf)
        })
        .collect();
    g.mean_of(&per_branch)
}
