//! Joint training of the full pipeline against one image.
//!
//! Each epoch alternates critic updates with one combined generator
//! update whose objective mirrors the overall loss: the patch-adversarial
//! term on `F(G(z))` at full resolution, plus `lambda_ext` times the
//! external-prior term on `G`, plus `lambda_int` times the internal
//! reconstruction term on `F`. The first `warmup_frac` of the epochs
//! trains only the two prior terms so `G` and `F` are sensible before the
//! full-resolution critic starts shaping them. Ablation modes drop
//! individual terms or split training into a cascade, which is how the
//! contribution of each piece is measured.
//!
//! Determinism: every random draw comes from a stream keyed by
//! `(seed, purpose, epoch)`, never from a stateful generator owned by the
//! loop, so training is bit-reproducible and a resumed run continues
//! exactly as if it had never stopped.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::depnet::{critic_loss, generator_prior_loss, LowResGenerator, PriorCritic};
use crate::dipnet::{internal_prior_loss, perturb_signed, DipNet, DipNetCfg, EmbedderKind};
use crate::error::{Error, Result};
use crate::external_prior::{
    AugSpec, DirectoryProvider, InversionProvider, InvertCfg, PriorProvider, SocketGenerator,
    SyntheticAugment,
};
use crate::imaging::{preprocess, ImageTensor};
use crate::nn::adam::Adam;
use crate::nn::graph::{Graph, Tensor};
use crate::nn::layers::Binder;
use crate::patch_disc::{patch_critic_loss, patch_generator_loss, PatchCritic};
use crate::rng::Rng;

/// Which training terms are active.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Everything: external + internal priors, then joint adversarial.
    Full,
    /// Two-stage cascade: priors only for the first half, then the
    /// low-resolution generator is frozen and only `F` trains against the
    /// patch critic. Mimics pipelines without joint optimization.
    Cascaded,
    NoExternal,
    NoInternal,
    NoPatchAdv,
}

/// Where prior batches come from.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Augmented crops of the training image itself.
    Synthetic,
    /// A directory of images (`prior_path` points at it).
    Directory,
    /// A pretrained generator behind a Unix socket (`prior_path`),
    /// inverted once and sampled around the recovered latent.
    Socket,
}

/// Flat run configuration. Every field maps to one CLI flag and one JSON
/// key; unknown keys in a config file are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Fraction of epochs before the patch critic joins in.
    pub warmup_frac: f32,
    pub max_side: usize,
    pub down_factor: usize,
    /// Prior batch size for the low-resolution critic and generator.
    pub batch_prior: usize,
    pub lr_g: f32,
    pub lr_f: f32,
    pub lr_d: f32,
    pub lr_dg: f32,
    pub lambda_ext: f32,
    pub lambda_int: f32,
    /// Weight of the critic-spread (anti-collapse) bonus.
    pub lambda_div: f32,
    pub lambda_sparse: f32,
    /// Scale of the signed-space disturbance fed to the internal prior.
    pub delta_sigma: f32,
    /// Latent perturbation scale for the inversion prior.
    pub sigma_z: f32,
    pub temperature: f32,
    pub pt_window: usize,
    pub noise_channels: usize,
    pub pe_channels: usize,
    pub g_hidden: usize,
    pub g_depth: usize,
    pub dg_hidden: usize,
    pub dg_depth: usize,
    pub f_embedder: EmbedderKind,
    pub f_embed_dim: usize,
    pub f_ir_channels: usize,
    pub f_ir_res_blocks: usize,
    pub d_hidden: usize,
    pub d_layers: usize,
    pub d_dilations: Vec<usize>,
    pub d_circular: bool,
    pub ablation: Ablation,
    pub prior: PriorKind,
    pub prior_path: Option<PathBuf>,
    pub prior_invert_iters: usize,
    /// Save a checkpoint every N epochs (0 = only when asked).
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Small preset that trains in minutes on a CPU: 64-pixel working
    /// resolution, 8x downscaling, compact networks.
    pub fn desk() -> Self {
        RunConfig {
            seed: 17,
            epochs: 500,
            warmup_frac: 0.1,
            max_side: 64,
            down_factor: 8,
            batch_prior: 8,
            lr_g: 5e-4,
            lr_f: 5e-4,
            lr_d: 1e-4,
            lr_dg: 1e-4,
            lambda_ext: 1.0,
            lambda_int: 1.0,
            lambda_div: 1.0,
            lambda_sparse: 0.01,
            delta_sigma: 0.1,
            sigma_z: 0.5,
            temperature: 0.07,
            pt_window: 3,
            noise_channels: 8,
            pe_channels: 8,
            g_hidden: 24,
            g_depth: 3,
            dg_hidden: 24,
            dg_depth: 3,
            f_embedder: EmbedderKind::Conv,
            f_embed_dim: 24,
            f_ir_channels: 24,
            f_ir_res_blocks: 2,
            d_hidden: 16,
            d_layers: 3,
            d_dilations: vec![1, 2],
            d_circular: false,
            ablation: Ablation::Full,
            prior: PriorKind::Synthetic,
            prior_path: None,
            prior_invert_iters: 300,
            checkpoint_every: 0,
            log_every: 50,
        }
    }

    /// Full-scale preset: 256-pixel working resolution, 5000 epochs,
    /// 7-pixel transfer window, wider networks.
    pub fn paper() -> Self {
        RunConfig {
            seed: 17,
            epochs: 5000,
            warmup_frac: 0.1,
            max_side: 256,
            down_factor: 8,
            batch_prior: 32,
            lr_g: 5e-4,
            lr_f: 5e-4,
            lr_d: 1e-4,
            lr_dg: 1e-4,
            lambda_ext: 1.0,
            lambda_int: 1.0,
            lambda_div: 1.0,
            lambda_sparse: 0.01,
            delta_sigma: 0.1,
            sigma_z: 0.5,
            temperature: 0.07,
            pt_window: 7,
            noise_channels: 16,
            pe_channels: 16,
            g_hidden: 64,
            g_depth: 5,
            dg_hidden: 64,
            dg_depth: 4,
            f_embedder: EmbedderKind::Conv,
            f_embed_dim: 64,
            f_ir_channels: 64,
            f_ir_res_blocks: 4,
            d_hidden: 64,
            d_layers: 4,
            d_dilations: vec![1, 2, 4],
            d_circular: false,
            ablation: Ablation::Full,
            prior: PriorKind::Synthetic,
            prior_path: None,
            prior_invert_iters: 500,
            checkpoint_every: 500,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(0.0..=0.9).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac must be in [0, 0.9], got {}", self.warmup_frac));
        }
        if self.down_factor < 2 || !self.down_factor.is_power_of_two() {
            return bad(format!(
                "down_factor must be a power of two >= 2, got {}",
                self.down_factor
            ));
        }
        if self.batch_prior < 2 {
            return bad("batch_prior must be at least 2 (the spread bonus pairs samples)".into());
        }
        if self.pt_window == 0 {
            return bad("pt_window must be positive".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.pe_channels < 2 || self.pe_channels % 2 != 0 {
            return bad(format!("pe_channels must be even and >= 2, got {}", self.pe_channels));
        }
        for (name, lr) in [
            ("lr_g", self.lr_g),
            ("lr_f", self.lr_f),
            ("lr_d", self.lr_d),
            ("lr_dg", self.lr_dg),
        ] {
            if !(lr > 0.0) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        for (name, v) in [
            ("lambda_sparse", self.lambda_sparse),
            ("delta_sigma", self.delta_sigma),
            ("sigma_z", self.sigma_z),
            ("lambda_div", self.lambda_div),
        ] {
            if v < 0.0 {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if self.d_dilations.is_empty() {
            return bad("d_dilations must not be empty".into());
        }
        if matches!(self.prior, PriorKind::Directory | PriorKind::Socket) && self.prior_path.is_none()
        {
            return bad(format!("prior {:?} needs prior_path", self.prior));
        }
        Ok(())
    }

    fn warmup_epochs(&self) -> usize {
        (self.epochs as f32 * self.warmup_frac).ceil() as usize
    }

    fn dipnet_cfg(&self) -> DipNetCfg {
        DipNetCfg {
            pt_window: self.pt_window,
            temperature: self.temperature,
            embedder: self.f_embedder,
            embed_dim: self.f_embed_dim,
            ir_channels: self.f_ir_channels,
            ir_res_blocks: self.f_ir_res_blocks,
            up_factor: self.down_factor,
        }
    }
}

/// Per-epoch loss record; absent values mean the term was not trained
/// that epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_dg: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_d: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_ext: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_adv: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_int: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recon_l1: Option<f32>,
    pub wallclock_s: f64,
}

impl EpochMetrics {
    fn empty(epoch: usize) -> Self {
        EpochMetrics {
            epoch,
            loss_dg: None,
            loss_d: None,
            loss_ext: None,
            loss_adv: None,
            loss_int: None,
            recon_l1: None,
            wallclock_s: 0.0,
        }
    }

    fn ensure_finite(&self) -> Result<()> {
        for (name, v) in [
            ("loss_dg", self.loss_dg),
            ("loss_d", self.loss_d),
            ("loss_ext", self.loss_ext),
            ("loss_adv", self.loss_adv),
            ("loss_int", self.loss_int),
        ] {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(Error::Divergence {
                        epoch: self.epoch,
                        term: name.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub wall_s: f64,
    pub metrics: Vec<EpochMetrics>,
}

/// Samples generated from a trained model.
pub struct GeneratedBatch {
    pub images: Vec<ImageTensor>,
    pub requested: (usize, usize),
    /// Actual output size: the low-resolution layout is an integer grid,
    /// so full-resolution dims round up to the next multiple of the
    /// downscale factor.
    pub actual: (usize, usize),
}

impl GeneratedBatch {
    pub fn was_rounded(&self) -> bool {
        self.requested != self.actual
    }
}

struct PhasePlan {
    external: bool,
    internal: bool,
    adversarial: bool,
    g_trainable: bool,
}

/// Owns the four networks, their optimizers and the training images.
pub struct Trainer {
    pub cfg: RunConfig,
    pub full: ImageTensor,
    pub low: ImageTensor,
    pub g: LowResGenerator,
    pub dg: PriorCritic,
    pub f: DipNet,
    pub d: PatchCritic,
    opt_g: Adam,
    opt_dg: Adam,
    opt_f: Adam,
    opt_d: Adam,
    provider: Box<dyn PriorProvider>,
    /// Next epoch index to run.
    epoch: usize,
    last_good: Option<(usize, Checkpoint)>,
}

fn batch_to_signed(batch: &[ImageTensor]) -> Array4<f32> {
    let (c, h, w) = (
        batch[0].channels(),
        batch[0].height(),
        batch[0].width(),
    );
    let mut out = Array4::<f32>::zeros((batch.len(), c, h, w));
    for (i, img) in batch.iter().enumerate() {
        let signed = img.to_signed();
        out.index_axis_mut(ndarray::Axis(0), i).assign(&signed);
    }
    out
}

/// Sum gradients across repeated bindings of the same parameter list: a
/// binder that ran `k` forward passes holds `k * n` leaves; the total
/// gradient of parameter `i` is the sum over its `k` copies.
fn grads_summed(binder: &Binder, g: &Graph<f32>, n: usize) -> Vec<Option<ArrayD<f32>>> {
    let leaves = binder.leaves.len();
    assert!(n > 0 && leaves % n == 0, "{leaves} bound leaves vs {n} parameters");
    let reps = leaves / n;
    let raw = binder.grads(g);
    (0..n)
        .map(|i| {
            let mut acc: Option<ArrayD<f32>> = None;
            for r in 0..reps {
                if let Some(gr) = &raw[r * n + i] {
                    acc = Some(match acc {
                        None => gr.clone(),
                        Some(mut a) => {
                            a.zip_mut_with(gr, |x, y| *x += *y);
                            a
                        }
                    });
                }
            }
            acc
        })
        .collect()
}

impl Trainer {
    pub fn new(
        cfg: RunConfig,
        source: &ImageTensor,
        provider: Option<Box<dyn PriorProvider>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let pre = preprocess(
            source,
            cfg.max_side,
            cfg.down_factor,
            cfg.pt_window * cfg.down_factor,
        )?;
        Trainer::from_parts(cfg, pre.full, pre.low, provider)
    }

    fn from_parts(
        cfg: RunConfig,
        full: ImageTensor,
        low: ImageTensor,
        provider: Option<Box<dyn PriorProvider>>,
    ) -> Result<Self> {
        let provider = match provider {
            Some(p) => p,
            None => build_provider(&cfg, &full, &low)?,
        };
        let g = LowResGenerator::new(
            &mut Rng::new(cfg.seed, "init/g"),
            cfg.noise_channels,
            cfg.pe_channels,
            cfg.g_hidden,
            cfg.g_depth,
        )?;
        let dg = PriorCritic::new(&mut Rng::new(cfg.seed, "init/dg"), cfg.dg_hidden, cfg.dg_depth)?;
        let f = DipNet::new(&mut Rng::new(cfg.seed, "init/f"), &low, &cfg.dipnet_cfg())?;
        let d = PatchCritic::new(
            &mut Rng::new(cfg.seed, "init/d"),
            cfg.d_hidden,
            cfg.d_layers,
            &cfg.d_dilations,
            cfg.d_circular,
        )?;
        let opt_g = {
            let mut refs = Vec::new();
            g.collect(&mut refs);
            Adam::new(cfg.lr_g, &refs.iter().map(|(_, p)| &**p).collect::<Vec<_>>())
        };
        let opt_dg = {
            let mut refs = Vec::new();
            dg.collect(&mut refs);
            Adam::new(cfg.lr_dg, &refs.iter().map(|(_, p)| &**p).collect::<Vec<_>>())
        };
        let opt_f = {
            let mut refs = Vec::new();
            f.collect(&mut refs);
            Adam::new(cfg.lr_f, &refs.iter().map(|(_, p)| &**p).collect::<Vec<_>>())
        };
        let opt_d = {
            let mut refs = Vec::new();
            d.collect(&mut refs);
            Adam::new(cfg.lr_d, &refs.iter().map(|(_, p)| &**p).collect::<Vec<_>>())
        };
        Ok(Trainer {
            cfg,
            full,
            low,
            g,
            dg,
            f,
            d,
            opt_g,
            opt_dg,
            opt_f,
            opt_d,
            provider,
            epoch: 0,
            last_good: None,
        })
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    fn rng_for(&self, purpose: &str, epoch: usize) -> Rng {
        Rng::new(self.cfg.seed, &format!("train/{purpose}/{epoch}"))
    }

    fn phase_for(&self, epoch: usize) -> PhasePlan {
        let warm = self.cfg.warmup_epochs();
        match self.cfg.ablation {
            Ablation::Full => PhasePlan {
                external: true,
                internal: true,
                adversarial: epoch >= warm,
                g_trainable: true,
            },
            Ablation::Cascaded => {
                let split = self.cfg.epochs / 2;
                if epoch < split {
                    PhasePlan {
                        external: true,
                        internal: true,
                        adversarial: false,
                        g_trainable: true,
                    }
                } else {
                    PhasePlan {
                        external: false,
                        internal: true,
                        adversarial: true,
                        g_trainable: false,
                    }
                }
            }
            Ablation::NoExternal => PhasePlan {
                external: false,
                internal: true,
                adversarial: epoch >= warm,
                g_trainable: true,
            },
            Ablation::NoInternal => PhasePlan {
                external: true,
                internal: false,
                adversarial: epoch >= warm,
                g_trainable: true,
            },
            Ablation::NoPatchAdv => PhasePlan {
                external: true,
                internal: true,
                adversarial: false,
                g_trainable: true,
            },
        }
    }

    /// Value-level `F(G(z))` at the training resolution (no gradients).
    fn fake_full_value(&self, rng: &mut Rng) -> Result<ArrayD<f32>> {
        let (lh, lw) = self.low.dims();
        let zin = self.g.make_input(rng, 1, lh, lw)?;
        let lowfake = self.g.generate(&zin);
        let mut g = Graph::<f32>::new();
        let lf = g.constant(lowfake.into_dyn());
        let mut frozen = Binder::frozen();
        let fwd = self.f.forward_graph(&mut g, lf, &mut frozen)?;
        Ok(g.value(fwd.out).clone())
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let t0 = Instant::now();
        let plan = self.phase_for(epoch);
        let (lh, lw) = self.low.dims();
        let b = self.cfg.batch_prior;
        let mut m = EpochMetrics::empty(epoch);

        // --- low-resolution critic update ---------------------------------
        if plan.external && plan.g_trainable {
            let real = self
                .provider
                .batch(&mut self.rng_for("prior", epoch), b, lh, lw)?;
            let real4 = batch_to_signed(&real);
            let zin = self.g.make_input(&mut self.rng_for("z_dg", epoch), b, lh, lw)?;
            let fake4 = self.g.generate(&zin);
            let mut g = Graph::<f32>::new();
            let rt = g.constant(real4.into_dyn());
            let ft = g.constant(fake4.into_dyn());
            let mut binder = Binder::trainable();
            let dr = self.dg.forward(&mut g, rt, &mut binder);
            let df = self.dg.forward(&mut g, ft, &mut binder);
            let loss = critic_loss(&mut g, dr, df);
            g.backward(loss);
            m.loss_dg = Some(g.scalar_value(loss));
            let n = {
                let mut refs = Vec::new();
                self.dg.collect(&mut refs);
                refs.len()
            };
            let grads = grads_summed(&binder, &g, n);
            let mut muts = Vec::new();
            self.dg.collect_mut(&mut muts);
            let mut arrays: Vec<&mut ArrayD<f32>> = muts.into_iter().map(|(_, p)| p).collect();
            self.opt_dg.step(&mut arrays, &grads);
        }

        // --- full-resolution patch critic update --------------------------
        if plan.adversarial {
            let fake_full = self.fake_full_value(&mut self.rng_for("z_d", epoch))?;
            let (fh, fw) = self.full.dims();
            let real_signed = self
                .full
                .to_signed()
                .into_shape_with_order((1, 3, fh, fw))
                .expect("contiguous")
                .into_dyn();
            let mut g = Graph::<f32>::new();
            let rt = g.constant(real_signed);
            let ft = g.constant(fake_full);
            let mut binder = Binder::trainable();
            let rmaps = self.d.forward(&mut g, rt, &mut binder);
            let fmaps = self.d.forward(&mut g, ft, &mut binder);
            let loss = patch_critic_loss(&mut g, &rmaps, &fmaps);
            g.backward(loss);
            m.loss_d = Some(g.scalar_value(loss));
            let n = {
                let mut refs = Vec::new();
                self.d.collect(&mut refs);
                refs.len()
            };
            let grads = grads_summed(&binder, &g, n);
            let mut muts = Vec::new();
            self.d.collect_mut(&mut muts);
            let mut arrays: Vec<&mut ArrayD<f32>> = muts.into_iter().map(|(_, p)| p).collect();
            self.opt_d.step(&mut arrays, &grads);
        }

        // --- combined generator update -------------------------------------
        let g_in_graph = plan.g_trainable && (plan.external || plan.adversarial);
        if g_in_graph || plan.internal || plan.adversarial {
            let mut g = Graph::<f32>::new();
            let mut binder_g = if g_in_graph {
                Binder::trainable()
            } else {
                Binder::frozen()
            };
            let mut binder_f = Binder::trainable();
            let mut terms: Vec<Tensor> = Vec::new();
            let mut f_used = false;

            // The low-resolution fake that feeds the adversarial path.
            let mut lowfake_node: Option<Tensor> = None;

            if plan.external && plan.g_trainable {
                // One batched pass over 2b draws; the spread bonus pairs
                // the two halves.
                let zall = self
                    .g
                    .make_input(&mut self.rng_for("z_g", epoch), 2 * b, lh, lw)?;
                let zt = g.constant(zall.into_dyn());
                let gout = self.g.forward(&mut g, zt, &mut binder_g);
                let mut frozen_dg = Binder::frozen();
                let scores = self.dg.forward(&mut g, gout, &mut frozen_dg);
                let idx1: Vec<usize> = (0..b).collect();
                let idx2: Vec<usize> = (b..2 * b).collect();
                let s1 = g.gather_flat(scores, std::sync::Arc::new(idx1), &[b]);
                let s2 = g.gather_flat(scores, std::sync::Arc::new(idx2), &[b]);
                let ext = generator_prior_loss(&mut g, scores, s1, s2, self.cfg.lambda_div);
                m.loss_ext = Some(g.scalar_value(ext));
                let weighted = g.scale(ext, self.cfg.lambda_ext);
                terms.push(weighted);
                if plan.adversarial {
                    // Reuse sample 0 of the same batch so the adversarial
                    // gradient reaches G through F.
                    let chw = 3 * lh * lw;
                    let idx0: Vec<usize> = (0..chw).collect();
                    let s0 = g.gather_flat(gout, std::sync::Arc::new(idx0), &[1, 3, lh, lw]);
                    lowfake_node = Some(s0);
                }
            } else if plan.adversarial && plan.g_trainable {
                let zin = self.g.make_input(&mut self.rng_for("z_g", epoch), 1, lh, lw)?;
                let zt = g.constant(zin.into_dyn());
                let gout = self.g.forward(&mut g, zt, &mut binder_g);
                lowfake_node = Some(gout);
            } else if plan.adversarial {
                // Frozen G: feed a value-level fake.
                let zin = self.g.make_input(&mut self.rng_for("z_g", epoch), 1, lh, lw)?;
                let lowfake = self.g.generate(&zin);
                lowfake_node = Some(g.constant(lowfake.into_dyn()));
            }

            if plan.adversarial {
                let lf = lowfake_node.expect("adversarial phase prepared a low-res fake");
                let fwd = self.f.forward_graph(&mut g, lf, &mut binder_f)?;
                f_used = true;
                let mut frozen_d = Binder::frozen();
                let fmaps = self.d.forward(&mut g, fwd.out, &mut frozen_d);
                let adv = patch_generator_loss(&mut g, &fmaps);
                m.loss_adv = Some(g.scalar_value(adv));
                terms.push(adv);
            }

            if plan.internal {
                let perturbed = perturb_signed(
                    &self.low,
                    &mut self.rng_for("delta", epoch),
                    self.cfg.delta_sigma,
                );
                let il = internal_prior_loss(
                    &mut g,
                    &self.f,
                    &mut binder_f,
                    &self.full,
                    &perturbed,
                    self.cfg.lambda_sparse,
                )?;
                f_used = true;
                m.loss_int = Some(g.scalar_value(il.loss));
                m.recon_l1 = Some(g.scalar_value(il.recon));
                let weighted = g.scale(il.loss, self.cfg.lambda_int);
                terms.push(weighted);
            }

            if !terms.is_empty() {
                let mut total = terms[0];
                for t in &terms[1..] {
                    total = g.add(total, *t);
                }
                g.backward(total);

                if g_in_graph {
                    let n = {
                        let mut refs = Vec::new();
                        self.g.collect(&mut refs);
                        refs.len()
                    };
                    let grads = grads_summed(&binder_g, &g, n);
                    let mut muts = Vec::new();
                    self.g.collect_mut(&mut muts);
                    let mut arrays: Vec<&mut ArrayD<f32>> =
                        muts.into_iter().map(|(_, p)| p).collect();
                    self.opt_g.step(&mut arrays, &grads);
                }
                if f_used {
                    let n = {
                        let mut refs = Vec::new();
                        self.f.collect(&mut refs);
                        refs.len()
                    };
                    let grads = grads_summed(&binder_f, &g, n);
                    let mut muts = Vec::new();
                    self.f.collect_mut(&mut muts);
                    let mut arrays: Vec<&mut ArrayD<f32>> =
                        muts.into_iter().map(|(_, p)| p).collect();
                    self.opt_f.step(&mut arrays, &grads);
                }
            }
        }

        m.wallclock_s = t0.elapsed().as_secs_f64();
        Ok(m)
    }

    /// Run the remaining epochs. Writes JSON-lines metrics (and periodic
    /// checkpoints) under `out_dir` when given. On divergence the most
    /// recent healthy snapshot is written next to the metrics before the
    /// error propagates.
    pub fn train(&mut self, out_dir: Option<&Path>) -> Result<TrainReport> {
        self.train_until(out_dir, self.cfg.epochs)
    }

    /// Like [`train`](Self::train) but stops after `stop_epoch` epochs,
    /// leaving the trainer ready to continue. The schedule (warm-up
    /// boundary, cascade split) still derives from `cfg.epochs`, so an
    /// interrupted-and-resumed run follows the exact path of an
    /// uninterrupted one.
    pub fn train_until(&mut self, out_dir: Option<&Path>, stop_epoch: usize) -> Result<TrainReport> {
        let started = Instant::now();
        let mut metrics_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| Error::io(&path, e))?,
                )
            }
            None => None,
        };
        let stop = stop_epoch.min(self.cfg.epochs);
        let snap_every = (self.cfg.epochs / 20).max(1);
        let mut collected = Vec::with_capacity(stop.saturating_sub(self.epoch));

        while self.epoch < stop {
            let epoch = self.epoch;
            let em = self.train_epoch(epoch)?;
            if let Err(div) = em.ensure_finite() {
                if let (Some(dir), Some((at, snap))) = (out_dir, self.last_good.as_ref()) {
                    let path = dir.join(format!("recovery-epoch{at}.pkc"));
                    checkpoint::save(snap, &path)?;
                }
                return Err(div);
            }
            if let Some(f) = metrics_file.as_mut() {
                let line = serde_json::to_string(&em)
                    .map_err(|e| Error::InvalidArgument(format!("metrics serialization: {e}")))?;
                writeln!(f, "{line}").map_err(|e| Error::io(Path::new("metrics.jsonl"), e))?;
            }
            collected.push(em);
            self.epoch = epoch + 1;
            if epoch % snap_every == 0 {
                self.last_good = Some((epoch, self.to_checkpoint()?));
            }
            if self.cfg.checkpoint_every > 0 && self.epoch % self.cfg.checkpoint_every == 0 {
                if let Some(dir) = out_dir {
                    let path = dir.join(format!("ckpt-epoch{}.pkc", self.epoch));
                    self.save_checkpoint(&path)?;
                }
            }
        }
        Ok(TrainReport {
            epochs_run: self.epoch,
            wall_s: started.elapsed().as_secs_f64(),
            metrics: collected,
        })
    }

    /// Generate `n` images of (approximately) the requested size. The
    /// networks are fully convolutional, so any size whose low-resolution
    /// grid fits the transfer window works; dims round up to the next
    /// multiple of the downscale factor.
    pub fn generate_samples(
        &self,
        n: usize,
        height: usize,
        width: usize,
        label: &str,
    ) -> Result<GeneratedBatch> {
        let f = self.cfg.down_factor;
        let (wh, ww) = self.f.window();
        let lh = height.div_ceil(f).max(wh);
        let lw = width.div_ceil(f).max(ww);
        let actual = (lh * f, lw * f);
        let mut images = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = Rng::new(self.cfg.seed, &format!("gen/{label}/{i}"));
            let zin = self.g.make_input(&mut rng, 1, lh, lw)?;
            let lowfake = self.g.generate(&zin);
            let mut g = Graph::<f32>::new();
            let lf = g.constant(lowfake.into_dyn());
            let mut frozen = Binder::frozen();
            let fwd = self.f.forward_graph(&mut g, lf, &mut frozen)?;
            let out = g.value(fwd.out);
            let o4 = out.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let o3 = o4.index_axis(ndarray::Axis(0), 0).to_owned();
            images.push(ImageTensor::from_signed(&o3));
        }
        Ok(GeneratedBatch {
            images,
            requested: (height, width),
            actual,
        })
    }

    /// Fingerprint of every trainable and frozen network parameter, for
    /// determinism and no-mutation checks.
    pub fn fingerprint(&self) -> u64 {
        let mut refs = Vec::new();
        self.g.collect(&mut refs);
        self.dg.collect(&mut refs);
        self.f.collect(&mut refs);
        self.f.embedder_params(&mut refs);
        self.d.collect(&mut refs);
        let owned: Vec<(String, &ArrayD<f32>)> =
            refs.iter().map(|(n, p)| (n.clone(), *p)).collect();
        checkpoint::param_fingerprint(&owned)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut blobs = BTreeMap::new();
        let mut scalars = BTreeMap::new();
        {
            let mut refs = Vec::new();
            self.g.collect(&mut refs);
            self.dg.collect(&mut refs);
            self.f.collect(&mut refs);
            self.f.embedder_params(&mut refs);
            self.d.collect(&mut refs);
            for (name, p) in refs {
                blobs.insert(format!("param/{name}"), (*p).clone());
            }
        }
        for (key, opt) in [
            ("g", &self.opt_g),
            ("dg", &self.opt_dg),
            ("f", &self.opt_f),
            ("d", &self.opt_d),
        ] {
            let (t, m, v) = opt.state();
            scalars.insert(format!("adam/{key}/t"), t as f64);
            for (i, arr) in m.iter().enumerate() {
                blobs.insert(format!("adam/{key}/m/{i}"), arr.clone());
            }
            for (i, arr) in v.iter().enumerate() {
                blobs.insert(format!("adam/{key}/v/{i}"), arr.clone());
            }
        }
        blobs.insert("image/full".to_string(), self.full.data.clone().into_dyn());
        blobs.insert("image/low".to_string(), self.low.data.clone().into_dyn());
        let config = serde_json::to_value(&self.cfg)
            .map_err(|e| Error::InvalidArgument(format!("config serialization: {e}")))?;
        Ok(Checkpoint {
            epoch: self.epoch as u64,
            config,
            scalars,
            blobs,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.to_checkpoint()?, path)
    }

    /// Rebuild a trainer (networks, optimizer state, images, epoch
    /// counter) from a checkpoint. With the built-in providers the
    /// continuation is bit-identical to a run that never stopped.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        provider: Option<Box<dyn PriorProvider>>,
    ) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("config does not parse: {e}")))?;
        cfg.validate()?;
        let full = image_blob(ckpt, "image/full")?;
        let low = image_blob(ckpt, "image/low")?;
        let mut t = Trainer::from_parts(cfg, full, low, provider)?;
        {
            let mut muts = Vec::new();
            t.g.collect_mut(&mut muts);
            assign_blobs(ckpt, muts)?;
        }
        {
            let mut muts = Vec::new();
            t.dg.collect_mut(&mut muts);
            assign_blobs(ckpt, muts)?;
        }
        {
            let mut muts = Vec::new();
            t.f.collect_mut(&mut muts);
            assign_blobs(ckpt, muts)?;
        }
        {
            let mut muts = Vec::new();
            t.f.embedder_params_mut(&mut muts);
            assign_blobs(ckpt, muts)?;
        }
        {
            let mut muts = Vec::new();
            t.d.collect_mut(&mut muts);
            assign_blobs(ckpt, muts)?;
        }
        t.f.rebuild_keys();
        let restore_opt = |key: &str, lr: f32, n: usize| -> Result<Adam> {
            let t_steps = *ckpt
                .scalars
                .get(&format!("adam/{key}/t"))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing adam/{key}/t")))?
                as u64;
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                let mk = format!("adam/{key}/m/{i}");
                let vk = format!("adam/{key}/v/{i}");
                m.push(
                    ckpt.blobs
                        .get(&mk)
                        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing blob {mk}")))?
                        .clone(),
                );
                v.push(
                    ckpt.blobs
                        .get(&vk)
                        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing blob {vk}")))?
                        .clone(),
                );
            }
            Ok(Adam::from_state(lr, t_steps, m, v))
        };
        let ng = {
            let mut r = Vec::new();
            t.g.collect(&mut r);
            r.len()
        };
        let ndg = {
            let mut r = Vec::new();
            t.dg.collect(&mut r);
            r.len()
        };
        let nf = {
            let mut r = Vec::new();
            t.f.collect(&mut r);
            r.len()
        };
        let nd = {
            let mut r = Vec::new();
            t.d.collect(&mut r);
            r.len()
        };
        t.opt_g = restore_opt("g", t.cfg.lr_g, ng)?;
        t.opt_dg = restore_opt("dg", t.cfg.lr_dg, ndg)?;
        t.opt_f = restore_opt("f", t.cfg.lr_f, nf)?;
        t.opt_d = restore_opt("d", t.cfg.lr_d, nd)?;
        t.epoch = ckpt.epoch as usize;
        Ok(t)
    }

    pub fn load_checkpoint(path: &Path, provider: Option<Box<dyn PriorProvider>>) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        Trainer::from_checkpoint(&ckpt, provider)
    }
}

fn assign_blobs(ckpt: &Checkpoint, muts: Vec<(String, &mut ArrayD<f32>)>) -> Result<()> {
    for (name, p) in muts {
        let key = format!("param/{name}");
        let blob = ckpt
            .blobs
            .get(&key)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing blob {key}")))?;
        if blob.shape() != p.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "blob {key} has shape {:?}, expected {:?}",
                blob.shape(),
                p.shape()
            )));
        }
        p.assign(blob);
    }
    Ok(())
}

fn image_blob(ckpt: &Checkpoint, key: &str) -> Result<ImageTensor> {
    let blob = ckpt
        .blobs
        .get(key)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing blob {key}")))?;
    let arr = blob
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::CorruptCheckpoint(format!("blob {key} is not 3-d")))?;
    Ok(ImageTensor::new(arr))
}

/// Build the provider selected by the config.
pub fn build_provider(
    cfg: &RunConfig,
    full: &ImageTensor,
    low: &ImageTensor,
) -> Result<Box<dyn PriorProvider>> {
    match cfg.prior {
        PriorKind::Synthetic => Ok(Box::new(SyntheticAugment::new(
            full.clone(),
            AugSpec::default(),
        )?)),
        PriorKind::Directory => {
            let dir = cfg.prior_path.as_ref().expect("validated");
            Ok(Box::new(DirectoryProvider::new(dir)?))
        }
        PriorKind::Socket => {
            let sock = cfg.prior_path.as_ref().expect("validated");
            let gen = SocketGenerator::connect(sock)?;
            let invert_cfg = InvertCfg {
                iters: cfg.prior_invert_iters,
                ..InvertCfg::default()
            };
            let (provider, _report) =
                InversionProvider::new(Box::new(gen), low, cfg.sigma_z, &invert_cfg)?;
            Ok(Box::new(provider))
        }
    }
}
